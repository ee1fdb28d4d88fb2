"""Training loop: collapse metric, smoke runs, checkpoint round trips."""

import numpy as np
import pytest

from eegjepa import checkpoint as ckpt
from eegjepa import jepa, nn, optim, signal, synth, train
from eegjepa.jepa import JepaConfig, JepaModel, ema_update


def tiny_dataset(n=8, seed=0, frames=16, augment=None):
    cfg = synth.SynthConfig(duration=160.0)
    recs = synth.synth_generate(n, seed=seed, cfg=cfg)
    pcfg = signal.PreprocessConfig(crop_seconds=160.0)
    return signal.ClipDataset(recs, pcfg, frames=frames, sampling_rate=1,
                              num_clips=1, tubelet=(4, 4, 30),
                              augment_spec=augment)


def tiny_model(seed=0, **overrides):
    return JepaModel(JepaConfig.from_preset("tiny", **overrides),
                     np.random.default_rng(seed))


class TestCollapseMetric:
    def test_identical_rows_give_zero(self):
        x = np.tile(np.arange(8.0), (20, 1))
        assert train.collapse_metric(x) == 0.0

    def test_standard_normal_rows_near_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1000, 16))
        assert train.collapse_metric(x) == pytest.approx(1.0, abs=0.1)


class TestPretrainLoop:
    def test_same_seed_gives_identical_loss_curves(self, tmp_path):
        ds = tiny_dataset()

        def run():
            model = tiny_model()
            sched = train.make_schedule(len(ds), train.TrainConfig(
                epochs=2, batch_size=4, seed=5), warmup_epochs=1.0)
            report = train.pretrain(model, ds, sched, train.TrainConfig(
                epochs=2, batch_size=4, seed=5))
            return [r["loss"] for r in report.log_rows]

        assert run() == run()

    def test_constant_momentum_one_freezes_target_encoder(self):
        ds = tiny_dataset()
        model = tiny_model()
        y_before = {n: t.data.copy()
                    for n, t in nn.iter_named_tensors(model.y_encoder)}
        cfg = train.TrainConfig(epochs=1, batch_size=4, seed=1)
        sched = train.make_schedule(len(ds), cfg, warmup_epochs=1.0,
                                    momentum_range=(1.0, 1.0))
        train.pretrain(model, ds, sched, cfg)
        for n, t in nn.iter_named_tensors(model.y_encoder):
            np.testing.assert_array_equal(t.data, y_before[n])

    def test_step_updates_trainables_only_then_ema_converges(self):
        ds = tiny_dataset()
        model = tiny_model()
        x_before = {n: t.data.copy() for n, t in model.trainable_tensors()}
        y_before = {n: t.data.copy()
                    for n, t in nn.iter_named_tensors(model.y_encoder, "y")}

        rng = np.random.default_rng(2)
        opt = optim.AdamW(list(model.trainable_tensors()))
        loss, _ = model.forward_loss(ds.clip(0).data, rng)
        loss.backward()
        optim.clip_grad_norm(opt.grads(), 10.0)
        opt.step(lr=1e-3, wd=0.1)
        opt.zero_grad()

        changed = sum(not np.array_equal(t.data, x_before[n])
                      for n, t in model.trainable_tensors())
        assert changed == sum(1 for _ in model.trainable_tensors())
        for n, t in nn.iter_named_tensors(model.y_encoder, "y"):
            np.testing.assert_array_equal(t.data, y_before[n])

        def gap():
            return sum(float(np.abs(tx.data - ty.data).sum()) for tx, ty in
                       zip((t for _, t in nn.iter_named_tensors(model.x_encoder)),
                           (t for _, t in nn.iter_named_tensors(model.y_encoder))))

        before_gap = gap()
        ema_update(model, 0.9)
        assert gap() < before_gap

    def test_log_csv_schema_and_clipped_norms(self, tmp_path):
        ds = tiny_dataset()
        model = tiny_model()
        cfg = train.TrainConfig(epochs=1, batch_size=4, seed=3,
                                log_path=str(tmp_path / "log.csv"))
        sched = train.make_schedule(len(ds), cfg, warmup_epochs=0.5)
        report = train.pretrain(model, ds, sched, cfg)
        lines = (tmp_path / "log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,lr,wd,momentum,loss,collapse,grad_norm"
        assert len(lines) == 1 + report.steps
        for row in report.log_rows:
            assert row["grad_norm"] <= sched.clip_norm + 1e-6

    def test_loss_decreases_on_small_run(self):
        ds = tiny_dataset(n=10, seed=4)
        model = tiny_model(seed=4)
        cfg = train.TrainConfig(epochs=3, batch_size=5, seed=4)
        sched = train.make_schedule(len(ds), cfg, warmup_epochs=1.0,
                                    ref_lr=1e-3, start_lr=3e-4)
        report = train.pretrain(model, ds, sched, cfg)
        assert report.epoch_losses[-1] < report.epoch_losses[0]
        assert report.collapse_min > 0.1

    def test_gradient_accumulation_halves_step_count(self):
        ds = tiny_dataset()
        model = tiny_model()
        cfg = train.TrainConfig(epochs=1, batch_size=2, grad_accum=2, seed=6)
        sched = train.make_schedule(len(ds), cfg, warmup_epochs=0.5)
        report = train.pretrain(model, ds, sched, cfg)
        assert report.steps == 2  # 8 recordings / batch 2 / accum 2


class TestCheckpoint:
    def test_round_trip_restores_everything(self, tmp_path):
        model = tiny_model(seed=7)
        opt = optim.AdamW(list(model.trainable_tensors()))
        rng = np.random.default_rng(8)
        path = tmp_path / "m.ejck"
        ckpt.save_checkpoint(path, model, opt, step=12, epoch=3, rng=rng)
        ck = ckpt.load_checkpoint(path)
        assert ck.step == 12 and ck.epoch == 3
        back = ckpt.restore_model(ck)
        for (n1, t1), (n2, t2) in zip(model.all_named_tensors(),
                                      back.all_named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)
        r2 = ckpt.restore_rng(ck)
        assert r2.integers(1 << 30) == rng.integers(1 << 30)

    def test_same_state_writes_identical_bytes(self, tmp_path):
        model = tiny_model(seed=9)
        p1, p2 = tmp_path / "a.ejck", tmp_path / "b.ejck"
        ckpt.save_checkpoint(p1, model, step=1, epoch=1)
        ckpt.save_checkpoint(p2, model, step=1, epoch=1)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_load_one_step_is_bit_identical(self, tmp_path):
        clip = np.random.default_rng(10).standard_normal(
            (16, 20, 480)).astype(np.float32)

        def one_step(model, opt, rng):
            loss, _ = model.forward_loss(clip, rng)
            loss.backward()
            optim.clip_grad_norm(opt.grads(), 10.0)
            opt.step(lr=5e-4, wd=0.1)
            opt.zero_grad()
            ema_update(model, 0.998)

        model = tiny_model(seed=11)
        opt = optim.AdamW(list(model.trainable_tensors()))
        rng = np.random.default_rng(12)
        for _ in range(3):
            one_step(model, opt, rng)
        path = tmp_path / "mid.ejck"
        ckpt.save_checkpoint(path, model, opt, step=3, rng=rng)

        one_step(model, opt, rng)
        want = {n: t.data.copy() for n, t in model.all_named_tensors()}

        ck = ckpt.load_checkpoint(path)
        model2 = ckpt.restore_model(ck)
        opt2 = ckpt.restore_optimizer(ck, model2)
        rng2 = ckpt.restore_rng(ck)
        one_step(model2, opt2, rng2)
        for n, t in model2.all_named_tensors():
            np.testing.assert_array_equal(t.data, want[n], err_msg=n)

    def test_pretrain_emits_checkpoints(self, tmp_path):
        ds = tiny_dataset()
        model = tiny_model()
        cfg = train.TrainConfig(epochs=2, batch_size=4, seed=13,
                                checkpoint_dir=str(tmp_path))
        sched = train.make_schedule(len(ds), cfg, warmup_epochs=0.5)
        report = train.pretrain(model, ds, sched, cfg)
        assert (tmp_path / "epoch_0001.ejck").exists()
        assert (tmp_path / "epoch_0002.ejck").exists()
        assert report.final_checkpoint == str(tmp_path / "final.ejck")
        ck = ckpt.load_checkpoint(report.final_checkpoint)
        assert ck.config["preset"] == "tiny"
