"""Schedules, AdamW semantics, gradient clipping."""

import numpy as np
import pytest

from eegjepa import optim
from eegjepa.errors import ConfigError, TrainingError
from eegjepa.optim import AdamW, ScheduleConfig, clip_grad_norm, global_grad_norm
from eegjepa.tensor import Tensor


def sched(total_epochs=100, steps_per_epoch=50, **kw):
    return ScheduleConfig(total_epochs=total_epochs,
                          steps_per_epoch=steps_per_epoch, **kw)


class TestLearningRateSchedule:
    def test_endpoints(self):
        s = sched()
        assert optim.lr_at(0, s) == pytest.approx(2.0e-4, abs=1e-12)
        assert optim.lr_at(s.warmup_steps, s) == pytest.approx(6.25e-4, abs=1e-12)
        assert optim.lr_at(s.total_steps, s) == pytest.approx(1.0e-6, abs=1e-9)

    def test_clamps_beyond_end(self):
        s = sched()
        assert optim.lr_at(s.total_steps + 1000, s) == \
            optim.lr_at(s.total_steps, s)

    def test_no_jump_at_warmup_junction(self):
        s = sched()
        ws = s.warmup_steps
        linear_limit = s.start_lr + (s.ref_lr - s.start_lr) * (ws / ws)
        assert abs(optim.lr_at(ws, s) - linear_limit) < 1e-12

    def test_monotone_warmup_then_decay(self):
        s = sched(total_epochs=80)
        lrs = [optim.lr_at(t, s) for t in range(0, s.total_steps + 1, 25)]
        peak = int(np.argmax(lrs))
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:], lrs[peak + 1:]))

    def test_invalid_ordering_rejected(self):
        with pytest.raises(ConfigError):
            sched(start_lr=1e-3)  # above ref_lr


class TestWeightDecayAndMomentumSchedules:
    def test_endpoints(self):
        s = sched()
        assert optim.wd_at(0, s) == pytest.approx(0.04, abs=1e-12)
        assert optim.wd_at(s.total_steps, s) == pytest.approx(0.4, abs=1e-9)
        assert optim.momentum_at(0, s) == pytest.approx(0.998, abs=1e-12)
        assert optim.momentum_at(s.total_steps, s) == pytest.approx(1.0, abs=1e-9)

    def test_momentum_midpoint_is_linear(self):
        s = sched()
        assert optim.momentum_at(s.total_steps // 2, s) == \
            pytest.approx(0.999, abs=1e-12)

    def test_wd_monotone_increasing(self):
        s = sched()
        wds = [optim.wd_at(t, s) for t in range(0, s.total_steps + 1, 100)]
        assert all(a <= b + 1e-15 for a, b in zip(wds, wds[1:]))


class TestAdamW:
    def test_zero_grads_no_decay_leaves_params(self):
        p = Tensor(np.full(4, 3.0, np.float32), requires_grad=True)
        p.grad = np.zeros(4, np.float32)
        opt = AdamW([("p", p)])
        before = p.data.copy()
        opt.step(lr=0.01, wd=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_closed_form(self):
        p = Tensor(np.zeros((1, 1), np.float32), requires_grad=True)
        p.grad = np.ones((1, 1), np.float32)
        opt = AdamW([("p", p)])
        opt.step(lr=0.01, wd=0.0)
        assert p.data[0, 0] == pytest.approx(-0.01, rel=1e-6)

    def test_decoupled_decay_is_bitexact_multiplicative(self):
        val = np.float32(1.7)
        p = Tensor(np.array([[val]], np.float32), requires_grad=True)
        p.grad = np.zeros((1, 1), np.float32)
        opt = AdamW([("p", p)])
        lr, wd = 0.01, 0.3
        want = val * np.float32(1.0 - lr * wd)
        opt.step(lr=lr, wd=wd)
        assert p.data[0, 0] == want  # bit-level equality

    def test_decay_skips_1d_params_by_default(self):
        bias = Tensor(np.full(3, 2.0, np.float32), requires_grad=True)
        bias.grad = np.zeros(3, np.float32)
        opt = AdamW([("b", bias)])
        opt.step(lr=0.01, wd=0.5)
        np.testing.assert_array_equal(bias.data, 2.0)

    def test_nan_grad_aborts_with_diagnostic(self):
        p = Tensor(np.zeros(2, np.float32), requires_grad=True)
        p.grad = np.array([np.nan, 0.0], np.float32)
        opt = AdamW([("layer.w", p)])
        with pytest.raises(TrainingError, match="layer.w"):
            opt.step(lr=0.01)

    def test_none_grads_skipped(self):
        p = Tensor(np.ones(2, np.float32), requires_grad=True)
        opt = AdamW([("p", p)])
        opt.step(lr=0.1, wd=0.0)
        np.testing.assert_array_equal(p.data, 1.0)


class TestClipGradNorm:
    def test_below_threshold_untouched(self):
        g = np.full(25, 1.0, np.float32)  # norm 5
        before = g.copy()
        assert clip_grad_norm([g], 10.0) == 1.0
        np.testing.assert_array_equal(g, before)

    def test_above_threshold_scaled_to_max(self):
        g = np.full(400, 1.0, np.float32)  # norm 20
        scale = clip_grad_norm([g], 10.0)
        assert scale == pytest.approx(0.5, abs=1e-7)
        assert global_grad_norm([g]) == pytest.approx(10.0, abs=1e-6)

    def test_zero_grads_guarded(self):
        g = np.zeros(10, np.float32)
        assert clip_grad_norm([g], 10.0) == 1.0

    def test_multiple_arrays_share_global_norm(self):
        a = np.full(200, 1.0, np.float32)
        b = np.full(200, 1.0, np.float32)  # joint norm 20
        clip_grad_norm([a, b], 10.0)
        assert global_grad_norm([a, b]) == pytest.approx(10.0, abs=1e-6)
