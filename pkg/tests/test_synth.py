"""Synthetic EEG generator: spectral class contrast, determinism."""

import numpy as np
from scipy.signal import welch

from eegjepa import synth


def relative_beta(rec) -> float:
    """PSD-based oracle: beta share of 1-40 Hz power, channel-averaged."""
    freqs, psd = welch(rec.samples.astype(np.float64), fs=rec.sample_rate,
                       nperseg=int(4 * rec.sample_rate), axis=1)
    total = (freqs >= 1.0) & (freqs <= 40.0)
    beta = (freqs >= 13.0) & (freqs < 30.0)
    return float((psd[:, beta].sum(axis=1) / psd[:, total].sum(axis=1)).mean())


def test_class_beta_power_targets():
    cfg = synth.SynthConfig(duration=60.0)
    recs = synth.synth_generate(100, class_mix=0.5, seed=11, cfg=cfg)
    betas = {"normal": [], "abnormal": []}
    for r in recs:
        betas[r.label].append(relative_beta(r))
    assert abs(np.mean(betas["normal"]) - 0.278) < 0.05
    assert abs(np.mean(betas["abnormal"]) - 0.115) < 0.05


def test_abnormal_has_widened_delta():
    cfg = synth.SynthConfig(duration=60.0)
    recs = synth.synth_generate(30, class_mix=0.5, seed=12, cfg=cfg)

    def rel_delta(rec):
        freqs, psd = welch(rec.samples.astype(np.float64), fs=rec.sample_rate,
                           nperseg=int(4 * rec.sample_rate), axis=1)
        total = (freqs >= 1.0) & (freqs <= 40.0)
        delta = (freqs >= 1.0) & (freqs < 4.0)
        return float((psd[:, delta].sum(axis=1) / psd[:, total].sum(axis=1)).mean())

    d_norm = np.mean([rel_delta(r) for r in recs if r.label == "normal"])
    d_abn = np.mean([rel_delta(r) for r in recs if r.label == "abnormal"])
    assert d_abn > d_norm + 0.08


def test_same_seed_bit_identical():
    a = synth.synth_generate(3, seed=7, cfg=synth.SynthConfig(duration=20.0))
    b = synth.synth_generate(3, seed=7, cfg=synth.SynthConfig(duration=20.0))
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.samples, rb.samples)
        assert (ra.label, ra.subject, ra.age, ra.sex) == \
            (rb.label, rb.subject, rb.age, rb.sex)


def test_metadata_and_mix():
    recs = synth.synth_generate(20, class_mix=0.5, seed=3,
                                cfg=synth.SynthConfig(duration=20.0))
    labels = [r.label for r in recs]
    assert labels.count("normal") == 10
    assert len({r.subject for r in recs}) == 20
    assert all(r.channels == 19 for r in recs)
    assert all(r.sex in ("M", "F") for r in recs)
    assert all(r.age is not None for r in recs)


def test_focus_channels_localize_oscillators():
    cfg = synth.SynthConfig(duration=30.0, focus_channels=[0, 1, 2, 3])
    rng = np.random.default_rng(5)
    rec = synth.synth_recording("normal", rng, cfg)
    power = rec.samples.astype(np.float64).var(axis=1)
    assert power[:4].min() > 3.0 * power[4:].max()
