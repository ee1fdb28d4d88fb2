"""Synthetic multichannel EEG generator.

Each recording is a per-channel sum of narrowband oscillators (delta, theta,
alpha, beta, gamma) plus band-limited 1/f noise. The two classes differ in
their relative band-power mix: "normal" recordings carry a strong beta share
(~0.28 of 1-40 Hz power), "abnormal" recordings a weak beta share (~0.12)
with a widened delta share. Fully deterministic under a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .signal import DEFAULT_CHANNELS, Recording

BANDS = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
    "gamma": (30.0, 40.0),
}

# Oscillator frequencies are drawn from these sub-ranges (canonical rhythm
# peaks), keeping each oscillator comfortably inside its band.
OSC_FREQS = {
    "delta": (1.5, 3.5),
    "theta": (5.0, 7.0),
    "alpha": (9.0, 11.5),
    "beta": (16.0, 24.0),
    "gamma": (32.0, 38.0),
}

# Oscillator power fractions per class (sum to 1 before noise is mixed in).
NORMAL_MIX = {"delta": 0.27, "theta": 0.17, "alpha": 0.25, "beta": 0.285,
              "gamma": 0.025}
ABNORMAL_MIX = {"delta": 0.44, "theta": 0.215, "alpha": 0.20, "beta": 0.115,
                "gamma": 0.03}


@dataclass
class SynthConfig:
    duration: float = 300.0
    sample_rate: float = 200.0
    channel_names: list[str] = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    amplitude_uv: float = 30.0
    noise_frac: tuple[float, float] = (0.05, 0.12)
    mix_jitter: float = 0.08
    channel_gain: tuple[float, float] = (0.85, 1.15)
    # When set, only these channel indices carry the class-specific
    # oscillators at full strength; the rest are scaled down to background.
    focus_channels: list[int] | None = None
    focus_background: float = 0.15
    # Share oscillator phases across channels (volume-conduction-like
    # coherence); default keeps phases independent per channel.
    shared_phase: bool = False


def _pink_noise(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 1/f noise band-limited to 1-40 Hz."""
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    amp = np.zeros_like(freqs)
    band = (freqs >= 1.0) & (freqs <= 40.0)
    amp[band] = 1.0 / np.sqrt(freqs[band])
    phases = rng.uniform(0, 2 * np.pi, size=freqs.shape)
    spec = amp * np.exp(1j * phases)
    x = np.fft.irfft(spec, n=n)
    return x / x.std()


def synth_recording(label: str, rng: np.random.Generator,
                    cfg: SynthConfig | None = None,
                    rec_id: str | None = None,
                    subject: str | None = None) -> Recording:
    cfg = cfg or SynthConfig()
    mix = dict(NORMAL_MIX if label == "normal" else ABNORMAL_MIX)
    # per-recording jitter of the band mix, renormalized
    jit = {b: p * (1.0 + rng.uniform(-cfg.mix_jitter, cfg.mix_jitter))
           for b, p in mix.items()}
    total = sum(jit.values())
    jit = {b: p / total for b, p in jit.items()}

    n = int(round(cfg.duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    nf = rng.uniform(*cfg.noise_frac)
    sigma = cfg.amplitude_uv

    # one frequency per band per recording keeps channels spatially coherent
    band_freqs = {b: rng.uniform(lo, hi) for b, (lo, hi) in OSC_FREQS.items()}
    band_amps = {b: sigma * np.sqrt(2.0 * p * (1.0 - nf))
                 for b, p in jit.items()}

    n_ch = len(cfg.channel_names)
    out = np.empty((n_ch, n), dtype=np.float32)
    age = rng.uniform(18.0, 60.0) if label == "normal" else rng.uniform(40.0, 90.0)
    sex = "M" if rng.uniform() < 0.5 else "F"
    shared = {b: rng.uniform(0, 2 * np.pi) for b in BANDS}
    for c in range(n_ch):
        osc = np.zeros(n)
        for b in BANDS:
            phase = shared[b] if cfg.shared_phase else rng.uniform(0, 2 * np.pi)
            osc += band_amps[b] * np.sin(2 * np.pi * band_freqs[b] * t + phase)
        if cfg.focus_channels is not None and c not in cfg.focus_channels:
            osc *= cfg.focus_background
        noise = _pink_noise(n, cfg.sample_rate, rng) * sigma * np.sqrt(nf)
        gain = rng.uniform(*cfg.channel_gain)
        out[c] = (gain * (osc + noise)).astype(np.float32)

    return Recording(out, cfg.sample_rate, list(cfg.channel_names),
                     label=label, subject=subject, age=float(age), sex=sex,
                     rec_id=rec_id)


def synth_generate(n_recordings: int, class_mix: float = 0.5, seed: int = 0,
                   cfg: SynthConfig | None = None) -> list[Recording]:
    """Generate ``n_recordings`` labeled recordings, one subject each.

    ``class_mix`` is the fraction of "normal" recordings; the label sequence
    is an exact-count shuffle, so the mix is deterministic for a given n.
    """
    if n_recordings < 1:
        raise ContractError("n_recordings must be >= 1")
    rng = np.random.default_rng(seed)
    n_normal = int(round(class_mix * n_recordings))
    labels = ["normal"] * n_normal + ["abnormal"] * (n_recordings - n_normal)
    order = rng.permutation(n_recordings)
    out = []
    for i in range(n_recordings):
        out.append(synth_recording(labels[order[i]], rng, cfg,
                                   rec_id=f"rec{i:04d}",
                                   subject=f"subj{i:04d}"))
    return out
