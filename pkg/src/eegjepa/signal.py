"""Raw recordings to model-ready clips.

Pipeline stages (each usable on its own): crop, channel selection, polyphase
resampling, zero-phase Butterworth bandpass, sliding-window extraction with
per-channel z-normalization, clip assembly with tubelet-divisibility padding,
and stochastic augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, ContractError, IngestionError

#: Ordered 19-channel subset of the 10-20 montage used throughout.
DEFAULT_CHANNELS = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
    "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
]

STD_FLOOR = 1e-8


@dataclass
class Recording:
    """Multichannel signal with microvolt-scaled float samples."""

    samples: np.ndarray  # (channels, n)
    sample_rate: float
    channel_names: list[str]
    label: str | None = None
    subject: str | None = None
    age: float | None = None
    sex: str | None = None
    rec_id: str | None = None

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise IngestionError(
                f"samples must be (channels, n), got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise IngestionError(f"sample rate must be > 0, got {self.sample_rate}")
        if len(self.channel_names) != self.samples.shape[0]:
            raise IngestionError(
                f"{len(self.channel_names)} channel names for "
                f"{self.samples.shape[0]} channels")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class WindowedRecording:
    """Z-normalized sliding windows: (num_windows, channels, window) array."""

    windows: np.ndarray
    stride: int
    rec_id: str | None = None
    label: str | None = None
    subject: str | None = None
    age: float | None = None
    sex: str | None = None

    @property
    def num_windows(self) -> int:
        return self.windows.shape[0]


@dataclass
class Clip:
    """One model input plus its provenance."""

    data: np.ndarray  # (frames, channels', width')
    rec_id: str | None = None
    window_indices: np.ndarray | None = None


@dataclass
class AugmentationSpec:
    """Which augmentations run, and their ranges."""

    enabled: frozenset = frozenset()
    resize_aspect: tuple[float, float] = (0.75, 1.35)
    resize_scale: tuple[float, float] = (0.3, 1.0)
    noise_std: float = 0.1
    amp_scale: tuple[float, float] = (0.8, 1.2)

    KNOWN = frozenset({"spatial", "noise", "scale", "flip"})

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - self.KNOWN
        if unknown:
            raise ConfigError(f"unknown augmentations: {sorted(unknown)}")
        for name, (lo, hi) in (("resize_aspect", self.resize_aspect),
                               ("resize_scale", self.resize_scale),
                               ("amp_scale", self.amp_scale)):
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} range must satisfy 0 < lo <= hi, "
                                  f"got ({lo}, {hi})")


@dataclass
class PreprocessConfig:
    channel_names: list[str] = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    crop_seconds: float = 300.0
    target_rate: float = 100.0
    band: tuple[float, float] = (1.0, 40.0)
    filter_order: int = 4
    window_samples: int = 500
    window_stride: int = 250


# -- stages -------------------------------------------------------------------

def crop(rec: Recording, seconds: float) -> Recording:
    n = int(round(seconds * rec.sample_rate))
    if rec.n_samples < n:
        raise IngestionError(
            f"recording {rec.rec_id or '?'} is {rec.duration:.1f}s, "
            f"need at least {seconds:.0f}s")
    return replace(rec, samples=rec.samples[:, :n])


def select_channels(rec: Recording, names: list[str]) -> Recording:
    pos = {c: i for i, c in enumerate(rec.channel_names)}
    missing = [c for c in names if c not in pos]
    if missing:
        raise IngestionError(
            f"recording {rec.rec_id or '?'} is missing channels {missing}")
    idx = [pos[c] for c in names]
    return replace(rec, samples=rec.samples[idx], channel_names=list(names))


def resample(rec: Recording, target_rate: float) -> Recording:
    """Polyphase rational resampler with built-in anti-alias lowpass."""
    if rec.sample_rate == target_rate:
        return rec
    frac = Fraction(target_rate / rec.sample_rate).limit_denominator(1000)
    out = sps.resample_poly(rec.samples.astype(np.float64), frac.numerator,
                            frac.denominator, axis=1)
    return replace(rec, samples=out.astype(np.float32),
                   sample_rate=target_rate)


def bandpass(rec: Recording, lo: float, hi: float, order: int = 4) -> Recording:
    """Zero-phase Butterworth bandpass (applied forward and backward)."""
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=rec.sample_rate,
                     output="sos")
    out = sps.sosfiltfilt(sos, rec.samples.astype(np.float64), axis=1)
    return replace(rec, samples=out.astype(np.float32))


def znorm_window(win: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit std; constant channels map to zeros."""
    x = win.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    out = np.where(sd > STD_FLOOR, (x - mu) / np.maximum(sd, STD_FLOOR), 0.0)
    return out.astype(np.float32)


def window_count(n_samples: int, window: int, stride: int) -> int:
    return (n_samples - window) // stride + 1


def window(rec: Recording, window_samples: int, stride: int,
           normalize: bool = True) -> WindowedRecording:
    n = window_count(rec.n_samples, window_samples, stride)
    if n < 1:
        raise IngestionError(
            f"recording shorter than one window ({rec.n_samples} < "
            f"{window_samples} samples)")
    out = np.empty((n, rec.channels, window_samples), dtype=np.float32)
    for j in range(n):
        seg = rec.samples[:, j * stride:j * stride + window_samples]
        out[j] = znorm_window(seg) if normalize else seg
    return WindowedRecording(out, stride, rec_id=rec.rec_id, label=rec.label,
                             subject=rec.subject, age=rec.age, sex=rec.sex)


def preprocess_continuous(rec: Recording, cfg: PreprocessConfig) -> Recording:
    """Crop, select channels, resample, bandpass; no windowing yet."""
    if rec.channels < len(cfg.channel_names):
        raise IngestionError(
            f"recording {rec.rec_id or '?'} has {rec.channels} channels, "
            f"need at least {len(cfg.channel_names)}")
    out = crop(rec, cfg.crop_seconds)
    out = select_channels(out, cfg.channel_names)
    out = resample(out, cfg.target_rate)
    return bandpass(out, cfg.band[0], cfg.band[1], cfg.filter_order)


def preprocess(rec: Recording, cfg: PreprocessConfig) -> WindowedRecording:
    cont = preprocess_continuous(rec, cfg)
    return window(cont, cfg.window_samples, cfg.window_stride)


# -- clip assembly ------------------------------------------------------------

def pad_to_tubelet(frames_arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad channels up and truncate width down to tubelet multiples."""
    _, c, width = frames_arr.shape
    c_pad = (-c) % h
    w_keep = (width // w) * w
    out = frames_arr[:, :, :w_keep]
    if c_pad:
        out = np.concatenate(
            [out, np.zeros((out.shape[0], c_pad, w_keep), dtype=out.dtype)],
            axis=1)
    return np.ascontiguousarray(out)


def clip_window_indices(num_windows: int, frames: int, sampling_rate: int,
                        clip_index: int, num_clips: int) -> np.ndarray:
    """Deterministic window indices for one clip.

    The recording's windows are partitioned into ``num_clips`` equal spans;
    clip ``clip_index`` takes every ``sampling_rate``-th window from the start
    of its span.
    """
    if not 0 <= clip_index < num_clips:
        raise ContractError(f"clip_index {clip_index} not in [0, {num_clips})")
    span = num_windows // num_clips
    need = frames * sampling_rate
    if need > span:
        raise ContractError(
            f"{frames} frames at sampling rate {sampling_rate} need "
            f"{need} windows per span, only {span} available "
            f"({num_windows} windows / {num_clips} clips)")
    start = clip_index * span
    return start + np.arange(frames) * sampling_rate


def sample_clip(wrec: WindowedRecording, frames: int, sampling_rate: int,
                clip_index: int, num_clips: int,
                tubelet: tuple[int, int, int]) -> Clip:
    idx = clip_window_indices(wrec.num_windows, frames, sampling_rate,
                              clip_index, num_clips)
    _, h, w = tubelet
    data = pad_to_tubelet(wrec.windows[idx], h, w)
    return Clip(data, rec_id=wrec.rec_id, window_indices=idx)


# -- augmentation -------------------------------------------------------------

def _bilinear_resize(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (frames, h, w) to (frames, out_h, out_w), half-pixel centers."""
    _, h, w = stack.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[None, :, None]
    fx = (xs - x0).astype(np.float32)[None, None, :]
    a = stack[:, y0[:, None], x0[None, :]]
    b = stack[:, y0[:, None], x1[None, :]]
    c = stack[:, y1[:, None], x0[None, :]]
    d = stack[:, y1[:, None], x1[None, :]]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _random_resized_crop(data: np.ndarray, spec: AugmentationSpec,
                         rng: np.random.Generator) -> np.ndarray:
    _, h, w = data.shape
    area = rng.uniform(*spec.resize_scale) * h * w
    aspect = rng.uniform(*spec.resize_aspect)
    ch = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
    cw = int(np.clip(round(np.sqrt(area / aspect)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop_box = data[:, top:top + ch, left:left + cw]
    return _bilinear_resize(crop_box, h, w)


def augment(clip: Clip, spec: AugmentationSpec,
            rng: np.random.Generator) -> Clip:
    """Apply the enabled augmentations in the fixed order
    spatial -> flip -> noise -> scale. Identity when the set is empty."""
    data = clip.data
    if "spatial" in spec.enabled:
        data = _random_resized_crop(data, spec, rng)
    if "flip" in spec.enabled:
        data = np.ascontiguousarray(data[::-1])
    if "noise" in spec.enabled:
        data = data + rng.normal(0.0, spec.noise_std,
                                 size=data.shape).astype(np.float32)
    if "scale" in spec.enabled:
        data = data * np.float32(rng.uniform(*spec.amp_scale))
    return Clip(np.ascontiguousarray(data, dtype=np.float32),
                rec_id=clip.rec_id, window_indices=clip.window_indices)


# -- training-side dataset ----------------------------------------------------

class ClipDataset:
    """Lazy clip source over preprocessed (continuous) recordings.

    Keeps only the filtered continuous signal per recording; windows are
    sliced and z-normalized on demand, which matches ``sample_clip`` over a
    fully windowed recording bit for bit.
    """

    def __init__(self, recordings, cfg: PreprocessConfig, frames: int,
                 sampling_rate: int, num_clips: int,
                 tubelet: tuple[int, int, int],
                 augment_spec: AugmentationSpec | None = None):
        self.cfg = cfg
        self.frames = frames
        self.sampling_rate = sampling_rate
        self.num_clips = num_clips
        self.tubelet = tubelet
        self.augment_spec = augment_spec
        self._continuous = [preprocess_continuous(r, cfg) for r in recordings]

    def __len__(self) -> int:
        return len(self._continuous)

    def num_windows(self, i: int) -> int:
        return window_count(self._continuous[i].n_samples,
                            self.cfg.window_samples, self.cfg.window_stride)

    def record_meta(self, i: int) -> Recording:
        return self._continuous[i]

    def labels(self) -> list:
        return [r.label for r in self._continuous]

    def subjects(self) -> list:
        return [r.subject for r in self._continuous]

    def clip(self, i: int, clip_index: int = 0,
             rng: np.random.Generator | None = None) -> Clip:
        rec = self._continuous[i]
        idx = clip_window_indices(self.num_windows(i), self.frames,
                                  self.sampling_rate, clip_index,
                                  self.num_clips)
        ws, stride = self.cfg.window_samples, self.cfg.window_stride
        frames_arr = np.stack([
            znorm_window(rec.samples[:, j * stride:j * stride + ws])
            for j in idx])
        _, h, w = self.tubelet
        out = Clip(pad_to_tubelet(frames_arr, h, w), rec_id=rec.rec_id,
                   window_indices=idx)
        if self.augment_spec is not None and rng is not None:
            out = augment(out, self.augment_spec, rng)
        return out
