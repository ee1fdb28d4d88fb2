"""Model explanation utilities.

Attention rollout multiplies residual-adjusted, row-normalized attention
matrices layer by layer, then projects the per-token mass back onto the
channel x time plane. Spectral analysis is Welch PSD plus relative power in
the clinical bands. Embedding export mean-pools full-sequence encoder tokens
per recording; a covariance-eigendecomposition PCA supplies the built-in 2D
projection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import tensor as T
from .errors import ContractError, ShapeError
from .jepa import JepaModel
from .signal import ClipDataset

#: (name, low Hz, high Hz); half-open bins except the last band's upper edge
BANDS = (("delta", 1.0, 4.0), ("theta", 4.0, 8.0), ("alpha", 8.0, 13.0),
         ("beta", 13.0, 30.0), ("gamma", 30.0, 40.0))
BAND_NAMES = tuple(b[0] for b in BANDS)


# -- attention rollout --------------------------------------------------------

def head_mean(attn) -> np.ndarray:
    """Average a (heads, N, M) attention tensor over heads."""
    a = attn.data if isinstance(attn, T.Tensor) else np.asarray(attn)
    return a.mean(axis=0)


def attention_rollout(stack) -> np.ndarray:
    """Multiply residual-adjusted attention matrices in layer order.

    Each layer's matrix gets the identity added (residual path) and is
    row-normalized before entering the product. Row i of the result is the
    rolled-out attention of output token i over the input tokens.
    """
    mats = [np.asarray(a, dtype=np.float64) for a in stack]
    if not mats:
        raise ContractError("empty attention stack")
    n = mats[0].shape[0]
    roll = None
    for a in mats:
        if a.ndim != 2 or a.shape != (n, n):
            raise ShapeError(
                f"attention matrices must all be square {n}x{n}, got {a.shape}")
        adjusted = a + np.eye(n)
        adjusted /= adjusted.sum(axis=1, keepdims=True)
        roll = adjusted if roll is None else adjusted @ roll
    return roll


@dataclass
class RolloutMap:
    rollout: np.ndarray            # (N, N)
    grid: tuple[int, int, int]
    heatmap: np.ndarray            # (channels', width')


def rollout_map(attn_stack, grid: tuple[int, int, int],
                tubelet: tuple[int, int, int]) -> RolloutMap:
    """Head-average, roll out, and project the received attention mass.

    The per-token mass (column mean over all query tokens) is reshaped to the
    token grid, averaged over the temporal axis, and nearest-neighbor
    upsampled by the tubelet extents back to sample resolution.
    """
    roll = attention_rollout([head_mean(a) for a in attn_stack])
    gt, gc, gw = grid
    if roll.shape[0] != gt * gc * gw:
        raise ContractError(
            f"rollout size {roll.shape[0]} does not match grid {grid}")
    mass = roll.mean(axis=0).reshape(gt, gc, gw).mean(axis=0)
    _, h, w = tubelet
    heatmap = np.repeat(np.repeat(mass, h, axis=0), w, axis=1)
    return RolloutMap(rollout=roll, grid=grid, heatmap=heatmap)


def clip_rollout(model: JepaModel, clip) -> RolloutMap:
    """Full-sequence encode, then roll the per-layer attention out."""
    with T.no_grad():
        _, attns = model.encode_full(clip)
    return rollout_map(attns, model.grid, model.config.tubelet())


# -- spectra ------------------------------------------------------------------

def psd_welch(x, rate: float, nperseg: int | None = None,
              overlap: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed averaged periodogram (density scaling).

    Defaults to 2 s segments with 50% overlap.
    """
    x = np.asarray(x, dtype=np.float64)
    if nperseg is None:
        nperseg = int(round(2.0 * rate))
    if x.shape[-1] < nperseg:
        raise ContractError(
            f"signal length {x.shape[-1]} shorter than segment {nperseg}")
    freqs, psd = sps.welch(x, fs=rate, window="hann", nperseg=nperseg,
                           noverlap=int(round(overlap * nperseg)), axis=-1)
    return freqs, psd


@dataclass
class BandPower:
    delta: float
    theta: float
    alpha: float
    beta: float
    gamma: float

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in BAND_NAMES}

    def total(self) -> float:
        return float(sum(self.as_dict().values()))


def relative_band_power(freqs, psd) -> BandPower:
    """Fraction of 1-40 Hz power in each band; fractions sum to 1."""
    freqs = np.asarray(freqs, dtype=np.float64)
    psd = np.asarray(psd, dtype=np.float64)
    if psd.ndim > 1:
        psd = psd.mean(axis=tuple(range(psd.ndim - 1)))
    if freqs[0] > 1.0 or freqs[-1] < 40.0:
        raise ContractError(
            f"spectrum covers {freqs[0]:.2f}-{freqs[-1]:.2f} Hz, need 1-40")
    total_mask = (freqs >= 1.0) & (freqs <= 40.0)
    total = float(psd[total_mask].sum())
    if total <= 0:
        raise ContractError("no power in the 1-40 Hz range")
    vals = {}
    for name, lo, hi in BANDS:
        mask = (freqs >= lo) & ((freqs <= hi) if hi == 40.0 else (freqs < hi))
        vals[name] = float(psd[mask].sum()) / total
    return BandPower(**vals)


def recording_band_power(rec, nperseg: int | None = None) -> BandPower:
    freqs, psd = psd_welch(rec.samples, rec.sample_rate, nperseg)
    return relative_band_power(freqs, psd)


# -- embeddings ---------------------------------------------------------------

def export_embeddings(model: JepaModel,
                      dataset: ClipDataset) -> tuple[list[str], list[list]]:
    """One row per recording: id, subject, label, age, sex, then the
    mean-pooled full-sequence token embedding."""
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    d = model.config.embed_dim
    header = ["id", "subject", "label", "age", "sex"] + \
        [f"e{k}" for k in range(d)]
    rows = []
    for i in range(len(dataset)):
        rec = dataset.record_meta(i)
        pooled = np.zeros(d, dtype=np.float64)
        for ci in range(dataset.num_clips):
            with T.no_grad():
                toks, _ = model.encode_full(dataset.clip(i, ci).data)
            pooled += toks.data.mean(axis=0)
        pooled /= dataset.num_clips
        rows.append([rec.rec_id or f"rec{i}", rec.subject or "",
                     rec.label or "", "" if rec.age is None else rec.age,
                     rec.sex or ""] + [float(v) for v in pooled])
    return header, rows


def project_pca(X, k: int = 2):
    """PCA via eigendecomposition of the covariance.

    Components are ordered by decreasing eigenvalue and sign-fixed so each
    one's largest-magnitude coefficient is positive. Returns (coordinates,
    eigenvalues of the kept components, component matrix (d, k)).
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    xc = X - X.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    k = min(k, d)
    comps = eigvecs[:, :k].copy()
    for j in range(k):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return xc @ comps, eigvals[:k], comps


# -- file emitters ------------------------------------------------------------

def write_pgm(path, array) -> None:
    """8-bit binary portable graymap, min-max normalized."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pixels = (scaled * 255).round().astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def write_matrix_csv(path, array, header: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in np.asarray(array):
            writer.writerow([repr(float(v)) for v in row])
