"""Transformer building blocks over the tensor core.

Pre-norm blocks (x + Attn(LN(x)), then + MLP(LN(.))), multi-head attention
that always returns its per-head attention matrices, non-overlapping tubelet
patch embedding, and fixed 3D sinusoidal position tables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with values beyond 2*std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# -- parameter containers -----------------------------------------------------

@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class TransformerBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams


@dataclass
class TubeletEmbedParams:
    """Stride-equals-extent 3D patch projection.

    ``kernel`` holds the (frames x channels x width) convolution kernel
    flattened to (t*h*w, dim); with stride equal to the kernel extent the
    convolution is exactly an unfold followed by this linear map.
    """

    kernel: Tensor
    bias: Tensor
    tubelet: tuple[int, int, int]  # (t, h, w) on the (frames, channels, width) axes


@dataclass
class EncoderParams:
    embed: TubeletEmbedParams
    blocks: list[TransformerBlockParams]
    norm_out: LayerNormParams


@dataclass
class PredictorParams:
    in_w: Tensor
    in_b: Tensor
    mask_token: Tensor
    blocks: list[TransformerBlockParams]
    out_w: Tensor
    out_b: Tensor


def iter_named_tensors(obj, prefix: str = ""):
    """Walk a parameter tree in stable field order, yielding (name, Tensor)."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list)) or dataclasses.is_dataclass(v):
                yield from iter_named_tensors(v, f"{prefix}.{f.name}" if prefix
                                              else f.name)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from iter_named_tensors(v, f"{prefix}.{i}")


def clone_params(obj, requires_grad: bool = False):
    """Deep structural copy of a parameter tree with fresh buffers."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy(), requires_grad=requires_grad)
    if dataclasses.is_dataclass(obj):
        kwargs = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list)) or dataclasses.is_dataclass(v):
                kwargs[f.name] = clone_params(v, requires_grad)
            else:
                kwargs[f.name] = v
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [clone_params(v, requires_grad) for v in obj]
    return obj


# -- forward functions ------------------------------------------------------

def layer_norm(x: Tensor, p: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    inv = T.power(var + eps, -0.5)
    return xc * inv * p.gain + p.bias


def token_layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Affine-free per-row normalization of a plain array."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + eps)).astype(x.dtype)


def attention_forward(tokens: Tensor, p: AttentionParams, num_heads: int,
                      context: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, per-head attention).

    ``context`` defaults to ``tokens`` (self-attention). The attention tensor
    has shape (num_heads, N, M) and every row sums to 1.
    """
    d = tokens.shape[-1]
    if d % num_heads != 0:
        raise ConfigError(
            f"embedding dim {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    ctx = tokens if context is None else context
    n, m = tokens.shape[0], ctx.shape[0]

    def split_heads(t: Tensor, rows: int) -> Tensor:
        return T.transpose(T.reshape(t, (rows, num_heads, hd)), (1, 0, 2))

    q = split_heads(tokens @ p.wq + p.bq, n)
    k = split_heads(ctx @ p.wk + p.bk, m)
    v = split_heads(ctx @ p.wv + p.bv, m)
    scores = T.bmm(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    mixed = T.bmm(attn, v)
    merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, d))
    return merged @ p.wo + p.bo, attn


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    return T.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def transformer_block(tokens: Tensor, p: TransformerBlockParams,
                      num_heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm residual block; returns (tokens', per-head attention)."""
    attn_out, attn = attention_forward(layer_norm(tokens, p.ln1), p.attn,
                                       num_heads)
    h = tokens + attn_out
    return h + mlp_forward(layer_norm(h, p.ln2), p.mlp), attn


def tubelet_embed(clip, p: TubeletEmbedParams) -> tuple[Tensor, tuple]:
    """Map a (frames, channels, width) clip to (N, dim) patch tokens.

    Tokens are ordered row-major over the (frames/t, channels/h, width/w)
    grid: temporal index outermost, then channel, then time-within-window.
    """
    t, h, w = p.tubelet
    x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip))
    tt, cc, ww = x.shape
    if tt % t or cc % h or ww % w:
        raise ContractError(
            f"clip shape {x.shape} not divisible by tubelet (t={t}, h={h}, "
            f"w={w}); pad or truncate first")
    grid = (tt // t, cc // h, ww // w)
    n = grid[0] * grid[1] * grid[2]
    cube = T.reshape(x, (grid[0], t, grid[1], h, grid[2], w))
    unfolded = T.reshape(T.transpose(cube, (0, 2, 4, 1, 3, 5)),
                         (n, t * h * w))
    return unfolded @ p.kernel + p.bias, grid


def _axis_table(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_positions(grid: tuple[int, int, int], dim: int,
                     dtype=np.float32) -> np.ndarray:
    """Fixed 3D sinusoidal position table, (N, dim).

    Each grid axis (temporal, channel, time-within-window) gets an equal
    even-sized share of the embedding (2*(dim//6) dims); leftover dims are
    zero. Pure function of its arguments.
    """
    axis_dim = 2 * (dim // 6)
    gt, gc, gw = grid
    ti, ci, wi = np.meshgrid(np.arange(gt), np.arange(gc), np.arange(gw),
                             indexing="ij")
    parts = [_axis_table(ti.reshape(-1).astype(np.float64), axis_dim),
             _axis_table(ci.reshape(-1).astype(np.float64), axis_dim),
             _axis_table(wi.reshape(-1).astype(np.float64), axis_dim)]
    n = gt * gc * gw
    pad = dim - 3 * axis_dim
    if pad:
        parts.append(np.zeros((n, pad)))
    return np.concatenate(parts, axis=1).astype(dtype)


# -- initialization -----------------------------------------------------------

def _linear(rng, d_in, d_out, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype),
               requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return w, b


def _layer_norm_params(dim, dtype) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                           Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))


def init_block(rng, dim: int, dtype=np.float32) -> TransformerBlockParams:
    wq, bq = _linear(rng, dim, dim, dtype)
    wk, bk = _linear(rng, dim, dim, dtype)
    wv, bv = _linear(rng, dim, dim, dtype)
    wo, bo = _linear(rng, dim, dim, dtype)
    w1, b1 = _linear(rng, dim, 4 * dim, dtype)
    w2, b2 = _linear(rng, 4 * dim, dim, dtype)
    return TransformerBlockParams(
        ln1=_layer_norm_params(dim, dtype),
        attn=AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo),
        ln2=_layer_norm_params(dim, dtype),
        mlp=MlpParams(w1, b1, w2, b2))


def init_encoder(rng, depth: int, dim: int, tubelet: tuple[int, int, int],
                 dtype=np.float32) -> EncoderParams:
    t, h, w = tubelet
    kernel, bias = _linear(rng, t * h * w, dim, dtype)
    return EncoderParams(
        embed=TubeletEmbedParams(kernel, bias, (t, h, w)),
        blocks=[init_block(rng, dim, dtype) for _ in range(depth)],
        norm_out=_layer_norm_params(dim, dtype))


def init_predictor(rng, depth: int, in_dim: int, dim: int, out_dim: int,
                   dtype=np.float32) -> PredictorParams:
    in_w, in_b = _linear(rng, in_dim, dim, dtype)
    out_w, out_b = _linear(rng, dim, out_dim, dtype)
    return PredictorParams(
        in_w=in_w, in_b=in_b,
        mask_token=Tensor(trunc_normal(rng, (dim,), dtype=dtype),
                          requires_grad=True),
        blocks=[init_block(rng, dim, dtype) for _ in range(depth)],
        out_w=out_w, out_b=out_b)
