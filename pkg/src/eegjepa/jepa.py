"""Masked latent prediction over tubelet tokens.

The context (X) encoder sees only the visible tokens; a narrow predictor,
primed with a learnable mask token plus the masked tokens' positional rows,
predicts the target (Y) encoder's representations at the masked positions.
The Y encoder is an EMA shadow of the X encoder and sits outside the
gradient tape entirely.

Masks are unions of random rectangles on the channel x time token plane,
replicated across the whole temporal grid axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

#: depth, heads, dim, predictor depth, predictor dim
PRESETS = {
    "S": (12, 3, 192, 4, 384),
    "M": (12, 6, 384, 6, 384),
    "B": (12, 12, 768, 12, 384),
    "tiny": (2, 2, 32, 2, 64),
}


@dataclass
class JepaConfig:
    preset: str = "tiny"
    depth: int = 2
    num_heads: int = 2
    embed_dim: int = 32
    predictor_depth: int = 2
    predictor_dim: int = 64
    tubelet_frames: int = 4
    tubelet_channels: int = 4
    tubelet_width: int = 30
    frames: int = 16
    channels: int = 19
    window_samples: int = 500
    mask_num_blocks: int = 2
    mask_spatial_scale: tuple[float, float] = (0.15, 0.45)
    mask_aspect_ratio: tuple[float, float] = (0.75, 1.35)
    target_layernorm: bool = True
    loss_space: str = "encoder"

    def __post_init__(self):
        if self.frames % self.tubelet_frames:
            raise ConfigError(
                f"frames {self.frames} not divisible by tubelet frame extent "
                f"{self.tubelet_frames}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"{self.num_heads} heads")
        if self.predictor_dim % self.num_heads:
            raise ConfigError(f"predictor_dim {self.predictor_dim} not "
                              f"divisible by {self.num_heads} heads")
        if self.loss_space not in ("encoder", "predictor"):
            raise ConfigError(f"loss_space must be 'encoder' or 'predictor', "
                              f"got {self.loss_space!r}")
        for name, (lo, hi) in (("mask_spatial_scale", self.mask_spatial_scale),
                               ("mask_aspect_ratio", self.mask_aspect_ratio)):
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.clip_width() < self.tubelet_width:
            raise ConfigError("window shorter than one tubelet width")

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "JepaConfig":
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        depth, heads, dim, pdepth, pdim = PRESETS[preset]
        base = dict(preset=preset, depth=depth, num_heads=heads,
                    embed_dim=dim, predictor_depth=pdepth, predictor_dim=pdim)
        base.update(overrides)
        return cls(**base)

    # -- derived clip/token geometry --

    def tubelet(self) -> tuple[int, int, int]:
        return (self.tubelet_frames, self.tubelet_channels, self.tubelet_width)

    def clip_channels(self) -> int:
        h = self.tubelet_channels
        return ((self.channels + h - 1) // h) * h

    def clip_width(self) -> int:
        return (self.window_samples // self.tubelet_width) * self.tubelet_width

    def grid(self) -> tuple[int, int, int]:
        return (self.frames // self.tubelet_frames,
                self.clip_channels() // self.tubelet_channels,
                self.clip_width() // self.tubelet_width)

    def num_tokens(self) -> int:
        gt, gc, gw = self.grid()
        return gt * gc * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_spatial_scale"] = list(self.mask_spatial_scale)
        d["mask_aspect_ratio"] = list(self.mask_aspect_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JepaConfig":
        d = dict(d)
        for k in ("mask_spatial_scale", "mask_aspect_ratio"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MaskSpec:
    """Partition of the token grid plus the masked tokens' grid coordinates."""

    masked: np.ndarray    # sorted token indices
    visible: np.ndarray   # sorted complement
    delta_y: np.ndarray   # (len(masked), 3) grid coords (temporal, channel, width)


def sample_mask(grid: tuple[int, int, int], num_blocks: int,
                spatial_scale: tuple[float, float],
                aspect_ratio: tuple[float, float],
                rng: np.random.Generator, max_tries: int = 64) -> MaskSpec:
    """Union of random rectangles on the channel x width plane, spanning the
    temporal axis. Redraws (then forcibly repairs) empty or full masks."""
    gt, gc, gw = grid
    plane = np.zeros((gc, gw), dtype=bool)
    for _ in range(max_tries):
        plane[:] = False
        for _ in range(num_blocks):
            area = rng.uniform(*spatial_scale) * gc * gw
            aspect = rng.uniform(*aspect_ratio)
            bh = int(np.clip(round(np.sqrt(area * aspect)), 1, gc))
            bw = int(np.clip(round(np.sqrt(area / aspect)), 1, gw))
            top = int(rng.integers(0, gc - bh + 1))
            left = int(rng.integers(0, gw - bw + 1))
            plane[top:top + bh, left:left + bw] = True
        if 0 < plane.sum() < plane.size:
            break
    if plane.all():
        plane[rng.integers(0, gc), rng.integers(0, gw)] = False
    elif not plane.any():
        plane[rng.integers(0, gc), rng.integers(0, gw)] = True

    cells = np.flatnonzero(plane.reshape(-1))
    per_t = gc * gw
    masked = (np.arange(gt)[:, None] * per_t + cells[None, :]).reshape(-1)
    visible = np.setdiff1d(np.arange(gt * per_t), masked)
    tt = masked // per_t
    rem = masked % per_t
    delta = np.stack([tt, rem // gw, rem % gw], axis=1)
    return MaskSpec(masked=masked, visible=visible, delta_y=delta)


def jepa_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all masked-token coordinates."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} != target shape {target.shape}")
    return T.mean(T.absolute(pred - target))


class JepaModel:
    """Parameters plus the forward paths that tie them together."""

    def __init__(self, config: JepaConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.x_encoder = nn.init_encoder(rng, c.depth, c.embed_dim,
                                         c.tubelet())
        self.predictor = nn.init_predictor(rng, c.predictor_depth,
                                           c.embed_dim, c.predictor_dim,
                                           c.embed_dim)
        self.y_encoder = nn.clone_params(self.x_encoder, requires_grad=False)
        self.grid = c.grid()
        self.pos_enc = nn.sincos_positions(self.grid, c.embed_dim)
        self.pos_pred = nn.sincos_positions(self.grid, c.predictor_dim)
        self._ema_pairs: list[tuple[Tensor, Tensor]] | None = None

    # -- parameter traversal --

    def trainable_tensors(self):
        yield from nn.iter_named_tensors(self.x_encoder, "x")
        yield from nn.iter_named_tensors(self.predictor, "pred")

    def all_named_tensors(self):
        yield from self.trainable_tensors()
        yield from nn.iter_named_tensors(self.y_encoder, "y")

    def zero_grad(self):
        for _, t in self.trainable_tensors():
            t.zero_grad()

    # -- forward paths --

    def _encode(self, clip, params, visible=None):
        tokens, grid = nn.tubelet_embed(clip, params.embed)
        if grid != self.grid:
            raise ContractError(
                f"clip token grid {grid} does not match model grid {self.grid}")
        tokens = tokens + Tensor(self.pos_enc)
        if visible is not None:
            tokens = T.index_select(tokens, visible, axis=0)
        attns = []
        for blk in params.blocks:
            tokens, attn = nn.transformer_block(tokens, blk,
                                                self.config.num_heads)
            attns.append(attn)
        return nn.layer_norm(tokens, params.norm_out), attns

    def x_encode(self, clip, visible: np.ndarray | None = None):
        """Context encoding of the visible tokens (all tokens when None)."""
        if visible is not None and len(visible) == 0:
            raise ContractError("visible token set must be nonempty")
        return self._encode(clip, self.x_encoder, visible)

    def encode_full(self, clip):
        """Full-sequence context encoding; used by probes and analyses."""
        return self._encode(clip, self.x_encoder, None)

    def y_encode(self, clip) -> Tensor:
        """Full-sequence target encoding, detached from the tape."""
        with T.no_grad():
            out, _ = self._encode(clip, self.y_encoder, None)
        return out

    def predict_masked(self, visible_repr: Tensor, mask: MaskSpec) -> Tensor:
        """Predict target representations at the masked positions.

        Rows come back in masked-index sorted order, in the encoder dimension
        (``loss_space="encoder"``) or the predictor's own width otherwise.
        """
        p = self.predictor
        n_vis = visible_repr.shape[0]
        vin = visible_repr @ p.in_w + p.in_b
        delta = Tensor(self.pos_pred[mask.masked])
        mask_rows = delta + p.mask_token
        z = T.concat([vin, mask_rows], axis=0)
        for blk in p.blocks:
            z, _ = nn.transformer_block(z, blk, self.config.num_heads)
        out_rows = z[n_vis:]
        if self.config.loss_space == "encoder":
            return out_rows @ p.out_w + p.out_b
        return out_rows

    def targets(self, y_full: Tensor, mask: MaskSpec) -> Tensor:
        """Select masked rows of the target encoding, as a detached constant."""
        sel = y_full.data[mask.masked]
        if self.config.loss_space == "predictor":
            p = self.predictor
            sel = sel @ p.in_w.data + p.in_b.data
        if self.config.target_layernorm:
            sel = nn.token_layer_norm(sel)
        return Tensor(np.ascontiguousarray(sel))

    def sample_mask(self, rng: np.random.Generator) -> MaskSpec:
        c = self.config
        return sample_mask(self.grid, c.mask_num_blocks, c.mask_spatial_scale,
                           c.mask_aspect_ratio, rng)

    def forward_loss(self, clip, rng: np.random.Generator):
        """One pretraining forward pass; returns (loss, step stats)."""
        mask = self.sample_mask(rng)
        vis_repr, _ = self.x_encode(clip, mask.visible)
        pred = self.predict_masked(vis_repr, mask)
        target = self.targets(self.y_encode(clip), mask)
        loss = jepa_loss(pred, target)
        stats = {
            "mask": mask,
            "masked_fraction": len(mask.masked) / self.config.num_tokens(),
            "targets": target.data,
        }
        return loss, stats


def ema_update(model: JepaModel, momentum: float) -> None:
    """y <- m*y + (1-m)*x for every parameter pair; exact at m in {0, 1}."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"momentum must be in [0, 1], got {momentum}")
    if momentum == 1.0:
        return
    if model._ema_pairs is None:
        model._ema_pairs = [
            (tx, ty) for (_, tx), (_, ty) in
            zip(nn.iter_named_tensors(model.x_encoder),
                nn.iter_named_tensors(model.y_encoder))]
    for tx, ty in model._ema_pairs:
        if momentum == 0.0:
            ty.data[...] = tx.data
        else:
            ty.data[...] = momentum * ty.data + (1.0 - momentum) * tx.data
