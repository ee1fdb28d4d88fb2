"""Attention probe: a learnable query cross-attends over encoder tokens, the
attended value is added back to the query, and a linear head classifies it.

Frozen evaluation caches encoder tokens (the encoder is never touched);
fine-tuning backpropagates into the encoder at a reduced learning rate.
Validation splits are subject-disjoint via a stable subject hash, and clip
logits are averaged per recording before metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, optim
from . import tensor as T
from .errors import ConfigError
from .jepa import JepaModel
from .metrics import EvalReport, compute_metrics, subject_fold
from .signal import ClipDataset
from .tensor import Tensor

LABEL_ORDER = {"normal": 0, "abnormal": 1}


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 1e-3
    encoder_lr: float = 1e-5
    batch_size: int = 16
    num_queries: int = 1
    num_heads: int = 1
    n_folds: int = 5
    val_fold: int = 0
    seed: int = 0


@dataclass
class ProbeHead:
    query: Tensor
    attn: nn.AttentionParams
    cls_w: Tensor
    cls_b: Tensor

    def named_tensors(self):
        yield from nn.iter_named_tensors(self, "probe")


@dataclass
class TokenRecord:
    """Encoder tokens for every clip of one recording."""

    clips: list  # np.ndarray or Clip data arrays, one per clip
    label: int
    subject: str
    rec_id: str | None = None


def init_probe(rng: np.random.Generator, dim: int, n_classes: int = 2,
               num_queries: int = 1) -> ProbeHead:
    """Value and output projections start at identity, so the head begins as
    mean pooling over the embeddings and learns attention from there."""
    blk = nn.init_block(rng, dim)
    attn = blk.attn
    attn.wv.data[...] = np.eye(dim, dtype=np.float32)
    attn.wo.data[...] = np.eye(dim, dtype=np.float32)
    return ProbeHead(
        query=Tensor(nn.trunc_normal(rng, (num_queries, dim)),
                     requires_grad=True),
        attn=attn,
        cls_w=Tensor(nn.trunc_normal(rng, (dim, n_classes), std=0.2),
                     requires_grad=True),
        cls_b=Tensor(np.zeros(n_classes, np.float32), requires_grad=True))


def probe_forward(tokens, head: ProbeHead,
                  num_heads: int = 1) -> tuple[Tensor, Tensor]:
    """Returns (logits, attention weights over tokens)."""
    toks = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    attended, weights = nn.attention_forward(head.query, head.attn, num_heads,
                                             context=toks)
    pooled = head.query + attended
    if pooled.shape[0] > 1:
        pooled = T.mean(pooled, axis=0, keepdims=True)
    logits = pooled @ head.cls_w + head.cls_b
    return T.reshape(logits, (logits.shape[-1],)), weights


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    return -T.log_softmax(logits, axis=-1)[int(label)]


def label_to_index(label) -> int:
    if label in LABEL_ORDER:
        return LABEL_ORDER[label]
    if label in (0, 1):
        return int(label)
    raise ConfigError(f"unsupported label {label!r}")


def extract_tokens(model: JepaModel, dataset: ClipDataset) -> list[TokenRecord]:
    """Frozen full-sequence encoding of every clip, cached as plain arrays."""
    out = []
    for i in range(len(dataset)):
        rec = dataset.record_meta(i)
        clips = []
        for ci in range(dataset.num_clips):
            clip = dataset.clip(i, ci)
            with T.no_grad():
                toks, _ = model.encode_full(clip.data)
            clips.append(toks.data)
        out.append(TokenRecord(clips=clips, label=label_to_index(rec.label),
                               subject=rec.subject or f"rec{i}",
                               rec_id=rec.rec_id))
    return out


def split_records(records: list[TokenRecord], n_folds: int,
                  val_fold: int) -> tuple[list[int], list[int]]:
    """Subject-disjoint split; both sides must contain both classes."""
    train_idx, val_idx = [], []
    for i, r in enumerate(records):
        (val_idx if subject_fold(r.subject, n_folds) == val_fold
         else train_idx).append(i)
    for name, idx in (("train", train_idx), ("validation", val_idx)):
        classes = {records[i].label for i in idx}
        if len(classes) < 2:
            raise ConfigError(
                f"{name} split holds {len(idx)} recordings with classes "
                f"{sorted(classes)}; need both classes present")
    return train_idx, val_idx


def _recording_score(head: ProbeHead, rec: TokenRecord, num_heads: int) -> float:
    """Mean of clip logits, then positive-class softmax probability."""
    acc = None
    for toks in rec.clips:
        with T.no_grad():
            logits, _ = probe_forward(toks, head, num_heads)
        acc = logits.data if acc is None else acc + logits.data
    mean_logits = acc / len(rec.clips)
    e = np.exp(mean_logits - mean_logits.max())
    return float((e / e.sum())[1])


def evaluate_probe(head: ProbeHead, records: list[TokenRecord],
                   num_heads: int = 1, seed: int | None = None) -> EvalReport:
    scores = [_recording_score(head, r, num_heads) for r in records]
    labels = [r.label for r in records]
    return compute_metrics(scores, labels, seed=seed)


def fit_probe_on_tokens(records: list[TokenRecord], dim: int,
                        cfg: ProbeConfig) -> tuple[ProbeHead, EvalReport]:
    """Train the head on cached tokens; evaluate on the held-out subjects."""
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_records(records, cfg.n_folds, cfg.val_fold)
    head = init_probe(rng, dim, num_queries=cfg.num_queries)
    opt = optim.AdamW(list(head.named_tensors()))

    flat = [(i, ci) for i in train_idx
            for ci in range(len(records[i].clips))]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(flat))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            loss = None
            for k in batch:
                i, ci = flat[k]
                logits, _ = probe_forward(records[i].clips[ci], head,
                                          cfg.num_heads)
                ce = cross_entropy(logits, records[i].label)
                loss = ce if loss is None else loss + ce
            loss = loss * (1.0 / len(batch))
            loss.backward()
            optim.clip_grad_norm(opt.grads(), 10.0)
            opt.step(cfg.lr)
            opt.zero_grad()

    report = evaluate_probe(head, [records[i] for i in val_idx],
                            cfg.num_heads, seed=cfg.seed)
    return head, report


def train_probe(model: JepaModel, dataset: ClipDataset,
                cfg: ProbeConfig) -> tuple[ProbeHead, EvalReport]:
    """Frozen evaluation: the encoder is read once and never modified."""
    records = extract_tokens(model, dataset)
    return fit_probe_on_tokens(records, model.config.embed_dim, cfg)


def _dataset_meta(dataset: ClipDataset) -> list[TokenRecord]:
    out = []
    for i in range(len(dataset)):
        rec = dataset.record_meta(i)
        out.append(TokenRecord(clips=[], label=label_to_index(rec.label),
                               subject=rec.subject or f"rec{i}",
                               rec_id=rec.rec_id))
    return out


def extract_tokens_for(model: JepaModel, dataset: ClipDataset,
                       indices) -> list[TokenRecord]:
    out = []
    for i in indices:
        rec = dataset.record_meta(i)
        clips = []
        for ci in range(dataset.num_clips):
            with T.no_grad():
                toks, _ = model.encode_full(dataset.clip(i, ci).data)
            clips.append(toks.data)
        out.append(TokenRecord(clips=clips, label=label_to_index(rec.label),
                               subject=rec.subject or f"rec{i}",
                               rec_id=rec.rec_id))
    return out


def finetune(model: JepaModel, dataset: ClipDataset,
             cfg: ProbeConfig) -> tuple[ProbeHead, EvalReport]:
    """Joint training: head at ``lr``, encoder at ``encoder_lr``."""
    rng = np.random.default_rng(cfg.seed)
    meta = _dataset_meta(dataset)
    train_idx, val_idx = split_records(meta, cfg.n_folds, cfg.val_fold)
    head = init_probe(rng, model.config.embed_dim,
                      num_queries=cfg.num_queries)
    head_opt = optim.AdamW(list(head.named_tensors()))
    enc_opt = optim.AdamW(list(model.trainable_tensors()))

    flat = [(i, ci) for i in train_idx for ci in range(dataset.num_clips)]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(flat))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            loss = None
            for k in batch:
                i, ci = flat[k]
                toks, _ = model.encode_full(dataset.clip(i, ci).data)
                ce = cross_entropy(probe_forward(toks, head,
                                                 cfg.num_heads)[0],
                                   meta[i].label)
                loss = ce if loss is None else loss + ce
            loss = loss * (1.0 / len(batch))
            loss.backward()
            optim.clip_grad_norm(head_opt.grads() + enc_opt.grads(), 10.0)
            head_opt.step(cfg.lr)
            enc_opt.step(cfg.encoder_lr)
            head_opt.zero_grad()
            enc_opt.zero_grad()

    val_records = extract_tokens_for(model, dataset, val_idx)
    report = evaluate_probe(head, val_records, cfg.num_heads, seed=cfg.seed)
    return head, report
