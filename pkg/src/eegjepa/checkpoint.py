"""Binary checkpoint container.

Layout: magic, 8-byte little-endian header length, a JSON header (sorted
keys: model config, step/epoch counters, optimizer step, RNG state, and the
tensor directory), then the raw parameter payloads in directory order.
Writing the same state twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .jepa import JepaConfig, JepaModel
from .optim import AdamW

MAGIC = b"EJCK1\n"


@dataclass
class Checkpoint:
    config: dict
    arrays: dict
    step: int = 0
    epoch: int = 0
    optimizer_step: int | None = None
    rng_state: dict | None = None


def _named_arrays(model: JepaModel, optimizer: AdamW | None):
    for name, t in model.all_named_tensors():
        yield name, t.data
    if optimizer is not None:
        yield from optimizer.state_arrays()


def save_checkpoint(path, model: JepaModel, optimizer: AdamW | None = None,
                    step: int = 0, epoch: int = 0,
                    rng: np.random.Generator | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in _named_arrays(model, optimizer):
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str})
        payloads.append(arr.tobytes())
    header = {
        "config": model.config.to_dict(),
        "step": step,
        "epoch": epoch,
        "optimizer_step": None if optimizer is None else optimizer.step_count,
        "rng_state": None if rng is None else rng.bit_generator.state,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file", offset=0)
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: bad header: {e}", offset=pos) from None
    pos += hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(data):
            raise ParseError(f"{path}: truncated payload for "
                             f"{entry['name']!r}", offset=len(data))
        arrays[entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes",
                         offset=pos)
    return Checkpoint(config=header["config"], arrays=arrays,
                      step=header["step"], epoch=header["epoch"],
                      optimizer_step=header.get("optimizer_step"),
                      rng_state=header.get("rng_state"))


def restore_model(ck: Checkpoint) -> JepaModel:
    config = JepaConfig.from_dict(ck.config)
    model = JepaModel(config, np.random.default_rng(0))
    for name, t in model.all_named_tensors():
        if name not in ck.arrays:
            raise ParseError(f"checkpoint is missing tensor {name!r}")
        t.data[...] = ck.arrays[name].reshape(t.data.shape)
    return model


def restore_optimizer(ck: Checkpoint, model: JepaModel) -> AdamW:
    opt = AdamW(list(model.trainable_tensors()))
    if ck.optimizer_step is not None:
        opt.load_state(ck.optimizer_step, ck.arrays)
    return opt


def restore_rng(ck: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng(0)
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    return rng
