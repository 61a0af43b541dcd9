"""Single-file model checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"PLBCKPT\\0"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length N
    20      N     UTF-8 JSON header
    20+N    ...   parameter blocks, float64 little-endian, row-major

The header holds ``config`` (flat experiment config), ``vocab`` (token list),
``progress`` (optimizer step, completed epochs, loss history) and ``blocks``:
an ordered list of ``{"name", "shape", "offset", "count"}`` where offset and
count are in float64 elements from the start of the data section. Model
parameters are named ``encoder.*``, ``pooling.*``, ``head.*``; Adam moments
are stored as ``adam.m.<param>`` and ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, from_flat
from .data import Vocab
from .model import Classifier, build_model
from .optim import AdamState
from .train import TrainResult

MAGIC = b"PLBCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    model: Classifier
    vocab: Vocab
    state: AdamState
    progress: dict = field(default_factory=dict)

    def to_result(self) -> TrainResult:
        return TrainResult(
            self.model,
            self.vocab,
            self.state,
            list(self.progress.get("epoch_losses", [])),
            list(self.progress.get("step_losses", [])),
            int(self.progress.get("completed_epochs", 0)),
        )


def save_checkpoint(path, config: ExperimentConfig, result: TrainResult) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in result.model.parameters().items()]
    for name in sorted(result.state.m):
        arrays.append((f"adam.m.{name}", result.state.m[name]))
        arrays.append((f"adam.v.{name}", result.state.v[name]))
    blocks, offset = [], 0
    for name, a in arrays:
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size
    header = {
        "config": config.to_flat(),
        "pooling_kind": result.model.kind,
        "vocab": result.vocab.tokens,
        "progress": {
            "adam_step": result.state.step,
            "completed_epochs": result.completed_epochs,
            "epoch_losses": result.epoch_losses,
            "step_losses": result.step_losses,
        },
        "blocks": blocks,
    }
    raw = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start : start + n].decode("utf-8"))
    data = np.frombuffer(blob, dtype="<f8", offset=start + n)

    config = from_flat(header["config"])
    model = build_model(config.encoder, header["pooling_kind"], config.train.attention_heads, config.train.seed)
    params = model.parameters()
    state = AdamState(step=int(header["progress"]["adam_step"]))
    for block in header["blocks"]:
        values = data[block["offset"] : block["offset"] + block["count"]].reshape(block["shape"])
        name = block["name"]
        if name.startswith("adam.m."):
            state.m[name[7:]] = values.astype(np.float64)
        elif name.startswith("adam.v."):
            state.v[name[7:]] = values.astype(np.float64)
        elif name in params:
            if params[name].shape != values.shape:
                raise CheckpointError(f"{path}: block {name} has shape {values.shape}, expected {params[name].shape}")
            params[name].data[...] = values
        else:
            raise CheckpointError(f"{path}: unexpected block {name}")
    return Checkpoint(config, model, Vocab(header["vocab"]), state, header["progress"])
