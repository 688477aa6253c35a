"""Single-file checkpoint container.

Layout: ``MAGIC`` | uint32 little-endian header length | UTF-8 JSON header |
little-endian float32 payload. The header lists every stored tensor (section,
name, shape) in payload order, plus the config, its digest, the data shape,
epoch counter, optimizer step and the sampling rng state.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CmathModel, DataShape, TrainConfig

MAGIC = b"CMATHCKP"
FORMAT_VERSION = 1
SECTIONS = ("param", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


def config_digest(cfg: TrainConfig, shape: DataShape) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "shape": _shape_dict(shape)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _shape_dict(shape: DataShape) -> dict:
    return {"num_classes": shape.num_classes, "num_speakers": shape.num_speakers,
            "modality_dims": list(shape.modality_dims)}


@dataclass
class Checkpoint:
    config: TrainConfig
    shape: DataShape
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None

    def build_model(self) -> CmathModel:
        model = CmathModel(self.config, self.shape)
        model.params.load_state(self.params)
        return model


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks = [], []
    for section, table in zip(SECTIONS, (ckpt.params, ckpt.adam_m, ckpt.adam_v)):
        for name, arr in table.items():
            index.append({"section": section, "name": name, "shape": list(arr.shape)})
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "config_digest": config_digest(ckpt.config, ckpt.shape),
        "data_shape": _shape_dict(ckpt.shape),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC) + 4
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    try:
        cfg = TrainConfig.from_dict(header["config"])
        ds = header["data_shape"]
        shape = DataShape(ds["num_classes"], ds["num_speakers"], tuple(ds["modality_dims"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc
    if config_digest(cfg, shape) != header["config_digest"]:
        raise CheckpointError("config digest mismatch")
    tables = {s: OrderedDict() for s in SECTIONS}
    offset = start + hlen
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 4 * count > len(blob):
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        tables[entry["section"]][entry["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError("trailing or missing payload bytes")
    return Checkpoint(cfg, shape, tables["param"], tables["adam_m"], tables["adam_v"],
                      header["step"], header["epoch"], header["rng_state"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
