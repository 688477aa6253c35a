"""Conversation feature files, synthetic generation and padded batching."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MODALITIES = ("t", "a", "v")
FORMAT_VERSION = 1

IEMOCAP_CLASSES = ["Happy", "Sad", "Neutral", "Angry", "Excited", "Frustrated"]
MELD_CLASSES = ["Neutral", "Surprise", "Fear", "Sadness", "Joy", "Disgust", "Angry"]


class DataFormatError(ValueError):
    pass


@dataclass(eq=False)
class Conversation:
    id: str
    speakers: np.ndarray
    labels: np.ndarray | None
    feat_t: np.ndarray
    feat_a: np.ndarray
    feat_v: np.ndarray

    def __len__(self) -> int:
        return int(self.speakers.shape[0])

    def features(self, m: str) -> np.ndarray:
        return getattr(self, f"feat_{m}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        if self.id != other.id or not np.array_equal(self.speakers, other.speakers):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return all(np.array_equal(self.features(m), other.features(m)) for m in MODALITIES)


@dataclass(eq=False)
class Dataset:
    conversations: list[Conversation]
    class_names: list[str]
    modality_dims: tuple[int, int, int]
    num_speakers: int
    split: str = "train"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def __len__(self) -> int:
        return len(self.conversations)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and tuple(self.modality_dims) == tuple(other.modality_dims)
            and self.num_speakers == other.num_speakers
            and self.conversations == other.conversations
        )

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataFormatError("need at least two classes")
        if self.num_speakers < 1:
            raise DataFormatError("need at least one speaker")
        for conv in self.conversations:
            _validate_conversation(conv, self.modality_dims, self.num_classes, self.num_speakers)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset(
            [self.conversations[i] for i in indices],
            list(self.class_names),
            tuple(self.modality_dims),
            self.num_speakers,
            split or self.split,
        )


def _validate_conversation(conv: Conversation, dims, num_classes: int, num_speakers: int) -> None:
    n = len(conv)
    if n < 1:
        raise DataFormatError(f"conversation {conv.id!r} is empty")
    for m, d in zip(MODALITIES, dims):
        f = conv.features(m)
        if f is None:
            raise DataFormatError(f"modality missing: {m} in conversation {conv.id!r}")
        if f.ndim != 2 or f.shape[0] != n:
            raise DataFormatError(f"ragged conversation {conv.id!r}: modality {m} has shape {f.shape}, expected {n} rows")
        if f.shape[1] != d:
            raise DataFormatError(f"conversation {conv.id!r}: modality {m} has dim {f.shape[1]}, header says {d}")
        if not np.all(np.isfinite(f)):
            raise DataFormatError(f"conversation {conv.id!r}: non-finite value in modality {m}")
    if conv.labels is not None:
        if conv.labels.shape != (n,):
            raise DataFormatError(f"ragged conversation {conv.id!r}: {conv.labels.shape[0]} labels for {n} utterances")
        if np.any(conv.labels < 0) or np.any(conv.labels >= num_classes):
            raise DataFormatError(f"bad label in conversation {conv.id!r}")
    if np.any(conv.speakers < 0) or np.any(conv.speakers >= num_speakers):
        raise DataFormatError(f"bad speaker index in conversation {conv.id!r}")


# -- file format ----------------------------------------------------------------
def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` as JSON lines: a header record then one record per conversation."""
    header = {
        "format_version": FORMAT_VERSION,
        "class_names": list(ds.class_names),
        "modality_dims": [int(d) for d in ds.modality_dims],
        "num_speakers": int(ds.num_speakers),
        "split": ds.split,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for conv in ds.conversations:
            rec = {
                "id": conv.id,
                "speakers": conv.speakers.astype(int).tolist(),
                "labels": None if conv.labels is None else conv.labels.astype(int).tolist(),
            }
            for m in MODALITIES:
                # float32 -> python float is exact, so the text round-trips bit for bit
                rec[f"feat_{m}"] = conv.features(m).astype(np.float32).tolist()
            fh.write(json.dumps(rec) + "\n")


def _matrix(rec: dict, key: str, conv_id: str) -> np.ndarray:
    if key not in rec or rec[key] is None:
        raise DataFormatError(f"modality missing: {key} in conversation {conv_id!r}")
    rows = rec[key]
    lengths = {len(r) for r in rows} if rows else {0}
    if len(lengths) != 1:
        raise DataFormatError(f"ragged conversation {conv_id!r}: rows of {key} differ in length")
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), lengths.pop())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DataFormatError("empty file")
    header = json.loads(lines[0])
    for key in ("format_version", "class_names", "modality_dims", "num_speakers"):
        if key not in header:
            raise DataFormatError(f"header missing {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format_version {header['format_version']}")
    dims = tuple(int(d) for d in header["modality_dims"])
    if len(dims) != 3:
        raise DataFormatError("modality_dims must list three dimensions")
    convs = []
    for line in lines[1:]:
        rec = json.loads(line)
        cid = str(rec.get("id"))
        labels = rec.get("labels")
        conv = Conversation(
            id=cid,
            speakers=np.asarray(rec["speakers"], dtype=np.int64),
            labels=None if labels is None else np.asarray(labels, dtype=np.int64),
            feat_t=_matrix(rec, "feat_t", cid),
            feat_a=_matrix(rec, "feat_a", cid),
            feat_v=_matrix(rec, "feat_v", cid),
        )
        convs.append(conv)
    ds = Dataset(convs, list(header["class_names"]), dims, int(header["num_speakers"]), header.get("split", "train"))
    ds.validate()
    return ds


# -- synthetic data -----------------------------------------------------------------
@dataclass
class SynthConfig:
    num_conversations: int = 20
    min_len: int = 40
    max_len: int = 60
    num_classes: int = 6
    num_speakers: int = 2
    dims: tuple[int, int, int] = (32, 24, 16)
    informativeness: tuple[float, float, float] = (1.0, 0.6, 0.3)
    cross_modal_only: float = 0.0
    noise: float = 0.1
    seed: int = 0
    latent_dim: int = 8
    mask_scale: float = 3.0
    split: str = "train"
    class_names: list[str] | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.informativeness = tuple(float(w) for w in self.informativeness)
        if self.num_conversations < 1:
            raise ValueError("num_conversations must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.num_classes < 2 or self.num_speakers < 1:
            raise ValueError("need num_classes >= 2 and num_speakers >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        if len(self.informativeness) != 3 or not all(0.0 <= w <= 1.0 for w in self.informativeness):
            raise ValueError("informativeness weights must lie in [0, 1]")
        if not 0.0 <= self.cross_modal_only <= 1.0:
            raise ValueError("cross_modal_only must lie in [0, 1]")
        if self.noise < 0 or self.mask_scale < 0 or self.latent_dim < 1:
            raise ValueError("noise, mask_scale must be >= 0 and latent_dim >= 1")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")


def synth_preset(name: str, **overrides) -> SynthConfig:
    """Shape presets mirroring the two benchmark corpora."""
    if name == "iemocap-like":
        base = dict(dims=(1024, 1582, 342), num_classes=6, num_speakers=2, min_len=40, max_len=60,
                    class_names=list(IEMOCAP_CLASSES))
    elif name == "meld-like":
        base = dict(dims=(1024, 300, 342), num_classes=7, num_speakers=9, min_len=5, max_len=14,
                    class_names=list(MELD_CLASSES))
    else:
        raise ValueError(f"unknown preset {name!r}")
    base.update(overrides)
    return SynthConfig(**base)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Sample a dataset whose labels are planted in the modality features.

    The latent structure (class codes, per-modality projections) depends only on
    ``cfg.seed``; utterance draws also depend on ``cfg.split``, so train/val/test
    splits generated with one seed share a task.

    An utterance is either *cross-modal* (probability ``cross_modal_only``): each
    modality gets ``code/3 + r_m`` with the masks ``r_m`` summing to zero, so only
    the sum over modalities reveals the class; or *direct*: modality m gets
    ``w_m * code``. Features are the latent projected to ``d_m`` plus Gaussian noise.
    """
    k = cfg.latent_dim
    structure = np.random.default_rng([cfg.seed, 0])
    codes = structure.standard_normal((cfg.num_classes, k))
    proj = [structure.standard_normal((k, d)) / np.sqrt(k) for d in cfg.dims]

    rng = np.random.default_rng([cfg.seed, 1, zlib.crc32(cfg.split.encode())])
    convs = []
    for ci in range(cfg.num_conversations):
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        labels = rng.integers(0, cfg.num_classes, size=n)
        speakers = rng.integers(0, cfg.num_speakers, size=n)
        cross = rng.random(n) < cfg.cross_modal_only
        masks = rng.standard_normal((3, n, k)) * cfg.mask_scale
        masks -= masks.mean(axis=0, keepdims=True)
        feats = []
        for mi, d in enumerate(cfg.dims):
            direct = cfg.informativeness[mi] * codes[labels]
            mixed = codes[labels] / 3.0 + masks[mi]
            latent = np.where(cross[:, None], mixed, direct)
            f = latent @ proj[mi] + cfg.noise * rng.standard_normal((n, d))
            feats.append(f.astype(np.float32))
        convs.append(Conversation(f"{cfg.split}_{ci:04d}", speakers.astype(np.int64), labels.astype(np.int64), *feats))
    names = cfg.class_names or [f"class_{c}" for c in range(cfg.num_classes)]
    ds = Dataset(convs, list(names), cfg.dims, cfg.num_speakers, cfg.split)
    ds.validate()
    return ds


def linear_probe_accuracy(x_train: np.ndarray, y_train: np.ndarray, num_classes: int,
                          x_eval: np.ndarray | None = None, y_eval: np.ndarray | None = None) -> float:
    """Least-squares one-hot regression with bias; returns argmax accuracy."""
    xb = np.hstack([x_train.astype(np.float64), np.ones((len(x_train), 1))])
    w, *_ = np.linalg.lstsq(xb, np.eye(num_classes)[y_train], rcond=None)
    if x_eval is None:
        x_eval, y_eval = x_train, y_train
    xe = np.hstack([x_eval.astype(np.float64), np.ones((len(x_eval), 1))])
    return float(np.mean(np.argmax(xe @ w, axis=1) == y_eval))


def stacked_features(ds: Dataset, modalities: str = "tav") -> tuple[np.ndarray, np.ndarray]:
    x = np.vstack([np.hstack([c.features(m) for m in modalities]) for c in ds.conversations])
    y = np.concatenate([c.labels for c in ds.conversations])
    return x, y


# -- batching ---------------------------------------------------------------------
@dataclass
class Batch:
    ids: list[str]
    feats: dict[str, np.ndarray]
    speakers: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def n_max(self) -> int:
        return int(self.mask.shape[1])


def pad_batch(convs: Sequence[Conversation], num_classes: int) -> Batch:
    """Pad conversations to the longest one; padded labels use the sentinel ``num_classes``."""
    lengths = np.array([len(c) for c in convs], dtype=np.int64)
    b, n_max = len(convs), int(lengths.max())
    mask = np.arange(n_max)[None, :] < lengths[:, None]
    speakers = np.zeros((b, n_max), dtype=np.int64)
    labels = np.full((b, n_max), num_classes, dtype=np.int64)
    feats = {}
    for m in MODALITIES:
        d = convs[0].features(m).shape[1]
        arr = np.zeros((b, n_max, d), dtype=np.float32)
        for i, c in enumerate(convs):
            arr[i, : len(c)] = c.features(m)
        feats[m] = arr
    for i, c in enumerate(convs):
        speakers[i, : len(c)] = c.speakers
        if c.labels is not None:
            labels[i, : len(c)] = c.labels
    return Batch([c.id for c in convs], feats, speakers, labels, mask, lengths)


def make_batches(ds: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    return [
        pad_batch([ds.conversations[i] for i in order[s : s + batch_size]], ds.num_classes)
        for s in range(0, len(ds), batch_size)
    ]
