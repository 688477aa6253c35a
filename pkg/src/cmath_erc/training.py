"""Training loop, evaluation, ablation runner and embedding export."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParamStore
from .checkpoint import Checkpoint
from .data import Dataset, make_batches
from .metrics import Metrics, compute_metrics
from .model import CmathModel, DataShape, TrainConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint | None, history: list[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


class Adam:
    """Adaptive-moment optimizer with optional global-norm gradient clipping."""

    def __init__(self, params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                                 for t in self.params._params.values() if t.grad is not None)))

    def step(self) -> float:
        norm = self.global_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = (t.grad * scale).astype(np.float32)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)
        return norm


def _snapshot(model: CmathModel, opt: Adam, epoch: int, rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        copy.deepcopy(model.cfg),
        model.shape,
        model.params.state(),
        OrderedDict((k, v.copy()) for k, v in opt.m.items()),
        OrderedDict((k, v.copy()) for k, v in opt.v.items()),
        opt.step_count,
        epoch,
        rng.bit_generator.state,
    )


def evaluate_model(model: CmathModel, ds: Dataset, head: str | None = None,
                   batch_size: int | None = None) -> Metrics:
    model.check_compatible(ds)
    y_true, y_pred = [], []
    for batch in make_batches(ds, batch_size or model.cfg.batch_size):
        pred, _ = model.predict(batch, head)
        valid = batch.mask & (batch.labels < ds.num_classes)
        y_true.append(batch.labels[valid])
        y_pred.append(pred[valid])
    return compute_metrics(np.concatenate(y_true), np.concatenate(y_pred), ds.num_classes)


def evaluate(ckpt: Checkpoint, ds: Dataset, head: str | None = None) -> Metrics:
    return evaluate_model(ckpt.build_model(), ds, head)


def train(train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train with Adam; return the checkpoint with the best validation weighted F1."""
    shape = DataShape.of(train_ds)
    if val_ds is not None and (val_ds.num_classes != shape.num_classes
                               or tuple(val_ds.modality_dims) != shape.modality_dims):
        raise ValueError("train and validation datasets disagree on classes or modality dims")
    model = CmathModel(cfg, shape)
    opt = Adam(model.params, cfg.lr, clip_norm=cfg.clip_norm)
    sample_rng = np.random.default_rng([cfg.seed, 2])
    history: list[dict] = []
    best: Checkpoint | None = None
    best_score = -np.inf
    last_good = _snapshot(model, opt, 0, sample_rng)
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        batches = make_batches(train_ds, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)
        for batch in batches:
            model.params.zero_grad()
            # one generator drives both dropout and reparameterization noise
            out = model.forward(batch, training=True, rng=sample_rng)
            try:
                parts = model.loss(out, batch)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, history) from exc
            parts.total_tensor.backward()
            grad_norm = opt.step()
            if not np.isfinite(grad_norm):
                raise TrainingDiverged(f"epoch {epoch}: non-finite gradient", last_good, history)
            for key, val in _flatten_parts(parts).items():
                sums[key] = sums.get(key, 0.0) + val
        record = {"epoch": epoch, "train_loss": {k: v / len(batches) for k, v in sums.items()}}
        if val_ds is not None:
            m = evaluate_model(model, val_ds)
            record["val_accuracy"] = m.accuracy
            record["val_weighted_f1"] = m.weighted_f1
            score = m.weighted_f1
        else:
            score = -record["train_loss"]["total"]
        history.append(record)
        last_good = _snapshot(model, opt, epoch, sample_rng)
        if score > best_score:
            best_score = score
            best = last_good
        log.info("epoch %d loss %.4f score %.4f", epoch, record["train_loss"]["total"], score)
        if on_epoch is not None:
            on_epoch(record)
    return best, history


def _flatten_parts(parts) -> dict[str, float]:
    flat = {"total": parts.total, "re": parts.re}
    flat.update({f"ce_{k}": v for k, v in parts.ce_per_head.items()})
    flat.update({f"mse_{k}": v for k, v in parts.mse_per_modality.items()})
    flat.update({f"kl_{k}": v for k, v in parts.kl_per_modality.items()})
    return flat


# -- ablations ----------------------------------------------------------------------
VARIANTS: dict[str, dict] = {
    "full": {},
    "w/o MR": {"without_mr": True},
    "w/o CMA-T": {"without_cma": True},
    "w/o LLD": {"without_lld": True},
    "w/o HLD": {"without_hld": True},
    "w/o HD": {"without_lld": True, "without_hld": True},
    "Text": {"modalities": "t"},
    "Audio": {"modalities": "a"},
    "Visual": {"modalities": "v"},
    "Text+Audio": {"modalities": "ta"},
    "Text+Visual": {"modalities": "tv"},
    "Audio+Visual": {"modalities": "av"},
}


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name in VARIANTS:
        delta = VARIANTS[name]
    elif name and set(name) <= set("tav"):
        delta = {"modalities": name}
    else:
        raise ValueError(f"unknown variant {name!r}")
    delta = dict(delta)
    if "modalities" in delta and base.eval_head not in "x" + delta["modalities"]:
        delta["eval_head"] = "x"  # the configured head is dropped by this subset
    return dataclasses.replace(base, **delta)


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        for name in dict.fromkeys(r["variant"] for r in self.rows):
            accs = np.array([r["accuracy"] for r in self.rows if r["variant"] == name])
            wf1 = np.array([r["weighted_f1"] for r in self.rows if r["variant"] == name])
            out.append({
                "variant": name,
                "runs": int(len(accs)),
                "accuracy_mean": float(accs.mean()),
                "accuracy_std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
                "weighted_f1_mean": float(wf1.mean()),
                "weighted_f1_std": float(wf1.std(ddof=1)) if len(wf1) > 1 else 0.0,
            })
        return out

    def to_json(self) -> str:
        return json.dumps({"runs": self.rows, "summary": self.summary()}, indent=2)

    def to_csv(self) -> str:
        lines = ["variant,runs,accuracy_mean,accuracy_std,weighted_f1_mean,weighted_f1_std"]
        for s in self.summary():
            lines.append(f"{s['variant']},{s['runs']},{s['accuracy_mean']:.6f},{s['accuracy_std']:.6f},"
                         f"{s['weighted_f1_mean']:.6f},{s['weighted_f1_std']:.6f}")
        return "\n".join(lines) + "\n"


def ablate(train_ds: Dataset, val_ds: Dataset | None, test_ds: Dataset, base_cfg: TrainConfig,
           variants: Sequence[str], seeds: Sequence[int] | None = None) -> AblationReport:
    """Train each variant under each seed and score it on ``test_ds``."""
    cfgs = [(name, variant_config(base_cfg, name)) for name in variants]
    report = AblationReport()
    for name, cfg in cfgs:
        for seed in seeds or [base_cfg.seed]:
            run_cfg = dataclasses.replace(cfg, seed=seed)
            ckpt, _ = train(train_ds, val_ds, run_cfg)
            m = evaluate(ckpt, test_ds)
            report.rows.append({"variant": name, "seed": seed, "accuracy": m.accuracy,
                                "weighted_f1": m.weighted_f1, "per_class_f1": m.per_class_f1.tolist()})
            log.info("%s seed %d: acc %.4f wf1 %.4f", name, seed, m.accuracy, m.weighted_f1)
    return report


# -- embeddings ---------------------------------------------------------------------
def export_embeddings(ckpt: Checkpoint, ds: Dataset, path: str | Path) -> int:
    """Write one JSON record per utterance with its fused representation; returns the count."""
    model = ckpt.build_model()
    model.check_compatible(ds)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for batch in make_batches(ds, model.cfg.batch_size):
            pred, out = model.predict(batch)
            for b, cid in enumerate(batch.ids):
                for i in range(int(batch.lengths[b])):
                    label = int(batch.labels[b, i])
                    rec = {
                        "conversation_id": cid,
                        "index": i,
                        "label": label if label < ds.num_classes else None,
                        "predicted": int(pred[b, i]),
                        "embedding": out.h_x.data[b, i].astype(np.float32).tolist(),
                    }
                    fh.write(json.dumps(rec) + "\n")
                    count += 1
    return count
