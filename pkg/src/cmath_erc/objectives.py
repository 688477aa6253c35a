"""Classifier heads and the loss terms combined into the training objective.

Batched inputs are (B, n, ...) with a (B, n) validity mask. Every ``*_per_conv``
function returns a (B,) tensor; the scalar versions average over conversations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

LOG_CLAMP = 1e-12
HEADS = ("t", "a", "v", "x")


@dataclass
class ClassifierParams:
    weight: Tensor
    bias: Tensor


def init_classifier(store: ParamStore, prefix: str, d: int, num_classes: int,
                    rng: np.random.Generator) -> ClassifierParams:
    return ClassifierParams(store.uniform(f"{prefix}.weight", (d, num_classes), d, rng),
                            store.zeros(f"{prefix}.bias", (num_classes,)))


def classify(h, params: ClassifierParams) -> Tensor:
    h = ad.as_tensor(h)
    if h.shape[-1] != params.weight.shape[0]:
        raise ValueError(f"feature dim {h.shape[-1]} does not match classifier input {params.weight.shape[0]}")
    return ad.softmax(h @ params.weight + params.bias, axis=-1)


def _batched(x: Tensor, mask, labels=None):
    x = ad.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    n = x.shape[1]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    if labels is not None:
        labels = np.asarray(labels).reshape(x.shape[0], n)
    return x, mask, labels, single


def _finish(per_conv: Tensor, single: bool) -> Tensor:
    return per_conv.reshape(()) if single else per_conv


def cross_entropy_per_conv(probs, labels, mask=None) -> Tensor:
    probs, mask, labels, single = _batched(probs, mask, labels)
    num_classes = probs.shape[-1]
    valid = mask & (labels >= 0) & (labels < num_classes)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cross_entropy: a conversation has no valid positions")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    b_idx, i_idx = np.nonzero(valid)
    onehot[b_idx, i_idx, labels[b_idx, i_idx]] = 1.0
    ll = (ad.log(ad.clamp_min(probs, LOG_CLAMP)) * onehot).sum(axis=(1, 2))
    return _finish(ll * (-1.0 / counts.astype(probs.dtype)), single)


def cross_entropy(probs, labels, mask=None) -> Tensor:
    return cross_entropy_per_conv(probs, labels, mask).mean()


def low_level_distill_per_conv(teacher, student, mask=None, reduction: str = "sum") -> Tensor:
    """Squared distance to a detached teacher over valid rows.

    ``reduction="sum"`` gives the squared Frobenius norm per conversation;
    ``"mean"`` divides it by the number of valid entries (rows x d).
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    teacher, student = ad.as_tensor(teacher), ad.as_tensor(student)
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch {teacher.shape} vs {student.shape}")
    student, mask, _, single = _batched(student, mask)
    target = teacher.data.reshape(student.shape)
    sq = (student - target) ** 2 * mask[..., None].astype(student.dtype)
    per_conv = sq.sum(axis=(1, 2))
    if reduction == "mean":
        per_conv = per_conv * (1.0 / (mask.sum(axis=1) * student.shape[-1])).astype(student.dtype)
    return _finish(per_conv, single)


def low_level_distill(teacher, student, mask=None, reduction: str = "sum") -> Tensor:
    return low_level_distill_per_conv(teacher, student, mask, reduction).mean()


def high_level_distill_per_conv(teacher_probs, student_probs, mask=None) -> Tensor:
    """Mean over valid rows of KL(teacher || student), teacher detached."""
    teacher_probs, student_probs = ad.as_tensor(teacher_probs), ad.as_tensor(student_probs)
    if teacher_probs.shape != student_probs.shape:
        raise ValueError(f"shape mismatch {teacher_probs.shape} vs {student_probs.shape}")
    student, mask, _, single = _batched(student_probs, mask)
    t = teacher_probs.data.reshape(student.shape)
    log_t = np.log(np.maximum(t, LOG_CLAMP))
    w = t * mask[..., None]
    kl = ((ad.log(ad.clamp_min(student, LOG_CLAMP)) * -1.0 + log_t) * w.astype(student.dtype)).sum(axis=(1, 2))
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("high_level_distill: a conversation has no valid positions")
    return _finish(kl * (1.0 / counts.astype(student.dtype)), single)


def high_level_distill(teacher_probs, student_probs, mask=None) -> Tensor:
    return high_level_distill_per_conv(teacher_probs, student_probs, mask).mean()


@dataclass
class LossParts:
    re: float
    ce_per_head: dict[str, float]
    mse_per_modality: dict[str, float]
    kl_per_modality: dict[str, float]
    total: float
    gammas: tuple[float, float]
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        g1, g2 = self.gammas
        return (sum(self.ce_per_head.values()) + self.re + g1 * sum(self.mse_per_modality.values())
                + g2 * sum(self.kl_per_modality.values()))

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "re": self.re,
            "ce": dict(self.ce_per_head),
            "mse": dict(self.mse_per_modality),
            "kl": dict(self.kl_per_modality),
        }


def total_loss(ce: dict[str, Tensor], re: Tensor | float, mse: dict[str, Tensor], kl: dict[str, Tensor],
               gamma1: float, gamma2: float) -> LossParts:
    """Cross-entropy over all heads + reconstruction + weighted distillation terms."""
    terms = {f"ce[{k}]": v for k, v in ce.items()}
    terms["re"] = re
    terms.update({f"mse[{k}]": v for k, v in mse.items()})
    terms.update({f"kl[{k}]": v for k, v in kl.items()})
    for name, v in terms.items():
        if not np.isfinite(float(ad.as_tensor(v).data)):
            raise FloatingPointError(f"non-finite loss term {name}")
    total = ad.as_tensor(re)
    for v in ce.values():
        total = total + v
    for v in mse.values():
        total = total + ad.as_tensor(v) * gamma1
    for v in kl.values():
        total = total + ad.as_tensor(v) * gamma2

    def f(v):
        return float(ad.as_tensor(v).data)

    return LossParts(
        re=f(re),
        ce_per_head={k: f(v) for k, v in ce.items()},
        mse_per_modality={k: f(v) for k, v in mse.items()},
        kl_per_modality={k: f(v) for k, v in kl.items()},
        total=f(total),
        gammas=(float(gamma1), float(gamma2)),
        total_tensor=total,
    )
