"""Finite-difference check of the whole model on a tiny synthetic batch."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradReport
from .data import SynthConfig, generate_synthetic, make_batches
from .model import CmathModel, DataShape, TrainConfig


def model_gradcheck(d: int = 8, n: int = 3, seed: int = 1, num_classes: int = 4, heads: int = 2,
                    eps: float = 1e-5, max_per_param: int | None = 24, training: bool = True,
                    mse_reduction: str = "sum", **overrides) -> GradReport:
    """Gradient-check the full objective (every term, gammas 1) at width ``d``.

    The check runs in float64. Reparameterization noise is replayed from a fixed
    seed on every evaluation, and the distillation teacher is pinned at the base
    point so that finite differences see the same stop-gradient targets as backprop.
    """
    ds = generate_synthetic(SynthConfig(num_conversations=1, min_len=n, max_len=n, num_classes=num_classes,
                                        dims=(5, 4, 3), seed=seed))
    cfg = TrainConfig(d=d, heads=heads, layers=1, gamma1=1.0, gamma2=1.0, seed=seed,
                      mse_reduction=mse_reduction, **overrides)
    model = CmathModel(cfg, DataShape.of(ds))
    batch = make_batches(ds, 1)[0]

    def run():
        return model.forward(batch, training=training, rng=np.random.default_rng([seed, 7]))

    saved = model.params.state()
    model.params.cast(np.float64)
    with ad.default_dtype(np.float64), ad.no_grad():
        out = run()
        teacher = (out.h_x.data.copy(), out.probs["x"].data.copy())
    model.params.load_state(saved)

    def loss_fn(_params):
        return model.loss(run(), batch, teacher).total_tensor

    return ad.grad_check(loss_fn, model.params, eps=eps, max_per_param=max_per_param, seed=seed)
