"""Variational fusion: per-modality Gaussians, averaged and sampled by reparameterization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

SIGMA_FLOOR = 1e-4


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class GaussianParams:
    mu: MLPParams
    sigma: MLPParams


@dataclass
class GaussianPair:
    mu: Tensor
    sigma: Tensor


def init_mlp(store: ParamStore, prefix: str, d: int, d_h: int, rng: np.random.Generator) -> MLPParams:
    return MLPParams(
        store.uniform(f"{prefix}.w1", (d, d_h), d, rng),
        store.zeros(f"{prefix}.b1", (d_h,)),
        store.uniform(f"{prefix}.w2", (d_h, d), d_h, rng),
        store.zeros(f"{prefix}.b2", (d,)),
    )


def init_gaussian(store: ParamStore, prefix: str, d: int, d_h: int, rng: np.random.Generator) -> GaussianParams:
    return GaussianParams(init_mlp(store, f"{prefix}.mu", d, d_h, rng), init_mlp(store, f"{prefix}.sigma", d, d_h, rng))


def modality_gaussian(h: Tensor, params: GaussianParams) -> GaussianPair:
    h = ad.as_tensor(h)
    if h.shape[-1] != params.mu.w1.shape[0]:
        raise ValueError(f"input dim {h.shape[-1]} does not match MLP input {params.mu.w1.shape[0]}")
    return GaussianPair(params.mu(h), ad.softplus(params.sigma(h)) + SIGMA_FLOOR)


def mix_gaussians(pairs: list[GaussianPair]) -> GaussianPair:
    """Plain average of means and of standard deviations."""
    if not pairs:
        raise ValueError("mix_gaussians needs at least one Gaussian")
    shape = pairs[0].mu.shape
    if any(p.mu.shape != shape or p.sigma.shape != shape for p in pairs):
        raise ValueError("Gaussian shapes differ")
    scale = 1.0 / len(pairs)
    mu, sigma = pairs[0].mu, pairs[0].sigma
    for p in pairs[1:]:
        mu = mu + p.mu
        sigma = sigma + p.sigma
    if len(pairs) == 1:
        return GaussianPair(mu, sigma)
    return GaussianPair(mu * scale, sigma * scale)


def reparameterize(pair: GaussianPair, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """``mu + eps * sigma`` with standard-normal eps in training; ``mu`` at evaluation."""
    if not training:
        return pair.mu
    if rng is None:
        raise ValueError("training-mode sampling needs an rng")
    eps = rng.standard_normal(pair.mu.shape).astype(pair.mu.dtype)
    return pair.mu + pair.sigma * eps
