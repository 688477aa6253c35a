"""Per-modality convolutional compression, reconstruction, speaker and position signals."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


@dataclass
class ModalityCodec:
    """Encode/decode kernels for one modality (or a single affine map when ``decode`` is absent)."""

    enc_kernel: Tensor
    enc_bias: Tensor
    dec_kernel: Tensor | None = None
    dec_bias: Tensor | None = None

    @property
    def kernel_size(self) -> int:
        return self.enc_kernel.shape[0]


def init_codec(store: ParamStore, prefix: str, d_m: int, d: int, k: int, rng: np.random.Generator) -> ModalityCodec:
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    return ModalityCodec(
        store.uniform(f"{prefix}.enc_kernel", (k, d_m, d), k * d_m, rng),
        store.zeros(f"{prefix}.enc_bias", (d,)),
        store.uniform(f"{prefix}.dec_kernel", (k, d, d_m), k * d, rng),
        store.zeros(f"{prefix}.dec_bias", (d_m,)),
    )


def init_affine_codec(store: ParamStore, prefix: str, d_m: int, d: int, rng: np.random.Generator) -> ModalityCodec:
    """Fully-connected replacement used when modality reconstruction is ablated."""
    return ModalityCodec(
        store.uniform(f"{prefix}.fc_weight", (1, d_m, d), d_m, rng),
        store.zeros(f"{prefix}.fc_bias", (d,)),
    )


def conv_encode(u: Tensor, codec: ModalityCodec) -> Tensor:
    """(..., n, d_m) -> (..., n, d), sequence length preserved."""
    return ad.conv1d(u, codec.enc_kernel, codec.enc_bias)


def conv_decode(u_prime: Tensor, codec: ModalityCodec) -> Tensor:
    """(..., n, d) -> (..., n, d_m)."""
    if codec.dec_kernel is None:
        raise ValueError("affine codec has no decoder")
    return ad.conv1d(u_prime, codec.dec_kernel, codec.dec_bias)


def reconstruction_loss(u, u_second, mask=None) -> Tensor:
    """Squared Frobenius distance, summed per conversation.

    With a batch of shape (B, n, d_m) and mask (B, n) returns a (B,) tensor of
    per-conversation sums over valid rows; for a single (n, d_m) pair a scalar.
    """
    u, u_second = ad.as_tensor(u), ad.as_tensor(u_second)
    if u.shape != u_second.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {u_second.shape}")
    sq = (u - u_second) ** 2
    if mask is not None:
        sq = sq * np.asarray(mask, dtype=sq.dtype)[..., None]
    return sq.sum(axis=(-2, -1))


def speaker_embeddings(speaker_ids, table: Tensor) -> Tensor:
    """Select columns of the d x m_spk table; output (..., n, d)."""
    ids = np.asarray(speaker_ids, dtype=np.int64)
    m_spk = table.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= m_spk):
        raise IndexError(f"speaker id out of range [0, {m_spk})")
    return ad.transpose(table, (1, 0))[ids]


@lru_cache(maxsize=64)
def _positional_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    table.setflags(write=False)
    return table


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal encoding, position index starting at 0."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    return _positional_table(n, d).astype(ad.get_default_dtype())


def assemble_modality(u_prime, speakers, positions) -> Tensor:
    u_prime, speakers, positions = ad.as_tensor(u_prime), ad.as_tensor(speakers), ad.as_tensor(positions)
    if not (u_prime.shape == speakers.shape and positions.shape[-2:] == u_prime.shape[-2:]):
        raise ValueError(f"shape mismatch {u_prime.shape}, {speakers.shape}, {positions.shape}")
    return u_prime + speakers + positions
