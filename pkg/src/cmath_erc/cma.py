"""Asymmetric cross-modality augmented transformer block.

One block enhances a central modality: each auxiliary modality feeds a
cross-attention branch, the central modality feeds a self-attention branch whose
pre-residual output is augmented by the pre-residual cross outputs, and a
position-wise softmax gate mixes the resulting streams.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int = 4
    dropout: float = 0.0

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass
class CmaBlockParams:
    cross: list[AttentionParams]
    self_attn: AttentionParams
    gate_w: Tensor | None = None
    gate_b: Tensor | None = None


@dataclass
class CmaOutputs:
    tilde_aux: list[Tensor]
    stream_aux: list[Tensor]
    stream_self: Tensor
    fused: Tensor
    gate: np.ndarray | None = None
    attention: dict = field(default_factory=dict)


def init_attention(store: ParamStore, prefix: str, d: int, heads: int, d_ff: int,
                   rng: np.random.Generator, dropout: float = 0.0) -> AttentionParams:
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    u, z, o = store.uniform, store.zeros, store.ones
    return AttentionParams(
        u(f"{prefix}.wq", (d, d), d, rng), z(f"{prefix}.bq", (d,)),
        u(f"{prefix}.wk", (d, d), d, rng), z(f"{prefix}.bk", (d,)),
        u(f"{prefix}.wv", (d, d), d, rng), z(f"{prefix}.bv", (d,)),
        u(f"{prefix}.wo", (d, d), d, rng), z(f"{prefix}.bo", (d,)),
        o(f"{prefix}.ln1_gain", (d,)), z(f"{prefix}.ln1_bias", (d,)),
        u(f"{prefix}.ff_w1", (d, d_ff), d, rng), z(f"{prefix}.ff_b1", (d_ff,)),
        u(f"{prefix}.ff_w2", (d_ff, d), d_ff, rng), z(f"{prefix}.ff_b2", (d,)),
        o(f"{prefix}.ln2_gain", (d,)), z(f"{prefix}.ln2_bias", (d,)),
        heads=heads, dropout=dropout,
    )


def init_block(store: ParamStore, prefix: str, num_aux: int, d: int, heads: int, d_ff: int,
               rng: np.random.Generator, dropout: float = 0.0) -> CmaBlockParams:
    cross = [init_attention(store, f"{prefix}.cross{i}", d, heads, d_ff, rng, dropout) for i in range(num_aux)]
    self_attn = init_attention(store, f"{prefix}.self", d, heads, d_ff, rng, dropout)
    block = CmaBlockParams(cross, self_attn)
    if num_aux:
        k = num_aux + 1
        block.gate_w = store.uniform(f"{prefix}.gate_w", (k * d, k), k * d, rng)
        block.gate_b = store.zeros(f"{prefix}.gate_b", (k,))
    return block


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    return x, False


def _mask_batch(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return mask[None] if mask.ndim == 1 else mask


def multi_head_attention(query_in: Tensor, kv_in: Tensor, p: AttentionParams, mask=None,
                         rng=None, training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with masked keys; returns (output, weights)."""
    query_in, kv_in = ad.as_tensor(query_in), ad.as_tensor(kv_in)
    if query_in.shape[-1] != kv_in.shape[-1] or query_in.shape[:-2] != kv_in.shape[:-2]:
        raise ValueError(f"shape mismatch {query_in.shape} vs {kv_in.shape}")
    q_in, squeeze = _as_batch(query_in)
    k_in, _ = _as_batch(kv_in)
    b, n, d = q_in.shape
    h = p.heads
    dh = d // h
    key_mask = _mask_batch(mask, k_in.shape)

    def split(x):
        return x.reshape(b, -1, h, dh).transpose(0, 2, 1, 3)

    q = split(q_in @ p.wq + p.bq)
    k = split(k_in @ p.wk + p.bk)
    v = split(k_in @ p.wv + p.bv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = ad.masked_softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = (ad.dropout(weights, p.dropout, rng, training) @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = ctx @ p.wo + p.bo
    if squeeze:
        return out.reshape(n, d), weights.data[0]
    return out, weights.data


def feed_forward(x: Tensor, p: AttentionParams) -> Tensor:
    return ad.relu(x @ p.ff_w1 + p.ff_b1) @ p.ff_w2 + p.ff_b2


def _post_norm_tail(tilde: Tensor, h_c: Tensor, p: AttentionParams, rng, training: bool) -> Tensor:
    bar = ad.layer_norm(ad.dropout(tilde, p.dropout, rng, training) + h_c, p.ln1_gain, p.ln1_bias)
    ff = ad.dropout(feed_forward(bar, p), p.dropout, rng, training)
    return ad.layer_norm(ff + bar, p.ln2_gain, p.ln2_bias)


def cross_attend(h_c, h_aux, p: AttentionParams, mask=None, rng=None,
                 training: bool = False) -> tuple[Tensor, Tensor]:
    """Return (pre-residual attention output, post-norm stream) for one auxiliary branch."""
    h_c = ad.as_tensor(h_c)
    tilde, _ = multi_head_attention(h_c, h_aux, p, mask, rng, training)
    return tilde, _post_norm_tail(tilde, h_c, p, rng, training)


def central_self(h_c, tilde_aux, p: AttentionParams, mask=None, rng=None, training: bool = False) -> Tensor:
    """Self-attention branch whose pre-residual output is summed with the cross outputs."""
    h_c = ad.as_tensor(h_c)
    tilde, _ = multi_head_attention(h_c, h_c, p, mask, rng, training)
    for t in tilde_aux:
        tilde = tilde + t
    return _post_norm_tail(tilde, h_c, p, rng, training)


def gate_fuse(streams: list, gate_w: Tensor | None, gate_b: Tensor | None) -> tuple[Tensor, np.ndarray]:
    """Convex per-position mix of the streams (self stream first); returns (output, weights)."""
    streams = [ad.as_tensor(s) for s in streams]
    if any(s.shape != streams[0].shape for s in streams):
        raise ValueError("gate streams must share a shape")
    if len(streams) == 1:
        return streams[0], np.ones(streams[0].shape[:-1] + (1,), dtype=streams[0].dtype)
    k = len(streams)
    if gate_w.shape != (k * streams[0].shape[-1], k) or gate_b.shape != (k,):
        raise ValueError(f"gate parameters do not match {k} streams")
    g = ad.softmax(ad.concat(streams, axis=-1) @ gate_w + gate_b, axis=-1)
    out = None
    for i, s in enumerate(streams):
        term = g[..., i : i + 1] * s
        out = term if out is None else out + term
    return out, g.data


def cma_layer(h_c, h_aux: list, block: CmaBlockParams, mask=None, rng=None,
              training: bool = False) -> CmaOutputs:
    tildes, streams = [], []
    for aux, p in zip(h_aux, block.cross):
        tilde, stream = cross_attend(h_c, aux, p, mask, rng, training)
        tildes.append(tilde)
        streams.append(stream)
    stream_self = central_self(h_c, tildes, block.self_attn, mask, rng, training)
    fused, gate = gate_fuse([stream_self] + streams, block.gate_w, block.gate_b)
    return CmaOutputs(tildes, streams, stream_self, fused, gate)


def cma_forward(h_c, h_aux: list, blocks: list[CmaBlockParams], mask=None, rng=None,
                training: bool = False) -> Tensor:
    """Stack of blocks on the central stream; every layer re-attends to the original auxiliaries."""
    if len(h_aux) > 2:
        raise ValueError("at most two auxiliary modalities")
    out = ad.as_tensor(h_c)
    for block in blocks:
        if len(block.cross) != len(h_aux):
            raise ValueError("block was built for a different number of auxiliary modalities")
        out = cma_layer(out, h_aux, block, mask, rng, training).fused
    return out
