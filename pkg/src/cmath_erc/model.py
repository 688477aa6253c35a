"""Full model: encoders -> CMA blocks -> variational fusion -> four classifier heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cma, encoder, fusion, objectives
from .autodiff import ParamStore, Tensor
from .data import MODALITIES, Batch, Dataset
from .objectives import LossParts


@dataclass
class TrainConfig:
    d: int = 64
    kernel_sizes: tuple[int, int, int] = (1, 1, 1)
    heads: int = 4
    layers: int = 1
    d_ff: int | None = None
    d_h: int | None = None
    dropout: float = 0.0
    lr: float = 3.0e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    gamma1: float = 1.0
    gamma2: float = 1.8
    clip_norm: float | None = 5.0
    without_mr: bool = False
    without_cma: bool = False
    without_lld: bool = False
    without_hld: bool = False
    mse_reduction: str = "mean"
    modalities: str = "tav"
    eval_head: str = "x"

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.modalities = "".join(m for m in MODALITIES if m in self.modalities)
        if not self.modalities:
            raise ValueError("modality subset must be non-empty")
        if len(self.kernel_sizes) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel_sizes must be three positive odd integers")
        for name in ("d", "heads", "layers", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d % 2:
            raise ValueError("d must be even (sinusoidal positions)")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.lr <= 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("lr must be positive and gammas non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mse_reduction not in ("sum", "mean"):
            raise ValueError("mse_reduction must be 'sum' or 'mean'")
        if self.eval_head not in objectives.HEADS:
            raise ValueError(f"eval_head must be one of {objectives.HEADS}")
        if self.eval_head != "x" and self.eval_head not in self.modalities:
            raise ValueError(f"eval_head {self.eval_head!r} is not among the modalities")
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.d_h is None:
            self.d_h = self.d

    @property
    def effective_gammas(self) -> tuple[float, float]:
        return (0.0 if self.without_lld else self.gamma1, 0.0 if self.without_hld else self.gamma2)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kernel_sizes"] = list(self.kernel_sizes)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class DataShape:
    num_classes: int
    num_speakers: int
    modality_dims: tuple[int, int, int]

    @classmethod
    def of(cls, ds: Dataset) -> "DataShape":
        return cls(ds.num_classes, ds.num_speakers, tuple(ds.modality_dims))

    @property
    def unk_speaker(self) -> int:
        return self.num_speakers


@dataclass
class ForwardOutputs:
    h: dict[str, Tensor]
    h_prime: dict[str, Tensor]
    gaussians: dict[str, fusion.GaussianPair]
    mixed: fusion.GaussianPair
    h_x: Tensor
    probs: dict[str, Tensor]
    recon: dict[str, Tensor] = field(default_factory=dict)


class CmathModel:
    """Parameters plus the forward pass over padded batches."""

    def __init__(self, cfg: TrainConfig, shape: DataShape, seed: int | None = None):
        self.cfg = cfg
        self.shape = shape
        self.params = ParamStore()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d, mods = cfg.d, cfg.modalities
        self.codecs: dict[str, encoder.ModalityCodec] = {}
        for m in mods:
            d_m = shape.modality_dims[MODALITIES.index(m)]
            k = cfg.kernel_sizes[MODALITIES.index(m)]
            if cfg.without_mr:
                self.codecs[m] = encoder.init_affine_codec(self.params, f"encoder.{m}", d_m, d, rng)
            else:
                self.codecs[m] = encoder.init_codec(self.params, f"encoder.{m}", d_m, d, k, rng)
        # one extra column for speakers unseen at training time
        self.speaker_table = self.params.uniform("speaker.V_s", (d, shape.num_speakers + 1), shape.num_speakers + 1, rng)
        self.blocks: dict[str, list[cma.CmaBlockParams]] = {}
        if not cfg.without_cma:
            for m in mods:
                aux = [a for a in mods if a != m]
                self.blocks[m] = [
                    cma.init_block(self.params, f"cma.{m}.layer{layer}", len(aux), d, cfg.heads, cfg.d_ff, rng, cfg.dropout)
                    for layer in range(cfg.layers)
                ]
        self.gaussian_params = {m: fusion.init_gaussian(self.params, f"fusion.{m}", d, cfg.d_h, rng) for m in mods}
        self.classifiers = {
            h: objectives.init_classifier(self.params, f"classifier.{h}", d, shape.num_classes, rng)
            for h in list(mods) + ["x"]
        }

    @property
    def heads(self) -> list[str]:
        return list(self.cfg.modalities) + ["x"]

    def check_compatible(self, ds: Dataset) -> None:
        if ds.num_classes != self.shape.num_classes:
            raise ValueError(f"class mismatch: model has {self.shape.num_classes} classes, data has {ds.num_classes}")
        if tuple(ds.modality_dims) != tuple(self.shape.modality_dims):
            raise ValueError(f"modality dims mismatch: {ds.modality_dims} vs {self.shape.modality_dims}")

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ForwardOutputs:
        cfg = self.cfg
        mask = batch.mask
        fmask = mask[..., None].astype(ad.get_default_dtype())
        spk = np.where(batch.speakers < self.shape.num_speakers, batch.speakers, self.shape.unk_speaker)
        s = encoder.speaker_embeddings(spk, self.speaker_table)
        pos = encoder.positional_encoding(batch.n_max, cfg.d)
        h, recon = {}, {}
        for m in cfg.modalities:
            u = ad.Tensor(batch.feats[m].astype(ad.get_default_dtype()))
            codec = self.codecs[m]
            u_prime = encoder.conv_encode(u, codec) * fmask
            if not cfg.without_mr:
                recon[m] = encoder.reconstruction_loss(u, encoder.conv_decode(u_prime, codec), mask)
            h[m] = encoder.assemble_modality(u_prime, s, pos)
        if cfg.without_cma:
            h_prime = dict(h)
        else:
            h_prime = {
                m: cma.cma_forward(h[m], [h[a] for a in cfg.modalities if a != m], self.blocks[m], mask, rng, training)
                for m in cfg.modalities
            }
        gaussians = {m: fusion.modality_gaussian(h_prime[m], self.gaussian_params[m]) for m in cfg.modalities}
        mixed = fusion.mix_gaussians([gaussians[m] for m in cfg.modalities])
        h_x = fusion.reparameterize(mixed, training, rng)
        probs = {m: objectives.classify(h_prime[m], self.classifiers[m]) for m in cfg.modalities}
        probs["x"] = objectives.classify(h_x, self.classifiers["x"])
        return ForwardOutputs(h, h_prime, gaussians, mixed, h_x, probs, recon)

    def per_conversation_losses(self, out: ForwardOutputs, batch: Batch,
                                teacher: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, Tensor]:
        """Every loss term as a (B,) tensor, keyed like ``ce[t]``, ``re``, ``mse[a]``, ``kl[v]``.

        ``teacher`` optionally pins the distillation targets (fused representation,
        fused-head probabilities) to fixed arrays instead of this pass's values.
        Since targets are detached either way, gradients at the point where the
        arrays were taken are identical; finite-difference checks need the pinned form.
        """
        mask, labels = batch.mask, batch.labels
        t_h, t_probs = teacher if teacher is not None else (out.h_x.data, out.probs["x"].data)
        terms: dict[str, Tensor] = {}
        for head in self.heads:
            terms[f"ce[{head}]"] = objectives.cross_entropy_per_conv(out.probs[head], labels, mask)
        if out.recon:
            re = None
            for m in self.cfg.modalities:
                re = out.recon[m] if re is None else re + out.recon[m]
            terms["re"] = re
        for m in self.cfg.modalities:
            terms[f"mse[{m}]"] = objectives.low_level_distill_per_conv(t_h, out.h_prime[m], mask, self.cfg.mse_reduction)
            terms[f"kl[{m}]"] = objectives.high_level_distill_per_conv(t_probs, out.probs[m], mask)
        return terms

    def loss(self, out: ForwardOutputs, batch: Batch, teacher=None) -> LossParts:
        terms = {k: v.mean() for k, v in self.per_conversation_losses(out, batch, teacher).items()}
        g1, g2 = self.cfg.effective_gammas
        pick = lambda prefix: {k[len(prefix) + 1 : -1]: v for k, v in terms.items() if k.startswith(prefix + "[")}  # noqa: E731
        re = terms.get("re", ad.Tensor(np.zeros((), dtype=ad.get_default_dtype())))
        return objectives.total_loss(pick("ce"), re, pick("mse"), pick("kl"), g1, g2)

    def predict(self, batch: Batch, head: str | None = None) -> tuple[np.ndarray, ForwardOutputs]:
        head = head or self.cfg.eval_head
        with ad.no_grad():
            out = self.forward(batch, training=False)
        return np.argmax(out.probs[head].data, axis=-1), out
