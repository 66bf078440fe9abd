"""Model composition: backbone -> KCM -> DMM, plus the two cycle reconstructions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MODALITIES, StubBackbone
from .dmm import DmmParams, NeutralFeatures, dmm_forward
from .kcm import KcmParams, kcm_capture, kcm_forward, kcm_refine, register_queries
from .losses import Classifier
from .params import ParameterStore
from .tensor import Tensor

VARIANTS = ("full", "no_cycle", "baseline")


@dataclass
class ModelConfig:
    raw_dim: int = 16
    dim: int = 32
    num_queries: int = 7
    num_prototypes: int = 64
    num_classes: int = 32
    scale_dim: int | None = None
    variant: str = "full"
    init_std: float = 0.02

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_queries < 1 or self.num_prototypes < 1:
            raise ValueError("num_queries and num_prototypes must be >= 1")

    @property
    def embedding_dim(self) -> int:
        return self.dim if self.variant == "baseline" else self.num_queries * self.dim


@dataclass
class CrossGallery:
    """Refined maps of same-identity, other-modality samples, stacked row-wise."""
    rows: Tensor
    sources: list[int]


@dataclass
class BatchForward:
    feat: Tensor                       # (B, hw, d) backbone output
    embedding: Tensor                  # (B, E) retrieval vector
    refined: Tensor | None = None      # (B, hw, d)
    f_prime: Tensor | None = None      # (B, k, d)
    neutral: Tensor | None = None      # (B, k, d), pattern-reweighted
    rec_same: Tensor | None = None     # (B, k, d)
    rec_cross: Tensor | None = None    # (B, k, d); rows with has_cross False are meaningless
    has_cross: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def modality_mask(modalities) -> np.ndarray:
    mods = np.asarray(modalities)
    bad = set(mods.tolist()) - set(MODALITIES)
    if bad:
        raise ValueError(f"unknown modality tag(s): {sorted(bad)}")
    return mods == "visible"


def cross_key_mask(labels, modalities, hw: int) -> np.ndarray:
    """(B, 1, B*hw) mask: sample i may read rows of sample j iff same identity, other modality."""
    labels = np.asarray(labels)
    mods = np.asarray(modalities)
    pair = (labels[:, None] == labels[None, :]) & (mods[:, None] != mods[None, :])
    return np.repeat(pair, hw, axis=1)[:, None, :]


def build_cross_gallery(refined_maps: list[Tensor], labels, modalities, index: int) -> CrossGallery | None:
    """Concatenate the (already refined) maps eligible for sample ``index``; None if there are none."""
    sources = [j for j in range(len(refined_maps))
               if labels[j] == labels[index] and modalities[j] != modalities[index]]
    if not sources:
        return None
    return CrossGallery(T.concat([refined_maps[j] for j in sources], axis=0), sources)


class CycleTransNet:
    """All trainable state lives in ``self.store``; the submodules hold handles into it."""

    def __init__(self, config: ModelConfig, seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        self.backbone = StubBackbone.register(self.store, c.raw_dim, c.dim, rng)
        if c.variant != "baseline":
            self.kcm = KcmParams.register(self.store, c.dim, c.scale_dim, rng)
            self.queries = register_queries(self.store, c.num_queries, c.dim, rng, c.init_std)
            self.dmm = DmmParams.register(self.store, c.dim, c.num_queries, c.num_prototypes,
                                          c.scale_dim, rng, c.init_std)
        self.classifier = Classifier.register(self.store, c.embedding_dim, c.num_classes, rng)

    # -- single-sample surface --------------------------------------------

    def forward_sample(self, feat_map: Tensor, modality: str) -> tuple[Tensor, NeutralFeatures]:
        if modality not in self.queries:
            raise ValueError(f"unknown modality {modality!r}")
        f_prime = kcm_forward(feat_map, self.queries[modality], self.kcm)
        return f_prime, dmm_forward(f_prime, self.dmm)

    def reconstruct_same(self, feat_map: Tensor, neutral: Tensor) -> Tensor:
        return kcm_capture(kcm_refine(feat_map), neutral, self.kcm)

    def reconstruct_cross(self, gallery: CrossGallery, neutral: Tensor) -> Tensor:
        if gallery is None or gallery.rows.shape[0] == 0:
            raise ValueError("empty cross-modality gallery")
        return kcm_capture(gallery.rows, neutral, self.kcm)

    # -- batched path ------------------------------------------------------

    def select_queries(self, modalities) -> Tensor:
        vis = modality_mask(modalities).astype(self.queries["visible"].dtype)[:, None, None]
        return self.queries["visible"] * vis + self.queries["infrared"] * (1.0 - vis)

    def forward_batch(self, raw: Tensor, modalities, labels=None, cycle: bool = True) -> BatchForward:
        """Forward a (B, hw, raw_dim) batch.

        Cycle reconstructions run only when ``cycle`` is set, labels are given,
        and the variant uses them.
        """
        feat = self.backbone(raw)
        if self.config.variant == "baseline":
            return BatchForward(feat=feat, embedding=T.mean(feat, axis=1))
        refined = kcm_refine(feat)
        f_prime = kcm_capture(refined, self.select_queries(modalities), self.kcm)
        neutral = dmm_forward(f_prime, self.dmm)
        out = BatchForward(feat=feat, embedding=neutral.flat, refined=refined,
                           f_prime=f_prime, neutral=neutral.patterns)
        if not cycle or labels is None or self.config.variant != "full":
            return out
        out.rec_same = kcm_capture(refined, neutral.patterns, self.kcm)
        batch, hw, d = refined.shape
        mask = cross_key_mask(labels, modalities, hw)
        out.has_cross = mask[:, 0, :].any(axis=1)
        if out.has_cross.any():
            keys = T.reshape(refined, (batch * hw, d))
            # rows with no eligible key get an all-True mask; they are excluded from the loss
            mask = mask | ~out.has_cross[:, None, None]
            out.rec_cross = kcm_capture(keys, neutral.patterns, self.kcm, key_mask=mask)
        return out
