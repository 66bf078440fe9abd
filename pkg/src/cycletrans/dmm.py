"""Discrepancy modeling: move KCM features onto shared prototypes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterStore, normal_init, uniform_init
from .tensor import Tensor

PROTOTYPES = "dmm.prototypes"
W_PSI = "dmm.w_psi"
W_SIGMA = "dmm.w_sigma"
PATTERN_LOGITS = "dmm.pattern_logits"


@dataclass
class DmmParams:
    prototypes: Tensor
    w_psi: Tensor
    w_sigma: Tensor
    pattern_logits: Tensor
    scale_dim: int

    @classmethod
    def register(cls, store: ParameterStore, dim: int, num_queries: int, num_prototypes: int,
                 scale_dim: int | None = None,
                 rng: np.random.Generator | None = None, std: float = 0.02) -> "DmmParams":
        if num_prototypes < 1:
            raise ValueError("need at least one prototype")
        rng = rng if rng is not None else np.random.default_rng(0)
        c = scale_dim or dim
        bound = 1.0 / math.sqrt(dim)
        return cls(store.register(PROTOTYPES, normal_init(rng, (num_prototypes, dim), std)),
                   store.register(W_PSI, uniform_init(rng, (dim, c), bound)),
                   store.register(W_SIGMA, uniform_init(rng, (dim, c), bound)),
                   store.register(PATTERN_LOGITS, lambda: np.zeros(num_queries)),
                   c)


@dataclass
class NeutralFeatures:
    patterns: Tensor  # (k, d) or (B, k, d)

    @property
    def flat(self) -> Tensor:
        return T.flatten(self.patterns)


def dmm_discrepancy(prototypes: Tensor, f_hat: Tensor) -> Tensor:
    """P - f_hat, broadcast over prototype rows (and over a batch if f_hat is (B, 1, d))."""
    if prototypes.shape[-1] != f_hat.shape[-1]:
        raise T.DimensionError(f"prototype width {prototypes.shape[-1]} != {f_hat.shape[-1]}")
    return prototypes - f_hat


def dmm_attend(f_prime: Tensor, prototypes: Tensor, params: DmmParams) -> Tensor:
    d = params.w_psi.shape[0]
    if f_prime.shape[-1] != d or prototypes.shape[-1] != d:
        raise T.DimensionError(
            f"features {f_prime.shape} / prototypes {prototypes.shape} do not match weight rows {d}")
    logits = (f_prime @ params.w_psi) @ T.transpose(prototypes @ params.w_sigma)
    return T.softmax_rows(T.scale(logits, 1.0 / math.sqrt(params.scale_dim)))


def pattern_weights(params: DmmParams) -> Tensor:
    return T.softmax(params.pattern_logits, axis=-1)


def dmm_unweighted(f_prime: Tensor, params: DmmParams) -> Tensor:
    """F' + A (P - mean_rows(F')), before pattern reweighting."""
    f_hat = T.mean(f_prime, axis=-2, keepdims=True)
    attn = dmm_attend(f_prime, params.prototypes, params)
    return f_prime + attn @ dmm_discrepancy(params.prototypes, f_hat)


def dmm_forward(f_prime: Tensor, params: DmmParams) -> NeutralFeatures:
    pre = dmm_unweighted(f_prime, params)
    k = pre.shape[-2]
    if params.pattern_logits.shape != (k,):
        raise T.DimensionError(f"{params.pattern_logits.shape[0]} pattern weights for {k} patterns")
    return NeutralFeatures(pre * T.reshape(pattern_weights(params), (k, 1)))
