"""Knowledge capturing: intra-map self-attention, then query-driven cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterStore, normal_init, uniform_init
from .tensor import Tensor

W_THETA = "kcm.w_theta"
W_TAU = "kcm.w_tau"
QUERY_IDS = {"visible": "queries.visible", "infrared": "queries.infrared"}

# additive logit for keys excluded from a softmax; exp() of it underflows to 0
MASKED = -1e9


@dataclass
class KcmParams:
    w_theta: Tensor
    w_tau: Tensor
    scale_dim: int

    @classmethod
    def register(cls, store: ParameterStore, dim: int, scale_dim: int | None = None,
                 rng: np.random.Generator | None = None) -> "KcmParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        c = scale_dim or dim
        bound = 1.0 / math.sqrt(dim)
        return cls(store.register(W_THETA, uniform_init(rng, (dim, c), bound)),
                   store.register(W_TAU, uniform_init(rng, (dim, c), bound)),
                   c)


def register_queries(store: ParameterStore, num_queries: int, dim: int,
                     rng: np.random.Generator | None = None, std: float = 0.02) -> dict[str, Tensor]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return {m: store.register(pid, normal_init(rng, (num_queries, dim), std))
            for m, pid in QUERY_IDS.items()}


def refine_attention(feat_rows: Tensor) -> Tensor:
    """Row-softmax of the cosine-similarity matrix between map positions."""
    unit = T.l2_normalize_rows(feat_rows)
    return T.softmax_rows(unit @ T.transpose(unit))


def kcm_refine(feat_rows: Tensor) -> Tensor:
    """Re-aggregate each position from similar positions (no scaling, no projections).

    Accepts ``(hw, d)`` or a batch ``(B, hw, d)``.
    """
    if feat_rows.shape[-2] < 1:
        raise T.DimensionError("feature map needs at least one row")
    return refine_attention(feat_rows) @ feat_rows


def capture_attention(gallery: Tensor, queries: Tensor, params: KcmParams,
                      key_mask: np.ndarray | None = None) -> Tensor:
    d = params.w_theta.shape[0]
    if queries.shape[-1] != d or gallery.shape[-1] != d:
        raise T.DimensionError(
            f"queries {queries.shape} / gallery {gallery.shape} do not match weight rows {d}")
    if gallery.shape[-2] < 1:
        raise T.DimensionError("gallery needs at least one row")
    logits = (queries @ params.w_theta) @ T.transpose(gallery @ params.w_tau)
    logits = T.scale(logits, 1.0 / math.sqrt(params.scale_dim))
    if key_mask is not None:
        logits = logits + np.where(key_mask, 0.0, MASKED)
    return T.softmax_rows(logits)


def kcm_capture(gallery: Tensor, queries: Tensor, params: KcmParams,
                key_mask: np.ndarray | None = None) -> Tensor:
    """Cross-attention from ``queries`` onto ``gallery``; the gallery itself is the value term.

    ``key_mask`` (broadcastable to the logits, True = keep) restricts which
    gallery rows each query may attend to.
    """
    return capture_attention(gallery, queries, params, key_mask) @ gallery


def kcm_forward(feat_rows: Tensor, queries: Tensor, params: KcmParams) -> Tensor:
    return kcm_capture(kcm_refine(feat_rows), queries, params)
