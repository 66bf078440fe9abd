"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_consistent_length

from .data import MODALITIES


def check_maps(X, raw_dim: int | None = None) -> np.ndarray:
    """(N, hw, raw_dim) finite float32 array; a single (hw, raw_dim) map is promoted to N=1."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected maps of shape (N, hw, raw_dim), got {X.shape}")
    if min(X.shape) < 1:
        raise ValueError(f"empty maps array {X.shape}")
    if raw_dim is not None and X.shape[-1] != raw_dim:
        raise ValueError(f"maps have width {X.shape[-1]}, expected {raw_dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("maps contain NaN or infinity")
    return X


def check_modalities(modality, n: int) -> np.ndarray:
    mods = np.asarray(modality)
    if mods.ndim == 0:
        mods = np.full(n, mods.item())
    check_consistent_length(mods, np.empty(n))
    bad = sorted(set(mods.tolist()) - set(MODALITIES))
    if bad:
        raise ValueError(f"unknown modality tag(s) {bad}; expected {MODALITIES}")
    return mods.astype(str)


def check_identities(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    check_consistent_length(y, np.empty(n))
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("identities must be a 1-d integer array")
    return y


def check_training_pools(y: np.ndarray, mods: np.ndarray, min_identities: int) -> None:
    """Every identity needs both modalities, and a batch needs enough identities."""
    ids = np.unique(y)
    if len(ids) < max(min_identities, 2):
        raise ValueError(f"need at least {max(min_identities, 2)} identities, got {len(ids)}")
    for ident in ids:
        present = set(mods[y == ident].tolist())
        if present != set(MODALITIES):
            raise ValueError(f"identity {ident} lacks samples of {sorted(set(MODALITIES) - present)}")
