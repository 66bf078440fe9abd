"""Training objectives and the BN-neck classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParameterStore, normal_init
from .tensor import Tensor

LOSS_NAMES = ("L_id", "L_me", "L_sep", "L_MMD", "L_rec", "L_aln")

SYSU_LAMBDAS = (0.2, 1.0, 0.1, 0.1)
REGDB_LAMBDAS = (0.2, 0.8, 0.1, 0.1)


@dataclass
class LossWeights:
    sep: float = SYSU_LAMBDAS[0]
    mmd: float = SYSU_LAMBDAS[1]
    rec: float = SYSU_LAMBDAS[2]
    aln: float = SYSU_LAMBDAS[3]
    margin: float = 0.5

    def __post_init__(self):
        if min(self.sep, self.mmd, self.rec, self.aln) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_lambdas(cls, lambdas, margin: float = 0.5) -> "LossWeights":
        sep, mmd, rec, aln = (float(v) for v in lambdas)
        return cls(sep, mmd, rec, aln, margin)


class Classifier:
    """BN neck followed by a bias-free linear layer."""

    def __init__(self, gamma: Tensor, beta: Tensor, weight: Tensor, momentum: float = 0.9,
                 eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.weight = weight
        self.momentum = momentum
        self.eps = eps
        width = weight.shape[0]
        self.running_mean = np.zeros(width, dtype=weight.dtype)
        self.running_var = np.ones(width, dtype=weight.dtype)

    @classmethod
    def register(cls, store: ParameterStore, width: int, num_classes: int,
                 rng: np.random.Generator | None = None) -> "Classifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(store.register("classifier.bn_gamma", lambda: np.ones(width)),
                   store.register("classifier.bn_beta", lambda: np.zeros(width)),
                   store.register("classifier.weight", normal_init(rng, (width, num_classes), 0.001)))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, feats: Tensor, training: bool = True) -> Tensor:
        if training:
            normed, mu, var = T.batch_norm(feats, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = (feats - self.running_mean) * inv * self.gamma + self.beta
        return normed @ self.weight


@dataclass
class KernelBank:
    bandwidths: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")

    @classmethod
    def from_median(cls, feats: np.ndarray, exponents=range(-2, 3)) -> "KernelBank":
        """sigma_med * 2**i, sigma_med = median pairwise distance of ``feats``."""
        feats = np.asarray(feats, dtype=np.float64)
        diff = feats[:, None, :] - feats[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))[np.triu_indices(len(feats), k=1)]
        med = float(np.median(dist)) if dist.size else 0.0
        if med <= 0:
            med = 1.0
        return cls([med * 2.0 ** i for i in exponents])

    def gram(self, sq_dist: Tensor) -> Tensor:
        """Mean over bandwidths of exp(-d^2 / 2 sigma^2)."""
        terms = [T.exp(T.scale(sq_dist, -1.0 / (2.0 * s * s))) for s in self.bandwidths]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return T.scale(total, 1.0 / len(terms))


# ------------------------------------------------------------------ losses

def _onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return np.eye(num_classes)[labels]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    onehot = _onehot(labels, logits.shape[-1])
    picked = T.sum_(T.log_softmax(logits) * onehot, axis=-1)
    return -T.mean(picked)


def loss_id(embeddings: Tensor, labels, classifier: Classifier, training: bool = True) -> Tensor:
    if classifier.num_classes < 2:
        raise ValueError("need at least two identities")
    return cross_entropy(classifier(embeddings, training=training), labels)


def pairwise_distance(x: Tensor) -> Tensor:
    """(B, B) Euclidean distances between rows of ``x``."""
    b, width = x.shape
    left = T.reshape(x, (b, 1, width))
    right = T.reshape(x, (1, b, width))
    return T.norm(left - right, axis=-1)


def loss_metric(embeddings: Tensor, labels, margin: float = 0.5) -> Tensor:
    """Hinge on margin - d(i, j) + d(i, C_i) + d(j, C_j) over ordered pairs of different identity,
    normalised by B^2. Class centres pool every sample of the identity in the batch."""
    labels = np.asarray(labels)
    b = len(labels)
    if b < 2:
        raise ValueError("metric loss needs a batch of at least two")
    same = labels[:, None] == labels[None, :]
    centres = same / same.sum(axis=1, keepdims=True)
    to_centre = T.norm(embeddings - T.Tensor(centres) @ embeddings, axis=-1)
    dist = pairwise_distance(embeddings)
    terms = (-dist + margin) + T.reshape(to_centre, (b, 1)) + T.reshape(to_centre, (1, b))
    return T.scale(T.sum_(T.relu(terms) * (~same)), 1.0 / (b * b))


def loss_sep(neutral: Tensor) -> Tensor:
    """Cosine similarity summed over pattern pairs among the first k-1 patterns, over k^2.

    ``neutral`` is (k, d) or (B, k, d); batches are averaged.
    """
    k = neutral.shape[-2]
    if k < 2:
        raise ValueError("separation loss needs k >= 2")
    if k == 2:
        return T.scale(T.sum_(neutral), 0.0)
    head = T.take(neutral, np.arange(k - 1), axis=neutral.ndim - 2)
    unit = T.l2_normalize_rows(head)
    gram = unit @ T.transpose(unit)
    upper = np.triu(np.ones((k - 1, k - 1)), k=1)
    per_sample = T.scale(T.sum_(gram * upper, axis=(-2, -1)), 1.0 / (k * k))
    return T.mean(per_sample)


def squared_distances(x: Tensor) -> Tensor:
    b, width = x.shape
    diff = T.reshape(x, (b, 1, width)) - T.reshape(x, (1, b, width))
    return T.sum_(diff * diff, axis=-1)


def mmd_unclamped(visible: Tensor, infrared: Tensor, kernels: KernelBank) -> Tensor:
    nv, nr = visible.shape[0], infrared.shape[0]
    if nv < 1 or nr < 1:
        raise ValueError("MMD needs samples from both modalities")
    gram = kernels.gram(squared_distances(T.concat([visible, infrared], axis=0)))
    w = np.concatenate([np.full(nv, 1.0 / nv), np.full(nr, -1.0 / nr)])
    return T.sum_(gram * np.outer(w, w))


def loss_mmd(visible: Tensor, infrared: Tensor, kernels: KernelBank | None = None) -> Tensor:
    """Biased multi-kernel MMD^2 between the two modality sets, clamped at zero."""
    if kernels is None:
        kernels = KernelBank.from_median(np.concatenate([visible.data, infrared.data]))
    return T.relu(mmd_unclamped(visible, infrared, kernels))


def loss_rec(recovered: Tensor, target: Tensor) -> Tensor:
    """Element-mean absolute difference."""
    if recovered.shape != target.shape:
        raise T.DimensionError(f"{recovered.shape} vs {target.shape}")
    return T.mean(T.abs_(recovered - target))


def loss_aln(recovered: Tensor, target: Tensor) -> Tensor:
    """Euclidean distance of the flattened difference, divided by the element count.

    Batched (B, k, d) inputs give the mean of the per-sample values.
    """
    if recovered.shape != target.shape:
        raise T.DimensionError(f"{recovered.shape} vs {target.shape}")
    diff = recovered - target
    if diff.ndim == 3:
        per = T.norm(T.flatten(diff), axis=-1)
        return T.scale(T.mean(per), 1.0 / (diff.shape[1] * diff.shape[2]))
    return T.scale(T.norm(T.reshape(diff, (-1,)), axis=-1), 1.0 / diff.size)


def loss_total(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    for name, value in components.items():
        if not np.all(np.isfinite(value.data)):
            raise T.NonFiniteError(f"loss component {name} is not finite")
    zero = T.Tensor(0.0)
    c = {name: components.get(name, zero) for name in LOSS_NAMES}
    return (c["L_id"] + c["L_me"]
            + T.scale(c["L_sep"], weights.sep) + T.scale(c["L_MMD"], weights.mmd)
            + T.scale(c["L_rec"], weights.rec) + T.scale(c["L_aln"], weights.aln))


# ---------------------------------------------------------- full objective

def _per_modality_mean(values: Tensor, modalities, keep=None) -> Tensor:
    """Average per-sample values within each modality, then across the modalities present."""
    mods = np.asarray(modalities)
    keep = np.ones(len(mods), dtype=bool) if keep is None else keep
    parts = []
    for m in ("visible", "infrared"):
        sel = (mods == m) & keep
        if sel.any():
            parts.append(T.sum_(values * (sel / sel.sum())))
    if not parts:
        return T.Tensor(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return T.scale(total, 1.0 / len(parts))


def objective(fwd, labels, modalities, classifier: Classifier, weights: LossWeights,
              kernels: KernelBank | None = None, variant: str = "full") -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted training loss for one forwarded batch; returns (total, components)."""
    labels = np.asarray(labels)
    mods = np.asarray(modalities)
    comps: dict[str, Tensor] = {"L_id": loss_id(fwd.embedding, labels, classifier)}
    if variant != "baseline":
        emb = fwd.embedding
        comps["L_me"] = loss_metric(emb, labels, weights.margin)
        comps["L_sep"] = loss_sep(fwd.neutral)
        vis = np.flatnonzero(mods == "visible")
        ir = np.flatnonzero(mods == "infrared")
        if len(vis) and len(ir):
            comps["L_MMD"] = loss_mmd(T.take(emb, vis), T.take(emb, ir), kernels)
    if fwd.rec_same is not None:
        diff = T.abs_(fwd.rec_same - fwd.f_prime)
        per = T.mean(T.flatten(diff), axis=-1)
        comps["L_rec"] = _per_modality_mean(per, mods)
    if fwd.rec_cross is not None and fwd.has_cross.any():
        diff = fwd.rec_cross - fwd.f_prime
        k, d = diff.shape[1], diff.shape[2]
        per = T.scale(T.norm(T.flatten(diff), axis=-1), 1.0 / (k * d))
        comps["L_aln"] = _per_modality_mean(per, mods, keep=fwd.has_cross)
    return loss_total(comps, weights), comps
