"""scikit-learn style wrapper: fit on labelled two-modality maps, transform to neutral embeddings."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SampleArrays
from .evaluation import EmbeddingSet, embed, similarity
from .losses import SYSU_LAMBDAS
from .pipeline import ModelConfig
from .trainer import TrainConfig, train
from .validation import check_identities, check_maps, check_modalities, check_training_pools


class CycleTransEmbedder(TransformerMixin, BaseEstimator):
    """Learns modality-neutral embeddings from visible and infrared feature maps.

    ``X`` is (N, hw, raw_dim); ``modality`` holds "visible" or "infrared"
    per sample. ``predict`` returns, for each sample, the identity of the most
    similar training sample from the other modality.
    """

    def __init__(self, variant="full", dim=32, num_queries=7, num_prototypes=64,
                 init_std=1.0, epochs=30, lr=1e-3, milestones=(40, 70), lambdas=SYSU_LAMBDAS,
                 margin=0.5, batch_identities=8, k_visible=4, k_infrared=4, metric="cosine",
                 random_state=0):
        self.variant = variant
        self.dim = dim
        self.num_queries = num_queries
        self.num_prototypes = num_prototypes
        self.init_std = init_std
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.lambdas = lambdas
        self.margin = margin
        self.batch_identities = batch_identities
        self.k_visible = k_visible
        self.k_infrared = k_infrared
        self.metric = metric
        self.random_state = random_state

    def fit(self, X, y, modality=None):
        X = check_maps(X)
        if modality is None:
            raise ValueError("fit needs the modality of every sample")
        mods = check_modalities(modality, len(X))
        y = check_identities(y, len(X))
        check_training_pools(y, mods, self.batch_identities)
        self.classes_, codes = np.unique(y, return_inverse=True)
        seed = 0 if self.random_state is None else int(self.random_state)
        model_cfg = ModelConfig(raw_dim=X.shape[-1], dim=self.dim, num_queries=self.num_queries,
                                num_prototypes=self.num_prototypes, num_classes=len(self.classes_),
                                variant=self.variant, init_std=self.init_std)
        train_cfg = TrainConfig(epochs=self.epochs, lr=self.lr, milestones=tuple(self.milestones),
                                lambdas=tuple(self.lambdas), margin=self.margin,
                                batch_identities=self.batch_identities, k_visible=self.k_visible,
                                k_infrared=self.k_infrared, seed=seed)
        ids = np.array([f"train{i:06d}" for i in range(len(X))])
        arrays = SampleArrays(X, codes, mods, ids)
        result = train(model_cfg, train_cfg, arrays)
        self.net_ = result.net
        self.history_ = result.history
        self.n_features_in_ = X.shape[-1]
        self.train_embeddings_ = embed(self.net_, SampleArrays(X, y.copy(), mods, ids))
        return self

    def transform(self, X, modality=None):
        check_is_fitted(self, "net_")
        X = check_maps(X, self.n_features_in_)
        if modality is None:
            raise ValueError("transform needs the modality of every sample")
        mods = check_modalities(modality, len(X))
        ids = np.array([f"x{i:06d}" for i in range(len(X))])
        return embed(self.net_, SampleArrays(X, np.zeros(len(X), dtype=int), mods, ids)).matrix

    def fit_transform(self, X, y=None, modality=None, **fit_params):
        return self.fit(X, y, modality=modality).transform(X, modality=modality)

    def predict(self, X, modality=None):
        emb = self.transform(X, modality)
        mods = check_modalities(modality, len(emb))
        ref: EmbeddingSet = self.train_embeddings_
        out = np.empty(len(emb), dtype=ref.identities.dtype)
        for m in np.unique(mods):
            rows = mods == m
            pool = ref.modalities != m
            sim = similarity(emb[rows], ref.matrix[pool], self.metric)
            out[rows] = ref.identities[pool][np.argmax(sim, axis=1)]
        return out

    def score(self, X, y, modality=None):
        """Cross-modal nearest-neighbour identification accuracy."""
        return float(np.mean(self.predict(X, modality) == np.asarray(y)))
