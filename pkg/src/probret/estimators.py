"""scikit-learn style wrappers around training and retrieval."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import ClickLogDataset
from .retrieval import (ItemIndex, RetrievalResult, calibrate_policy_for_avg_k, parse_policy,
                        retrieve, retrieved_counts)
from .trainer import TrainConfig, train

__all__ = ["TwoTowerEncoder", "CutoffRetriever"]


class TwoTowerEncoder(TransformerMixin, BaseEstimator):
    """Fit a two-tower model on a :class:`ClickLogDataset`.

    ``transform`` maps query feature strings to unit embeddings; items go
    through :meth:`encode_items` and temperatures through :meth:`temperature`.
    """

    def __init__(self, loss="betance", learning_rate=0.05, batch_size=64, steps=5000, seed=0,
                 global_tau=None, dim=32, hidden=64, corrected_pointwise=False):
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.global_tau = global_tau
        self.dim = dim
        self.hidden = hidden
        self.corrected_pointwise = corrected_pointwise

    def train_config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, steps=self.steps, seed=self.seed,
                           global_tau=self.global_tau, dim=self.dim, hidden=self.hidden,
                           corrected_pointwise=self.corrected_pointwise)

    def fit(self, X: ClickLogDataset, y=None):
        if not isinstance(X, ClickLogDataset):
            raise TypeError("fit expects a ClickLogDataset")
        self.model_, self.trace_ = train(self.train_config(), X)
        self.n_features_out_ = self.dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.encode_queries(_texts(X))

    def encode_items(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.encode_items(_texts(X))

    def temperature(self, X) -> np.ndarray:
        """Per-query temperature for feature strings."""
        return self.model_.temperatures(self.transform(X))


def _texts(X) -> List[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of feature strings, not one string")
    return [str(x) for x in X]


class CutoffRetriever(BaseEstimator):
    """Exact index over item embeddings with a truncation policy.

    ``policy`` uses the textual form accepted by :func:`parse_policy`.
    """

    def __init__(self, policy="topk:k=100"):
        self.policy = policy

    def fit(self, X, ids=None):
        emb = check_array(X, dtype=np.float64)
        ids = [f"{i}" for i in range(emb.shape[0])] if ids is None else list(ids)
        self.index_ = ItemIndex(emb, ids)
        self.policy_ = parse_policy(self.policy)
        return self

    def _inputs(self, X, taus):
        check_is_fitted(self, "index_")
        q = check_array(X, dtype=np.float64)
        if taus is None:
            taus = np.full(q.shape[0], np.nan)
        taus = np.asarray(taus, dtype=float).reshape(-1)
        if taus.shape[0] != q.shape[0]:
            raise ValueError("one temperature per query row")
        return q, taus

    def predict(self, X, taus=None) -> List[RetrievalResult]:
        q, taus = self._inputs(X, taus)
        return [retrieve(self.index_, v, None if np.isnan(t) else t, self.policy_)
                for v, t in zip(q, taus)]

    def counts(self, X, taus=None) -> np.ndarray:
        q, taus = self._inputs(X, taus)
        return retrieved_counts(self.index_, q, taus, self.policy_)

    def calibrate(self, X, taus, target_k: float, family: str = "cdf",
                  mode: Optional[str] = None):
        """Refit ``policy`` so the mean retrieved count over ``X`` is ``target_k``."""
        q, taus = self._inputs(X, taus)
        if mode is None:
            mode = getattr(self.policy_, "mode", "plain")
        self.policy_ = calibrate_policy_for_avg_k(self.index_, q, taus, target_k, family, mode)
        self.policy = self.policy_.describe()
        return self
