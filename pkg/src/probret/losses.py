"""Training objectives over in-batch negatives, with analytic gradients.

A batch holds ``B`` query embeddings and their ``B`` clicked item
embeddings. Row ``i`` scores its own positive on the diagonal of
``S = Q @ P.T`` and treats every other row's positive as a negative.
All losses reduce by the mean over rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "Batch",
    "LossOutput",
    "MleDensityConfig",
    "EPS",
    "pointwise_loss",
    "pairwise_softmax_loss",
    "info_nce_loss",
    "exp_nce_loss",
    "beta_nce_loss",
    "mle_beta_loss",
    "beta_shape_from_tau",
]

EPS = 1e-6


@dataclass
class Batch:
    queries: np.ndarray
    positives: np.ndarray
    tau: Optional[np.ndarray] = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=float)
        self.positives = np.asarray(self.positives, dtype=float)
        if self.queries.ndim != 2 or self.queries.shape != self.positives.shape:
            raise ValueError("queries and positives must be matching [B, n] arrays")
        if self.queries.shape[0] < 2:
            raise ValueError("in-batch negatives need B >= 2")
        if self.tau is not None:
            self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
            if self.tau.shape != (self.size,) or np.any(self.tau <= 0):
                raise ValueError("tau must hold one positive value per row")

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    def scores(self) -> np.ndarray:
        return self.queries @ self.positives.T


@dataclass
class LossOutput:
    value: float
    grad_queries: np.ndarray
    grad_positives: np.ndarray
    grad_tau: Optional[np.ndarray] = None
    # gradients for any extra per-row parameters (MLE shape heads)
    grad_extra: Dict[str, np.ndarray] = field(default_factory=dict)
    saturated: int = 0


@dataclass
class MleDensityConfig:
    """Per-row shapes: positives ~ Beta(alpha_pos, 1), negatives ~ Beta(1, beta_neg)."""

    alpha_pos: np.ndarray
    beta_neg: np.ndarray

    def __post_init__(self):
        self.alpha_pos = np.asarray(self.alpha_pos, dtype=float).reshape(-1)
        self.beta_neg = np.asarray(self.beta_neg, dtype=float).reshape(-1)
        if np.any(self.alpha_pos < 1) or np.any(self.beta_neg < 1):
            raise ValueError("MLE shapes must be >= 1")


def _finish(batch: Batch, d_scores: np.ndarray, value: float, **kw) -> LossOutput:
    return LossOutput(
        value=float(value),
        grad_queries=d_scores @ batch.positives,
        grad_positives=d_scores.T @ batch.queries,
        **kw,
    )


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def pointwise_loss(batch: Batch, corrected: bool = False) -> LossOutput:
    """Sigmoid cross-entropy over positives and in-batch negatives.

    The default keeps the printed sign convention ``-log s(pos) + sum log s(neg)``,
    which is unbounded below as negative scores fall. ``corrected=True``
    uses the usual ``-log s(-neg)`` for negatives.
    """
    s = batch.scores()
    b = batch.size
    off = ~np.eye(b, dtype=bool)
    pos = np.diag(s)
    value = -_log_sigmoid(pos).sum()
    d = np.zeros_like(s)
    d[np.diag_indices(b)] = -_sigmoid(-pos)
    if corrected:
        value += -_log_sigmoid(-s[off]).sum()
        d[off] = _sigmoid(s[off])
    else:
        value += _log_sigmoid(s[off]).sum()
        d[off] = _sigmoid(-s[off])
    return _finish(batch, d / b, value / b)


def _softmax_ce(batch: Batch, logits_of, tau: np.ndarray, want_tau: bool) -> LossOutput:
    """Mean over rows of ``-log softmax(phi(S) / tau)[i, i]``.

    ``logits_of`` maps scores to ``(phi, dphi/ds, saturated_count)``.
    """
    s = batch.scores()
    b = batch.size
    phi, dphi, sat = logits_of(s)
    logits = phi / tau[:, None]
    lse = logsumexp(logits, axis=1)
    value = np.mean(lse - np.diag(logits))
    dl = np.exp(logits - lse[:, None])
    dl[np.diag_indices(b)] -= 1.0
    dl /= b
    d_scores = dl * dphi / tau[:, None]
    grad_tau = -np.sum(dl * phi, axis=1) / tau ** 2 if want_tau else None
    return _finish(batch, d_scores, value, grad_tau=grad_tau, saturated=sat)


def _identity_logits(s):
    return s, np.ones_like(s), 0


def _log_z_logits(s):
    low = s < -1.0 + EPS
    sc = np.where(low, -1.0 + EPS, s)
    return np.log((1.0 + sc) / 2.0), np.where(low, 0.0, 1.0 / (1.0 + sc)), int(low.sum())


def pairwise_softmax_loss(batch: Batch, tau: float) -> LossOutput:
    """Softmax cross-entropy with one global temperature."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return _softmax_ce(batch, _identity_logits, np.full(batch.size, float(tau)), False)


def _need_tau(batch):
    if batch.tau is None:
        raise ValueError("this loss needs per-row temperatures in the batch")
    return batch.tau


def info_nce_loss(batch: Batch) -> LossOutput:
    """Pairwise softmax with the per-query temperature; gradient reaches tau."""
    return _softmax_ce(batch, _identity_logits, _need_tau(batch), True)


def exp_nce_loss(batch: Batch) -> LossOutput:
    """``mean_i log(1 + sum_j exp((s_ij - s_ii) / tau_i))`` over negatives ``j != i``.

    Dividing numerator and denominator of the InfoNCE ratio by the positive
    term shows ``log(1 + sum_neg r / r_pos) = -log(r_pos / sum_all r)``, so
    this equals :func:`info_nce_loss`. It is computed here from the
    ratio form on purpose, so the identity is a real check.
    """
    tau = _need_tau(batch)
    s = batch.scores()
    b = batch.size
    pos = np.diag(s)
    diff = (s - pos[:, None]) / tau[:, None]
    # the diagonal entry of diff is exactly 0 and plays the role of the "1 +"
    value = np.mean(logsumexp(diff, axis=1))
    w = np.exp(diff - logsumexp(diff, axis=1, keepdims=True))
    np.fill_diagonal(w, 0.0)
    w /= b
    d_scores = w / tau[:, None]
    d_scores[np.diag_indices(b)] = -w.sum(axis=1) / tau
    grad_tau = -np.sum(w * diff, axis=1) / tau
    return _finish(batch, d_scores, value, grad_tau=grad_tau)


def beta_nce_loss(batch: Batch) -> LossOutput:
    """Softmax cross-entropy on ``log((1 + s) / 2) / tau``.

    Scores below ``-1 + EPS`` are clamped (zero gradient) and counted in
    ``LossOutput.saturated``.
    """
    return _softmax_ce(batch, _log_z_logits, _need_tau(batch), True)


def beta_shape_from_tau(tau):
    """Beta shape parameters ``(alpha, beta)`` recovered from a temperature.

    With a uniform background, the learned density over ``z = (1 + s) / 2`` is
    ``Beta(1 / tau, 1)``.
    """
    tau = np.asarray(tau, dtype=float)
    return 1.0 / tau, np.ones_like(tau)


def mle_beta_loss(batch: Batch, cfg: MleDensityConfig) -> LossOutput:
    """Negative log-likelihood of positives and in-batch negatives.

    Row ``i`` contributes ``-log f_i(s_ii) - sum_{j != i} log h_i(s_ij)``, where
    ``f_i`` is the rescaled ``Beta(alpha_i, 1)`` density on [-1, 1] and ``h_i``
    is ``Beta(1, beta_i)``. Scores are clamped into ``[-1 + EPS, 1 - EPS]``.
    """
    b = batch.size
    a = cfg.alpha_pos
    bn = cfg.beta_neg
    if a.shape != (b,) or bn.shape != (b,):
        raise ValueError("MLE shapes must have one entry per row")
    s = batch.scores()
    low, high = s < -1.0 + EPS, s > 1.0 - EPS
    sc = np.clip(s, -1.0 + EPS, 1.0 - EPS)
    off = ~np.eye(b, dtype=bool)
    pos = np.diag(sc)
    log_z_pos = np.log((1.0 + pos) / 2.0)
    log_1mz = np.log((1.0 - sc) / 2.0)
    pos_term = -np.log(a / 2.0) - (a - 1.0) * log_z_pos
    neg_term = (-np.log(bn / 2.0))[:, None] - (bn - 1.0)[:, None] * log_1mz
    value = np.mean(pos_term + np.where(off, neg_term, 0.0).sum(axis=1))

    d = np.where(off, (bn - 1.0)[:, None] / (1.0 - sc), 0.0)
    d[np.diag_indices(b)] = -(a - 1.0) / (1.0 + pos)
    d[low | high] = 0.0
    d /= b
    grad_a = (-1.0 / a - log_z_pos) / b
    grad_b = np.where(off, -1.0 / bn[:, None] - log_1mz, 0.0).sum(axis=1) / b
    return _finish(batch, d, value,
                   grad_extra={"alpha_pos": grad_a, "beta_neg": grad_b},
                   saturated=int((low | high).sum()))
