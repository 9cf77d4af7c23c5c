"""Exact cosine index with top-k, fixed-score and per-query CDF truncation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .distributions import Beta, SphericalMarginal, build_cdf_table, inverse_cdf

__all__ = [
    "ItemIndex",
    "TopK",
    "ScoreThreshold",
    "CdfCutoff",
    "RetrievalPolicy",
    "RetrievalResult",
    "CalibrationError",
    "parse_policy",
    "cdf_threshold",
    "retrieve",
    "retrieved_counts",
    "calibrate_policy_for_avg_k",
]

NORM_TOL = 1e-6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("TopK needs an integer k >= 1")

    def describe(self) -> str:
        return f"topk:k={self.k}"


@dataclass(frozen=True)
class ScoreThreshold:
    t: float

    def __post_init__(self):
        if not -1.0 <= self.t <= 1.0:
            raise ValueError("ScoreThreshold needs t in [-1, 1]")

    def describe(self) -> str:
        return f"score:t={self.t!r}"


@dataclass(frozen=True)
class CdfCutoff:
    """Keep items above the score ``t*`` with upper-tail mass ``P(x >= t*) = p``.

    ``mode="plain"`` uses ``Beta(1 / tau_q, 1)`` on [-1, 1]; ``"spherical"``
    adds the ``(1 - x^2)^((n - 3) / 2)`` surface factor. ``p = 1`` keeps
    everything.
    """

    p: float
    mode: str = "plain"

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("CdfCutoff needs p in (0, 1]")
        if self.mode not in ("plain", "spherical"):
            raise ValueError("mode must be 'plain' or 'spherical'")

    def describe(self) -> str:
        return f"cdf:p={self.p!r},mode={self.mode}"


RetrievalPolicy = Union[TopK, ScoreThreshold, CdfCutoff]


def parse_policy(text: str) -> RetrievalPolicy:
    """Parse ``topk:k=1500``, ``score:t=0.4`` or ``cdf:p=0.985[,mode=spherical]``."""
    kind, _, rest = text.strip().partition(":")
    args = {}
    for part in filter(None, rest.split(",")):
        key, eq, val = part.partition("=")
        if not eq:
            raise ValueError(f"bad policy argument {part!r}")
        args[key.strip()] = val.strip()
    allowed = {"topk": {"k"}, "score": {"t"}, "cdf": {"p", "mode"}}
    if kind not in allowed:
        raise ValueError(f"unknown policy kind {kind!r}")
    if set(args) - allowed[kind]:
        raise ValueError(f"unexpected policy arguments {sorted(set(args) - allowed[kind])}")
    try:
        if kind == "topk":
            return TopK(int(args["k"]))
        if kind == "score":
            return ScoreThreshold(float(args["t"]))
        return CdfCutoff(float(args["p"]), args.get("mode", "plain"))
    except KeyError as exc:
        raise ValueError(f"policy {text!r} is missing {exc}") from None


@dataclass(frozen=True, eq=False)
class ItemIndex:
    embeddings: np.ndarray
    ids: tuple

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=float)
        ids = tuple(self.ids)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError("index needs a nonempty [M, n] matrix")
        if len(ids) != emb.shape[0]:
            raise ValueError("one id per embedding row")
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > NORM_TOL):
            raise ValueError("index rows must be unit norm")
        emb.setflags(write=False)
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
        rank.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "_id_rank", rank)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class RetrievalResult:
    positions: np.ndarray  # row numbers in the index
    ids: tuple
    scores: np.ndarray
    threshold_used: float
    count: int


def _cdf_dist(tau: float, mode: str, n: int):
    base = Beta(1.0 / float(tau), 1.0)
    return base if mode == "plain" else SphericalMarginal(base, n)


def cdf_threshold(policy: CdfCutoff, tau, n: int):
    """Per-query cutoff ``t* = F^-1(1 - p)`` (vectorised over ``tau``)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(~(tau > 0)):
        raise ValueError("tau must be positive")
    q = max(0.0, 1.0 - policy.p)
    out = np.array([inverse_cdf(build_cdf_table(_cdf_dist(t, policy.mode, n)), q) for t in tau],
                   dtype=float)
    return out


def _order(index: ItemIndex, positions, scores):
    keys = np.lexsort((index._id_rank[positions], -scores))
    return positions[keys], scores[keys]


def retrieve(index: ItemIndex, v_q, tau_q, policy: RetrievalPolicy) -> RetrievalResult:
    """Brute-force scoring of every item, then truncation by ``policy``.

    Results are sorted by score descending, ties by ascending item id.
    """
    v_q = np.asarray(v_q, dtype=float).reshape(-1)
    if v_q.shape != (index.dim,):
        raise ValueError("query dimension does not match the index")
    scores = index.embeddings @ v_q
    if isinstance(policy, TopK):
        k = min(policy.k, index.size)
        if k < index.size:
            # enough candidates to resolve ties at the k-th score
            kth = np.partition(scores, index.size - k)[index.size - k]
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(index.size)
        pos, sc = _order(index, cand, scores[cand])
        pos, sc = pos[:k], sc[:k]
        threshold = float(sc[-1])
    else:
        if isinstance(policy, ScoreThreshold):
            threshold = float(policy.t)
        elif isinstance(policy, CdfCutoff):
            if tau_q is None:
                raise ValueError("CdfCutoff needs the query temperature")
            threshold = float(cdf_threshold(policy, tau_q, index.dim)[0])
        else:
            raise TypeError(f"unknown policy {policy!r}")
        cand = np.flatnonzero(scores >= threshold)
        pos, sc = _order(index, cand, scores[cand])
    return RetrievalResult(pos, tuple(index.ids[i] for i in pos), sc, threshold, int(pos.size))


def _thresholds(index, taus, policy, n_queries):
    if isinstance(policy, ScoreThreshold):
        return np.full(n_queries, float(policy.t))
    if isinstance(policy, CdfCutoff):
        return cdf_threshold(policy, taus, index.dim)
    raise TypeError(f"no per-query threshold for {policy!r}")


def retrieved_counts(index: ItemIndex, queries, taus, policy: RetrievalPolicy,
                     chunk: int = 64) -> np.ndarray:
    """Number of items each query retrieves under ``policy``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    nq = queries.shape[0]
    if isinstance(policy, TopK):
        return np.full(nq, min(policy.k, index.size), dtype=np.int64)
    thr = _thresholds(index, taus, policy, nq)
    return _counts_at(index, queries, thr, chunk)


def _counts_at(index, queries, thr, chunk=64):
    out = np.empty(queries.shape[0], dtype=np.int64)
    for s in range(0, queries.shape[0], chunk):
        sc = queries[s:s + chunk] @ index.embeddings.T
        out[s:s + chunk] = np.count_nonzero(sc >= thr[s:s + chunk, None], axis=1)
    return out


def calibrate_policy_for_avg_k(index: ItemIndex, queries, taus, target_k: float,
                               family: str, mode: str = "plain", rel_tol: float = 0.01,
                               max_iter: int = 200) -> RetrievalPolicy:
    """Bisect the policy parameter until the mean retrieved count is ``target_k`` (+-1%).

    ``family`` is ``"score"`` (returns a :class:`ScoreThreshold`) or
    ``"cdf"`` (returns a :class:`CdfCutoff` with the given ``mode``).
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if queries.shape[0] == 0:
        raise CalibrationError("empty query set")
    if target_k > index.size:
        raise CalibrationError(f"target_k={target_k} exceeds the index size {index.size}")
    if not target_k > 0:
        raise CalibrationError("target_k must be positive")
    if family not in ("score", "cdf"):
        raise ValueError("family must be 'score' or 'cdf'")

    if family == "score":
        make = ScoreThreshold
        if target_k >= index.size:
            return ScoreThreshold(-1.0)
        # count decreases in t; search t in [-1, 1]
        lo, hi = -1.0, 1.0
        increasing = False
    else:
        def make(p):
            return CdfCutoff(p, mode)
        if target_k >= index.size:
            return CdfCutoff(1.0, mode)
        lo, hi = 0.0, 1.0
        increasing = True
    want = float(target_k)
    best, best_err = None, math.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if not (lo < mid < hi):
            break
        pol = make(mid)
        mean = float(retrieved_counts(index, queries, taus, pol).mean())
        err = abs(mean - want)
        if err < best_err:
            best, best_err = pol, err
        if err <= rel_tol * want:
            return pol
        if (mean < want) == increasing:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"could not reach mean count {want} within {rel_tol:.0%}; closest {best} off by {best_err:.3g}")
