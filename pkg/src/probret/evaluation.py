"""Stratified precision/recall and retrieved-count analyses.

Metrics are macro averages: every query counts once within its stratum,
and the ``all`` row averages over every evaluated query.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import STRATA, ClickLogDataset
from .retrieval import (CdfCutoff, ItemIndex, RetrievalPolicy, retrieve, retrieved_counts)

__all__ = [
    "GROUPS",
    "DEFAULT_BIN_WIDTH",
    "SWEEP_P",
    "StratumStats",
    "EvalReport",
    "SweepTable",
    "CountHistogram",
    "evaluate",
    "evaluate_embedded",
    "cdf_sweep",
    "count_histogram",
    "histogram",
    "write_report",
]

GROUPS = ("all",) + STRATA
DEFAULT_BIN_WIDTH = 50
SWEEP_P = (0.99, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4)


def histogram(counts, bin_width: int = DEFAULT_BIN_WIDTH, num_bins: Optional[int] = None) -> List[int]:
    """Occupancy of bins ``[i * w, (i + 1) * w)``; trailing bins cover the max."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    counts = np.asarray(counts, dtype=np.int64)
    idx = counts // bin_width
    need = int(idx.max()) + 1 if idx.size else 0
    num_bins = need if num_bins is None else max(num_bins, need)
    return np.bincount(idx, minlength=num_bins).astype(int).tolist()


@dataclass(frozen=True)
class StratumStats:
    queries: int
    precision: float
    recall: float
    mean_count: float
    empty: int  # queries that retrieved nothing (precision counted as 0)
    histogram: tuple


@dataclass
class EvalReport:
    policy: str
    k: Optional[float]
    bin_width: int
    strata: Dict[str, StratumStats]
    excluded: int = 0  # queries with no relevant item in the index

    def records(self) -> List[dict]:
        out = []
        for g in GROUPS:
            s = self.strata[g]
            out.append({"policy": self.policy, "k": self.k, "stratum": g, "queries": s.queries,
                        "precision": s.precision, "recall": s.recall,
                        "mean_count": s.mean_count, "empty": s.empty,
                        "bin_width": self.bin_width, "histogram": list(s.histogram),
                        "excluded": self.excluded})
        return out

    def table(self) -> str:
        head = f"policy {self.policy}  k={self.k}  excluded={self.excluded}"
        rows = [("stratum", "queries", "P@k", "R@k", "mean_count", "empty")]
        for g in GROUPS:
            s = self.strata[g]
            rows.append((g, str(s.queries), f"{100 * s.precision:.2f}", f"{100 * s.recall:.2f}",
                         f"{s.mean_count:.2f}", str(s.empty)))
        return head + "\n" + _align(rows)


def _align(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [rows[0][0].ljust(widths[0]) + "  " +
             "  ".join(c.rjust(w) for c, w in zip(rows[0][1:], widths[1:]))]
    for r in rows[1:]:
        lines.append(r[0].ljust(widths[0]) + "  " +
                     "  ".join(c.rjust(w) for c, w in zip(r[1:], widths[1:])))
    return "\n".join(lines) + "\n"


def _relevant_rows(index: ItemIndex, dataset: ClickLogDataset) -> List[np.ndarray]:
    row_of = {iid: r for r, iid in enumerate(index.ids)}
    out = []
    for rel in dataset.relevant():
        rows = [row_of[dataset.item_ids[i]] for i in rel if dataset.item_ids[i] in row_of]
        out.append(np.asarray(sorted(rows), dtype=np.int64))
    return out


def _query_state(model, dataset: ClickLogDataset):
    q = model.encode_queries(dataset.query_text)
    return q, model.temperatures(q)


def evaluate_embedded(index: ItemIndex, queries, taus, dataset: ClickLogDataset,
                      policy: RetrievalPolicy, k: Optional[float] = None,
                      bin_width: int = DEFAULT_BIN_WIDTH) -> EvalReport:
    """:func:`evaluate` with query embeddings and temperatures already computed."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    taus = np.asarray(taus, dtype=float).reshape(-1)
    if queries.shape[0] != len(dataset.query_ids) or taus.shape[0] != queries.shape[0]:
        raise ValueError("one embedding and temperature per dataset query")
    rel = _relevant_rows(index, dataset)
    strata = dataset.stratum_array()
    prec = np.zeros(len(rel))
    rec = np.zeros(len(rel))
    cnt = np.zeros(len(rel), dtype=np.int64)
    keep = np.array([r.size > 0 for r in rel])
    for q in np.flatnonzero(keep):
        res = retrieve(index, queries[q], taus[q], policy)
        hits = np.intersect1d(res.positions, rel[q], assume_unique=True).size
        cnt[q] = res.count
        rec[q] = hits / rel[q].size
        prec[q] = hits / res.count if res.count else 0.0
    num_bins = len(histogram(cnt[keep], bin_width)) if keep.any() else 0
    stats = {}
    for g in GROUPS:
        m = keep if g == "all" else keep & (strata == g)
        n = int(m.sum())
        stats[g] = StratumStats(
            queries=n,
            precision=float(prec[m].mean()) if n else 0.0,
            recall=float(rec[m].mean()) if n else 0.0,
            mean_count=float(cnt[m].mean()) if n else 0.0,
            empty=int(np.count_nonzero(cnt[m] == 0)),
            histogram=tuple(histogram(cnt[m], bin_width, num_bins)))
    return EvalReport(policy.describe(), k, bin_width, stats, int((~keep).sum()))


def evaluate(index: ItemIndex, model, dataset: ClickLogDataset, policy: RetrievalPolicy,
             k: Optional[float] = None, bin_width: int = DEFAULT_BIN_WIDTH) -> EvalReport:
    """Retrieve for every dataset query and score against its clicked items.

    ``k`` is the average depth the policy was calibrated to; it is only
    recorded in the report.
    """
    q, taus = _query_state(model, dataset)
    return evaluate_embedded(index, q, taus, dataset, policy, k, bin_width)


@dataclass
class SweepTable:
    p_values: tuple
    mode: str
    rows: Dict[str, tuple]  # stratum -> mean count per p

    def records(self) -> List[dict]:
        return [{"stratum": s, "mode": self.mode, "p": p, "mean_count": c}
                for s in STRATA for p, c in zip(self.p_values, self.rows[s])]

    def table(self) -> str:
        rows = [("stratum",) + tuple(f"{p:g}" for p in self.p_values)]
        rows += [(s,) + tuple(f"{c:.2f}" for c in self.rows[s]) for s in STRATA]
        return _align(rows)


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")


def _stratum_means(counts, strata):
    return {s: float(counts[strata == s].mean()) if np.any(strata == s) else 0.0 for s in STRATA}


def cdf_sweep(index: ItemIndex, model, dataset: ClickLogDataset,
              p_values: Sequence[float] = SWEEP_P, mode: str = "plain",
              queries=None, taus=None) -> SweepTable:
    """Mean retrieved count per stratum under ``CdfCutoff(p)`` for each ``p``."""
    for p in p_values:
        _check_p(p)
    if queries is None:
        queries, taus = _query_state(model, dataset)
    strata = dataset.stratum_array()
    cols = [_stratum_means(retrieved_counts(index, queries, taus, CdfCutoff(p, mode)), strata)
            for p in p_values]
    return SweepTable(tuple(float(p) for p in p_values), mode,
                      {s: tuple(c[s] for c in cols) for s in STRATA})


@dataclass
class CountHistogram:
    p: float
    mode: str
    bin_width: int
    bins: Dict[str, tuple]
    means: Dict[str, float]

    def records(self) -> List[dict]:
        return [{"stratum": s, "p": self.p, "mode": self.mode, "bin_width": self.bin_width,
                 "mean_count": self.means[s], "histogram": list(self.bins[s])} for s in STRATA]

    def table(self) -> str:
        n = max(len(b) for b in self.bins.values())
        rows = [("bin",) + STRATA]
        for i in range(n):
            label = f"[{i * self.bin_width},{(i + 1) * self.bin_width})"
            rows.append((label,) + tuple(str(self.bins[s][i]) for s in STRATA))
        rows.append(("mean",) + tuple(f"{self.means[s]:.2f}" for s in STRATA))
        return _align(rows)


def count_histogram(index: ItemIndex, model, dataset: ClickLogDataset, p: float,
                    mode: str = "plain", bin_width: int = DEFAULT_BIN_WIDTH,
                    queries=None, taus=None) -> CountHistogram:
    _check_p(p)
    if queries is None:
        queries, taus = _query_state(model, dataset)
    counts = retrieved_counts(index, queries, taus, CdfCutoff(p, mode))
    strata = dataset.stratum_array()
    num_bins = len(histogram(counts, bin_width))
    bins = {s: tuple(histogram(counts[strata == s], bin_width, num_bins)) for s in STRATA}
    return CountHistogram(float(p), mode, bin_width, bins, _stratum_means(counts, strata))


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_report(stem, records: List[dict], table: str, config_hash: str = "") -> Path:
    """Write ``<stem>.jsonl`` (header record first) and ``<stem>.txt``.

    Each file goes through a ``.partial`` name first. Returns the JSONL path.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    jsonl = stem.with_name(stem.name + ".jsonl")
    lines = [json.dumps({"config_hash": config_hash}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    _write_text(jsonl, "\n".join(lines) + "\n")
    _write_text(stem.with_name(stem.name + ".txt"), f"# config_hash={config_hash}\n" + table)
    return jsonl
