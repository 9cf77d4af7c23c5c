"""Click-log datasets: synthetic head/torso/tail corpora and TSV ingestion.

File formats (UTF-8, ``\\n`` line ends, lines starting with ``#`` are comments):

``clicks.tsv``
    ``query_id<TAB>item_id[<TAB>stratum]``, stratum one of head/torso/tail.
    Either every line carries a stratum or none does.
``queries.tsv`` / ``items.tsv``
    ``id<TAB>feature tokens``; tokens are whitespace separated, ``tok:w``
    gives a token an explicit real weight.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "STRATA",
    "DataError",
    "ClickLogDataset",
    "SynthSpec",
    "generate",
    "ingest",
    "write_dataset",
    "frequency_strata",
]

STRATA = ("head", "torso", "tail")
CLICKS_FILE = "clicks.tsv"
QUERIES_FILE = "queries.tsv"
ITEMS_FILE = "items.tsv"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class ClickLogDataset:
    """Unique (query, item) click pairs plus feature text for every id.

    ``pair_query`` / ``pair_item`` index into ``query_ids`` / ``item_ids``;
    ``counts`` keeps how often each pair occurred before deduplication.
    ``item_ids`` may include items that were never clicked (background).
    """

    query_ids: List[str]
    item_ids: List[str]
    pair_query: np.ndarray
    pair_item: np.ndarray
    counts: np.ndarray
    strata: List[str]
    query_text: List[str]
    item_text: List[str]
    _relevant: Optional[List[np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.pair_query = np.asarray(self.pair_query, dtype=np.int64)
        self.pair_item = np.asarray(self.pair_item, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        nq, ni = len(self.query_ids), len(self.item_ids)
        if self.pair_query.size == 0:
            raise DataError("no records")
        if not (self.pair_query.shape == self.pair_item.shape == self.counts.shape):
            raise DataError("pair arrays disagree in length")
        if self.pair_query.min() < 0 or self.pair_query.max() >= nq \
                or self.pair_item.min() < 0 or self.pair_item.max() >= ni:
            raise DataError("pair index outside the id tables")
        if len(set(self.query_ids)) != nq or len(set(self.item_ids)) != ni:
            raise DataError("duplicate ids")
        if len(self.strata) != nq or any(s not in STRATA for s in self.strata):
            raise DataError("every query needs a head/torso/tail label")
        if len(self.query_text) != nq or len(self.item_text) != ni:
            raise DataError("feature tables must cover every id")

    @property
    def num_pairs(self) -> int:
        return int(self.pair_query.size)

    def relevant(self) -> List[np.ndarray]:
        """Sorted item indices clicked for each query."""
        if self._relevant is None:
            order = np.lexsort((self.pair_item, self.pair_query))
            q, i = self.pair_query[order], self.pair_item[order]
            bounds = np.searchsorted(q, np.arange(len(self.query_ids) + 1))
            self._relevant = [i[bounds[k]:bounds[k + 1]] for k in range(len(self.query_ids))]
        return self._relevant

    def stratum_array(self) -> np.ndarray:
        return np.asarray(self.strata)

    def fingerprint(self) -> str:
        """SHA-256 over the canonical TSV serialisation."""
        h = hashlib.sha256()
        for name, text in _serialise(self).items():
            h.update(name.encode())
            h.update(text.encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ClickLogDataset):
            return NotImplemented
        return _serialise(self) == _serialise(other)


@dataclass(frozen=True)
class SynthSpec:
    """Three-stratum corpus on the unit sphere.

    ``spread`` is the expected norm of the Gaussian perturbation added to a
    query direction before renormalising, so a relevant item has cosine
    about ``1 / sqrt(1 + spread**2)`` with its query. ``spread = 0`` puts
    every relevant item exactly on the query direction.
    """

    num_queries: Tuple[int, int, int] = (60, 120, 300)
    mean_items: Tuple[float, float, float] = (800.0, 150.0, 25.0)
    spread: Tuple[float, float, float] = (0.9, 0.45, 0.15)
    dim: int = 32
    noise_items: int = 20000
    seed: int = 0
    features: str = "dense"

    def __post_init__(self):
        if len(self.num_queries) != 3 or len(self.mean_items) != 3 or len(self.spread) != 3:
            raise ValueError("need one value per stratum (head, torso, tail)")
        if min(self.num_queries) < 1 or min(self.mean_items) < 1 or self.noise_items < 0:
            raise ValueError("counts must be >= 1")
        if min(self.spread) < 0:
            raise ValueError("spread must be nonnegative")
        if self.dim < 3:
            raise ValueError("dim must be >= 3")
        if self.features not in ("dense", "id"):
            raise ValueError("features must be 'dense' or 'id'")


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _dense_text(v) -> str:
    return " ".join(f"d{j}:{x:.7f}" for j, x in enumerate(v))


def generate(spec: SynthSpec = SynthSpec()):
    """Sample a corpus; returns ``(dataset, latent_query_dirs, latent_items)``.

    Relevance sets are exactly the generated clusters, so recall can be
    computed exactly from ``dataset.relevant()``.
    """
    rng = np.random.default_rng(spec.seed)
    nq = sum(spec.num_queries)
    strata = [s for s, k in zip(STRATA, spec.num_queries) for _ in range(k)]
    qdir = _unit(rng.standard_normal((nq, spec.dim)))
    sizes = np.concatenate([
        np.maximum(1, rng.poisson(m, k)) for m, k in zip(spec.mean_items, spec.num_queries)
    ])
    spread = np.repeat(np.asarray(spec.spread, dtype=float), spec.num_queries)
    items, pq = [], []
    for q in range(nq):
        noise = rng.standard_normal((sizes[q], spec.dim)) * (spread[q] / np.sqrt(spec.dim))
        items.append(_unit(qdir[q] + noise))
        pq.append(np.full(sizes[q], q))
    items.append(_unit(rng.standard_normal((spec.noise_items, spec.dim))))
    latent = np.vstack(items)
    pair_query = np.concatenate(pq)
    pair_item = np.arange(pair_query.size)

    qwidth = len(str(nq - 1))
    iwidth = len(str(latent.shape[0] - 1))
    query_ids = [f"q{q:0{qwidth}d}" for q in range(nq)]
    item_ids = [f"i{i:0{iwidth}d}" for i in range(latent.shape[0])]
    query_text = [f"qid:{qid}" for qid in query_ids]
    if spec.features == "dense":
        item_text = [_dense_text(v) for v in latent]
    else:
        item_text = [f"iid:{iid}" for iid in item_ids]
    ds = ClickLogDataset(query_ids, item_ids, pair_query, pair_item,
                         np.ones_like(pair_query), strata, query_text, item_text)
    means = [sizes[np.asarray(strata) == s].mean() for s in STRATA]
    if not means[0] > means[1] > means[2]:
        raise DataError(f"stratum sizes not strictly decreasing: {means}")
    return ds, qdir, latent


def _serialise(ds: ClickLogDataset, header: str = "") -> Dict[str, str]:
    lines = []
    for q, i, c in zip(ds.pair_query, ds.pair_item, ds.counts):
        row = f"{ds.query_ids[q]}\t{ds.item_ids[i]}\t{ds.strata[q]}\n"
        lines.append(row * int(c))
    return {
        CLICKS_FILE: header + "".join(lines),
        QUERIES_FILE: header + "".join(f"{a}\t{b}\n" for a, b in zip(ds.query_ids, ds.query_text)),
        ITEMS_FILE: header + "".join(f"{a}\t{b}\n" for a, b in zip(ds.item_ids, ds.item_text)),
    }


def write_dataset(ds: ClickLogDataset, directory, config_hash: str = "") -> Path:
    """Write the three TSV files into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = f"# config_hash={config_hash}\n" if config_hash else ""
    for name, text in _serialise(ds, header).items():
        (directory / name).write_text(text, encoding="utf-8")
    return directory


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def _read_features(path: Path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in _read_lines(path):
        ident, sep, text = line.partition("\t")
        if not sep or not ident:
            raise DataError(f"{path}:{lineno}: expected 'id<TAB>tokens'")
        if ident in out:
            raise DataError(f"{path}:{lineno}: duplicate id {ident!r}")
        out[ident] = text
    return out


def frequency_strata(click_counts: Sequence[int]) -> List[str]:
    """Label queries head/torso/tail by click-frequency terciles.

    Queries are ranked by descending count (ties by position); the top third
    is head, the bottom third tail.
    """
    counts = np.asarray(click_counts)
    order = np.lexsort((np.arange(counts.size), -counts))
    labels = np.empty(counts.size, dtype=object)
    for part, idx in zip(STRATA, np.array_split(order, 3)):
        labels[idx] = part
    return list(labels)


def ingest(path, queries_path=None, items_path=None) -> ClickLogDataset:
    """Read a click log (file, or a directory holding ``clicks.tsv``).

    Feature tables default to ``queries.tsv`` / ``items.tsv`` next to the
    click log when present; ids without a feature table get a one-hot id
    token. Duplicate pairs collapse into one pair with a count.
    """
    path = Path(path)
    if path.is_dir():
        path = path / CLICKS_FILE
    if not path.is_file():
        raise DataError(f"click log not found: {path}")
    folder = path.parent
    if queries_path is None and (folder / QUERIES_FILE).is_file():
        queries_path = folder / QUERIES_FILE
    if items_path is None and (folder / ITEMS_FILE).is_file():
        items_path = folder / ITEMS_FILE

    qfeat = _read_features(Path(queries_path)) if queries_path else None
    ifeat = _read_features(Path(items_path)) if items_path else None

    qindex: Dict[str, int] = {}
    iindex: Dict[str, int] = {}
    if qfeat is not None:
        qindex = {k: n for n, k in enumerate(qfeat)}
    if ifeat is not None:
        iindex = {k: n for n, k in enumerate(ifeat)}
    pair_counts: Dict[Tuple[int, int], int] = {}
    labels: Dict[int, str] = {}
    has_label = None
    for lineno, line in _read_lines(path):
        cols = line.split("\t")
        if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
            raise DataError(f"{path}:{lineno}: expected 'query_id<TAB>item_id[<TAB>stratum]'")
        if has_label is None:
            has_label = len(cols) == 3
        elif has_label != (len(cols) == 3):
            raise DataError(f"{path}:{lineno}: stratum column present on some lines only")
        qid, iid = cols[0], cols[1]
        for ident, table, feats, kind in ((qid, qindex, qfeat, "query"), (iid, iindex, ifeat, "item")):
            if ident not in table:
                if feats is not None:
                    raise DataError(f"{path}:{lineno}: unknown {kind} id {ident!r}")
                table[ident] = len(table)
        q, i = qindex[qid], iindex[iid]
        if has_label:
            lab = cols[2]
            if lab not in STRATA:
                raise DataError(f"{path}:{lineno}: unknown stratum {lab!r}")
            if labels.setdefault(q, lab) != lab:
                raise DataError(f"{path}:{lineno}: conflicting stratum for {qid!r}")
        pair_counts[(q, i)] = pair_counts.get((q, i), 0) + 1
    if not pair_counts:
        raise DataError(f"{path}: no records")

    query_ids = list(qindex)
    item_ids = list(iindex)
    pairs = np.array(list(pair_counts), dtype=np.int64)
    counts = np.array(list(pair_counts.values()), dtype=np.int64)
    if has_label:
        missing = [query_ids[q] for q in range(len(query_ids)) if q not in labels]
        if missing:
            raise DataError(f"queries without clicks or stratum: {missing[:5]}")
        strata = [labels[q] for q in range(len(query_ids))]
    else:
        per_query = np.bincount(pairs[:, 0], weights=counts, minlength=len(query_ids))
        strata = frequency_strata(per_query)
    query_text = [qfeat[k] for k in query_ids] if qfeat is not None else [f"qid:{k}" for k in query_ids]
    item_text = [ifeat[k] for k in item_ids] if ifeat is not None else [f"iid:{k}" for k in item_ids]
    return ClickLogDataset(query_ids, item_ids, pairs[:, 0], pairs[:, 1], counts,
                           strata, query_text, item_text)
