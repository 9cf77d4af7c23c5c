"""End-to-end experiment: data, training, index, calibration, reports.

Every artifact records the hash of the configuration that produced it.
Files are first written under a ``.partial`` name and renamed when
complete, so an interrupted stage leaves only ``.partial`` leftovers.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .data import ClickLogDataset, DataError, SynthSpec, generate, ingest, write_dataset
from .evaluation import (DEFAULT_BIN_WIDTH, GROUPS, SWEEP_P, EvalReport, cdf_sweep,
                         count_histogram, evaluate_embedded, write_report)
from .retrieval import ItemIndex, TopK, calibrate_policy_for_avg_k
from .serialization import save_index, save_model
from .trainer import TrainConfig, train

__all__ = ["PipelineConfig", "StageError", "ExperimentResult", "run_experiment", "config_hash",
           "load_config", "synth_from_mapping", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA",
           "EXIT_NUMERIC", "exit_code_for"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EXPERIMENT_STEPS = 20000


def exit_code_for(exc: BaseException) -> int:
    """Map a failure to the CLI exit status (2 data, 3 numeric, 1 otherwise)."""
    if isinstance(exc, StageError):
        return exc.exit_code
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    from .retrieval import CalibrationError
    if isinstance(exc, CalibrationError):
        return EXIT_NUMERIC
    return EXIT_USAGE


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)


@dataclass
class PipelineConfig:
    """Everything that determines an experiment's outputs.

    ``seed`` overrides the seeds inside ``synth`` and ``train``.
    ``out_dir`` does not enter the config hash.
    """

    out_dir: str = "experiment"
    data_path: Optional[str] = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=EXPERIMENT_STEPS))
    target_k: float = 500
    cdf_mode: str = "spherical"
    sweep_p: Tuple[float, ...] = SWEEP_P
    histogram_p: float = 0.985
    bin_width: int = DEFAULT_BIN_WIDTH
    seed: int = 0

    def resolved(self) -> "PipelineConfig":
        return dataclasses.replace(
            self,
            synth=dataclasses.replace(self.synth, seed=self.seed),
            train=dataclasses.replace(self.train, seed=self.seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self.resolved())
        d.pop("out_dir")
        return d


def config_hash(obj) -> str:
    """SHA-256 of a canonical JSON rendering of ``obj``."""
    if dataclasses.is_dataclass(obj):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    text = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _floats(text) -> Tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def synth_from_mapping(values: Mapping[str, str], base: SynthSpec = SynthSpec()) -> SynthSpec:
    kw = {}
    for key, raw in values.items():
        if key == "num_queries":
            kw[key] = tuple(int(x) for x in _floats(raw))
        elif key in ("mean_items", "spread"):
            kw[key] = _floats(raw)
        elif key in ("dim", "noise_items", "seed"):
            kw[key] = int(raw)
        elif key == "features":
            kw[key] = str(raw).strip()
        else:
            raise ValueError(f"unknown synth field {key!r}")
    return dataclasses.replace(base, **kw)


def load_config(path=None, overrides: Optional[Mapping[str, Mapping[str, str]]] = None
                ) -> PipelineConfig:
    """Read an INI file with ``[experiment]``, ``[synth]`` and ``[train]`` sections.

    ``overrides`` uses the same section/key layout and wins over the file.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path, encoding="utf-8"):
            raise DataError(f"config file not found: {path}")
    for section, values in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in values.items():
            if v is not None:
                parser.set(section, k, str(v))
    unknown = set(parser.sections()) - {"experiment", "synth", "train"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    cfg = PipelineConfig()
    if parser.has_section("synth"):
        cfg.synth = synth_from_mapping(dict(parser.items("synth")))
    if parser.has_section("train"):
        merged = {f.name: getattr(cfg.train, f.name) for f in dataclasses.fields(TrainConfig)}
        merged.update(dict(parser.items("train")))
        cfg.train = TrainConfig.from_mapping(merged)
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key in ("out_dir", "cdf_mode"):
                setattr(cfg, key, raw.strip())
            elif key == "data_path":
                cfg.data_path = raw.strip() or None
            elif key in ("target_k", "histogram_p"):
                setattr(cfg, key, float(raw))
            elif key in ("bin_width", "seed"):
                setattr(cfg, key, int(raw))
            elif key == "sweep_p":
                cfg.sweep_p = _floats(raw)
            else:
                raise ValueError(f"unknown experiment field {key!r}")
    return cfg


def _save_binary(saver, obj, path: Path, chash: str):
    tmp = path.with_name(path.name + ".partial")
    saver(obj, tmp, chash)
    os.replace(tmp, path)


@dataclass
class ExperimentResult:
    config_hash: str
    reports: Dict[str, EvalReport]
    artifacts: Dict[str, Path]


def comparison_table(reports: Mapping[str, EvalReport]) -> str:
    rows = [("policy", "stratum", "P@k", "R@k", "mean_count")]
    for name, rep in reports.items():
        for g in GROUPS:
            s = rep.strata[g]
            rows.append((name, g, f"{100 * s.precision:.2f}", f"{100 * s.recall:.2f}",
                         f"{s.mean_count:.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in rows) + "\n"


def run_experiment(config: PipelineConfig) -> ExperimentResult:
    """Generate or ingest data, train, index, calibrate, evaluate and sweep.

    The three policies (top-k, global score threshold, CDF cutoff) are
    calibrated to the same mean retrieved count ``target_k``. Any failure
    is raised as :class:`StageError` naming the stage.
    """
    cfg = config.resolved()
    chash = config_hash(config)
    out = Path(cfg.out_dir)
    reports_dir = out / "reports"
    artifacts: Dict[str, Path] = {}
    stage = "setup"
    try:
        reports_dir.mkdir(parents=True, exist_ok=True)

        if cfg.data_path is not None:
            stage = "ingest"
            data: ClickLogDataset = ingest(cfg.data_path)
        else:
            stage = "generate"
            data, _, _ = generate(cfg.synth)
            tmp = out / "data.partial"
            write_dataset(data, tmp, chash)
            final = out / "data"
            if final.exists():
                for child in final.iterdir():
                    child.unlink()
                final.rmdir()
            os.replace(tmp, final)
            artifacts["data"] = final
        log.info("%s: %d queries, %d items, %d pairs", stage, len(data.query_ids),
                 len(data.item_ids), data.num_pairs)

        stage = "train"
        model, trace = train(cfg.train, data)
        artifacts["model"] = out / "model.ckpt"
        _save_binary(save_model, model, artifacts["model"], chash)
        log.info("train: loss %.4f -> %.4f", trace.losses[0], trace.losses[-1])

        stage = "index"
        index = ItemIndex(model.encode_items(data.item_text), data.item_ids)
        artifacts["index"] = out / "index.bin"
        _save_binary(save_index, index, artifacts["index"], chash)

        stage = "calibrate"
        queries = model.encode_queries(data.query_text)
        taus = model.temperatures(queries)
        k = cfg.target_k
        policies = {
            "topk": TopK(int(round(k))),
            "score": calibrate_policy_for_avg_k(index, queries, taus, k, "score"),
            "cdf": calibrate_policy_for_avg_k(index, queries, taus, k, "cdf", cfg.cdf_mode),
        }
        calib = [{"policy": n, "descriptor": p.describe(), "target_k": k} for n, p in policies.items()]
        write_report(reports_dir / "calibration", calib,
                 "".join(f"{c['policy']}\t{c['descriptor']}\n" for c in calib), chash)

        stage = "eval"
        reports = {n: evaluate_embedded(index, queries, taus, data, p, k, cfg.bin_width)
                   for n, p in policies.items()}
        for name, rep in reports.items():
            write_report(reports_dir / name, rep.records(), rep.table(), chash)
        write_report(reports_dir / "comparison",
                 [r for rep in reports.values() for r in rep.records()],
                 comparison_table(reports), chash)

        stage = "sweep"
        sweep = cdf_sweep(index, model, data, cfg.sweep_p, cfg.cdf_mode, queries, taus)
        write_report(reports_dir / "sweep", sweep.records(), sweep.table(), chash)
        hist = count_histogram(index, model, data, cfg.histogram_p, cfg.cdf_mode, cfg.bin_width,
                               queries, taus)
        write_report(reports_dir / "histogram", hist.records(), hist.table(), chash)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    artifacts["reports"] = reports_dir
    return ExperimentResult(chash, reports, artifacts)
