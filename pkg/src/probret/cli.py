"""Command-line entry point ``probret``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Values from ``--config`` (INI with ``[experiment]``, ``[synth]``,
``[train]`` sections) are overridden by explicit flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .data import DataError, ingest, generate, write_dataset
from .evaluation import (DEFAULT_BIN_WIDTH, SWEEP_P, cdf_sweep, count_histogram, evaluate,
                         write_report)
from .pipeline import (EXIT_OK, EXIT_USAGE, StageError, config_hash, exit_code_for, load_config,
                       run_experiment)
from .retrieval import ItemIndex, calibrate_policy_for_avg_k, parse_policy, retrieve
from .serialization import load_index, load_model, save_index, save_model
from .trainer import LOSSES, train

log = logging.getLogger("probret")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _p_list(text: str):
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad p list {text!r}") from None
    if not vals or any(not 0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("p values must lie in (0, 1)")
    return vals


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probret", description="Two-tower retrieval with per-query CDF cutoffs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="INI config file; flags override it")
        return sp

    g = add("gen", "generate a synthetic click-log corpus")
    g.add_argument("--spec", default="default", help="'default' or an INI file with a [synth] section")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)

    t = add("train", "train a two-tower model on a click log")
    t.add_argument("--data", required=True, help="click-log file or dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss", choices=LOSSES)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--global-tau", type=float)
    t.add_argument("--dim", type=int)
    t.add_argument("--hidden", type=int)

    i = add("index", "encode every item of a dataset into an index file")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)

    c = add("calibrate", "find the policy parameter giving a target mean count")
    c.add_argument("--index", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--target-k", type=float, required=True)
    c.add_argument("--family", choices=("score", "cdf"), required=True)
    c.add_argument("--mode", choices=("plain", "spherical"), default="plain")

    r = add("retrieve", "retrieve items for one query")
    r.add_argument("--index", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--query", required=True, help="query id (with --data) or feature text")
    r.add_argument("--policy", required=True, help="topk:k=N | score:t=X | cdf:p=P[,mode=M]")
    r.add_argument("--data", help="dataset used to resolve query ids")
    r.add_argument("--limit", type=int, default=0, help="print at most this many rows (0 = all)")

    e = add("eval", "stratified precision/recall of one policy")
    e.add_argument("--index", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--k", type=float, help="average depth the policy was calibrated to")
    e.add_argument("--out", required=True, help="report path stem (.jsonl and .txt)")
    e.add_argument("--bin-width", type=int, default=DEFAULT_BIN_WIDTH)

    s = add("sweep", "mean retrieved counts per stratum over CDF values")
    s.add_argument("--index", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--p", type=_p_list, default=SWEEP_P)
    s.add_argument("--mode", choices=("plain", "spherical"), default="plain")
    s.add_argument("--hist-p", type=float, help="also write a count histogram at this p")
    s.add_argument("--bin-width", type=int, default=DEFAULT_BIN_WIDTH)
    s.add_argument("--out", required=True, help="report path stem")

    x = add("run", "run the full experiment (three policies at equal average k)")
    x.add_argument("--out", help="output directory")
    x.add_argument("--seed", type=int)
    x.add_argument("--data", help="ingest this click log instead of generating one")
    x.add_argument("--steps", type=int)
    x.add_argument("--target-k", type=float)
    x.add_argument("--mode", choices=("plain", "spherical"))
    return p


def _overrides(args, section, names, rename=None):
    rename = rename or {}
    return {section: {rename.get(n, n): getattr(args, n) for n in names
                      if getattr(args, n, None) is not None}}


def _cmd_gen(args):
    path = args.config if args.spec == "default" else args.spec
    cfg = load_config(path, _overrides(args, "synth", ["seed"]))
    data, _, _ = generate(cfg.synth)
    write_dataset(data, args.out, config_hash(cfg.synth))
    print(f"{len(data.query_ids)} queries, {len(data.item_ids)} items, "
          f"{data.num_pairs} pairs -> {args.out}")


def _cmd_train(args):
    names = ["loss", "steps", "learning_rate", "batch_size", "seed", "global_tau", "dim", "hidden"]
    cfg = load_config(args.config, _overrides(args, "train", names))
    data = ingest(args.data)
    model, trace = train(cfg.train, data)
    chash = config_hash({"train": dataclasses.asdict(cfg.train), "data": data.fingerprint()})
    save_model(model, args.out, chash)
    print(f"loss {trace.losses[0]:.5f} -> {trace.losses[-1]:.5f}; saved {args.out}")


def _cmd_index(args):
    model, mhash = load_model(args.model)
    data = ingest(args.data)
    index = ItemIndex(model.encode_items(data.item_text), data.item_ids)
    save_index(index, args.out, config_hash({"model": mhash, "data": data.fingerprint()}))
    print(f"{index.size} items x {index.dim} -> {args.out}")


def _load_all(args):
    model, _ = load_model(args.model)
    index, _ = load_index(args.index)
    if index.dim != model.dim:
        raise DataError("index and model dimensions differ")
    return model, index


def _cmd_calibrate(args):
    model, index = _load_all(args)
    data = ingest(args.data)
    q = model.encode_queries(data.query_text)
    pol = calibrate_policy_for_avg_k(index, q, model.temperatures(q), args.target_k,
                                     args.family, args.mode)
    print(pol.describe())


def _cmd_retrieve(args):
    model, index = _load_all(args)
    policy = _policy(args.policy)
    text = args.query
    if args.data:
        data = ingest(args.data)
        lookup = dict(zip(data.query_ids, data.query_text))
        text = lookup.get(args.query, args.query)
    v = model.encode_queries([text])[0]
    tau = float(model.temperatures(v[None, :])[0])
    res = retrieve(index, v, tau, policy)
    print(f"# tau={tau!r} threshold={res.threshold_used!r} count={res.count}")
    rows = zip(res.ids, res.scores)
    for n, (iid, sc) in enumerate(rows):
        if args.limit and n >= args.limit:
            break
        print(f"{iid}\t{sc:.6f}")


def _policy(text):
    try:
        return parse_policy(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_eval(args):
    model, index = _load_all(args)
    policy = _policy(args.policy)
    data = ingest(args.data)
    rep = evaluate(index, model, data, policy, args.k, args.bin_width)
    write_report(args.out, rep.records(), rep.table(),
                 config_hash({"policy": policy.describe(), "k": args.k, "data": data.fingerprint()}))
    sys.stdout.write(rep.table())


def _cmd_sweep(args):
    model, index = _load_all(args)
    data = ingest(args.data)
    chash = config_hash({"p": args.p, "mode": args.mode, "data": data.fingerprint()})
    table = cdf_sweep(index, model, data, args.p, args.mode)
    write_report(args.out, table.records(), table.table(), chash)
    sys.stdout.write(table.table())
    if args.hist_p is not None:
        hist = count_histogram(index, model, data, args.hist_p, args.mode, args.bin_width)
        write_report(f"{args.out}.histogram", hist.records(), hist.table(), chash)
        sys.stdout.write(hist.table())


def _cmd_run(args):
    overrides = _overrides(args, "experiment", ["out", "seed", "data", "target_k", "mode"],
                           {"out": "out_dir", "data": "data_path", "mode": "cdf_mode"})
    overrides.update(_overrides(args, "train", ["steps"]))
    cfg = load_config(args.config, overrides)
    result = run_experiment(cfg)
    print((Path(cfg.out_dir) / "reports" / "comparison.txt").read_text(encoding="utf-8"), end="")
    print(f"config_hash={result.config_hash}")


COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "index": _cmd_index,
            "calibrate": _cmd_calibrate, "retrieve": _cmd_retrieve, "eval": _cmd_eval,
            "sweep": _cmd_sweep, "run": _cmd_run}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"probret {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"probret {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - mapped to an exit status
        code = exit_code_for(exc)
        print(f"probret {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
