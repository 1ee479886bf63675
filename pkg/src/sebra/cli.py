"""Command-line harness: ``sebra {gen,rank,debias,eval,ablate}``.

Per-seed artifacts live under ``<out>/seed_<s>/``; aggregate JSON reports
(per-seed values plus mean and std) are written to ``<out>/``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from sebra import __version__, harness
from sebra import synthdata
from sebra import tinynn as nn
from sebra.errors import ConfigError, DomainError, NumericalError
from sebra.metrics import summarize
from sebra.ranking import RankedList
from sebra.trace import save_traces

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seeds(args, config) -> list[int]:
    return [args.seed] if args.seed is not None else list(config.seeds)


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _load_dataset(out: Path, seed: int) -> synthdata.Dataset:
    path = _seed_dir(out, seed) / "dataset.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `sebra gen` first")
    return synthdata.load(path)


def cmd_gen(args, config) -> dict:
    out = Path(args.out)
    written = {}
    for s in _seeds(args, config):
        d = _seed_dir(out, s)
        d.mkdir(parents=True, exist_ok=True)
        ds = harness.dataset_for(config, s)
        synthdata.save(ds, d / "dataset.csv")
        written[str(s)] = str(d / "dataset.csv")
    return {"datasets": written}


def cmd_rank(args, config) -> dict:
    out = Path(args.out)
    per_seed = {}
    for s in _seeds(args, config):
        ds = _load_dataset(out, s)
        d = _seed_dir(out, s)
        traces = []
        taus = {}
        for method in ("sebra", "erm"):
            ranked, trace = harness.rank_with_trace(ds, config.sebra, method, s)
            traces.append(trace)
            taus[method] = harness.ranking_tau(ds, ranked)
            if method == args.method:
                ranked.save(d / "ranked.csv", ds)
        save_traces(traces, d / "trace.csv")
        per_seed[s] = {"tau_b": taus[args.method], "tau_b_other": taus, "seeds": harness.seed_table(s)}
    report = {
        "method": args.method,
        "per_seed": {str(s): v for s, v in per_seed.items()},
        "tau_b": summarize([v["tau_b"] for v in per_seed.values()]),
        "config": config.to_dict(),
    }
    _write_json(out / f"rank_summary_{args.method}.json", report)
    return report


def cmd_debias(args, config) -> dict:
    out = Path(args.out)
    rows = {"sebra": [], "erm": []}
    per_seed = {}
    for s in _seeds(args, config):
        ds = _load_dataset(out, s)
        d = _seed_dir(out, s)
        ranked_path = d / "ranked.csv"
        if not ranked_path.exists():
            raise ConfigError(f"{ranked_path} not found; run `sebra rank` first")
        result = harness.debias(config, ds, RankedList.load(ranked_path), s)
        nn.save_checkpoint(result.sebra_params, d / "model_sebra.json")
        nn.save_checkpoint(result.erm_params, d / "model_erm.json")
        report = {"sebra": result.sebra.to_dict(), "erm": result.erm.to_dict(), "seeds": harness.seed_table(s)}
        _write_json(d / "debias_report.json", report)
        per_seed[str(s)] = report
        rows["sebra"].append(result.sebra)
        rows["erm"].append(result.erm)
    summary = {
        name: {
            "id_acc": summarize([r.id_acc for r in reps]),
            "worst_group_acc": summarize([r.worst_group_acc for r in reps]),
            "avg_gap": summarize([r.avg_gap for r in reps]),
            "combined_gap": summarize([r.combined_gap for r in reps]),
        }
        for name, reps in rows.items()
    }
    report = {"per_seed": per_seed, "summary": summary, "config": config.to_dict()}
    _write_json(out / "debias_summary.json", report)
    return report


def cmd_eval(args, config) -> dict:
    if not args.ranked or not args.dataset:
        raise ConfigError("eval needs --ranked and --dataset")
    ds = synthdata.load(args.dataset)
    ranked = RankedList.load(args.ranked)
    train_ids = set(ds.ids[ds.split == "train"].tolist())
    if set(ranked.sample_ids.tolist()) != train_ids:
        raise ConfigError("ranked list is not a permutation of the dataset's train ids")
    k = args.k if args.k is not None else config.pd_k
    seed = args.seed if args.seed is not None else 0
    report = {
        "tau_b": harness.ranking_tau(ds, ranked),
        "pd": harness.pd(replace(config, pd_k=k), ds, ranked, seed),
        "k": k,
        "seed": seed,
    }
    if args.out_file:
        _write_json(Path(args.out_file), report)
    return report


def cmd_ablate(args, config) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    table = harness.ablation(config)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "tau_b_mean", "tau_b_std"])
        for name, row in table.items():
            w.writerow([name, f"{row['mean']:.6f}", f"{row['std']:.6f}"])
    report = {"variants": table, "seeds": list(config.seeds)}
    _write_json(out / "ablation.json", report)
    return report


COMMANDS = {"gen": cmd_gen, "rank": cmd_rank, "debias": cmd_debias, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sebra", description="Spuriosity ranking experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (defaults built in)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory (overrides config output_dir)")
        if name == "rank":
            p.add_argument("--method", choices=("sebra", "erm"), default="sebra")
        if name == "eval":
            p.add_argument("--ranked", help="ranked-list CSV")
            p.add_argument("--dataset", help="dataset CSV")
            p.add_argument("--k", type=int, help="top/bottom subset size for PD")
            p.add_argument("--out-file", help="write the report JSON here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        config = harness.load_config(args.config)
        if args.out is None:
            args.out = config.output_dir
        report = COMMANDS[args.command](args, config)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"sebra {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"sebra {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command in ("eval", "ablate"):
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
