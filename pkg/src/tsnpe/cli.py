"""Command-line interface: ``tsnpe run|coverage|benchmark|report``.

Exit codes: 0 success, 1 missing or unreadable input, 2 configuration error,
3 sampler failure, 4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import seeding
from .config import ConfigError, ExperimentConfig, load_config, load_config_file
from .density import TrainingError
from .diagnostics import sbcc_multiround
from .engine import METRIC_KEYS, RunConfig, load_run, run, write_coverage
from .tasks import TaskSpec, make_task
from .truncation import SamplerError, TruncatedProposal

log = logging.getLogger("tsnpe")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_SAMPLER = 3
EXIT_TRAINING = 4

OUT_ENV = "TSNPE_OUT"
BENCHMARK_METRICS = ("c2st", "prior_mass_in_hpr", "true_posterior_mass_in_hpr")
TABLE_HEADER = ["task", "method", "budget", "round", "seed", "metric", "value"]


def output_root(cli_out: str | None, cfg_out: str | None = None) -> Path:
    """``--out`` beats the config's ``output.dir``, which beats ``$TSNPE_OUT``; default ``runs``."""
    return Path(cli_out or cfg_out or os.environ.get(OUT_ENV) or "runs")


def _experiment(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    for flag, key in (("seed", "run.seed"), ("workers", "run.workers"), ("rounds", "run.rounds")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.config:
        return load_config_file(args.config, overrides)
    return load_config("", overrides)


def _write_verbatim(run_dir: Path, exp: ExperimentConfig, overrides: list[str]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(exp.text)
    (run_dir / "overrides.txt").write_text("".join(f"{o}\n" for o in overrides))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    exp = _experiment(args)
    root = output_root(args.out, exp.out)
    cfgs = [exp.run]
    if exp.observations:
        cfgs = [replace(exp.run, observation=o, name=f"{exp.run.run_name}_o{o}") for o in exp.observations]
    overrides = list(args.set or [])
    for cfg in cfgs:
        run_dir = root / cfg.run_name
        _write_verbatim(run_dir, exp, overrides)
        records = run(cfg, root, resume=args.resume)
        last = records[-1]
        print(f"{run_dir}: {len(records)} round(s), final status {last.status}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------


def cmd_coverage(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, task, records = load_run(run_dir, args.round)
    if not records:
        raise FileNotFoundError(f"{run_dir / 'round_1' / 'metrics.json'} not found; no completed rounds")
    r = args.round or records[-1].round
    if records[-1].round != r:
        raise FileNotFoundError(f"{run_dir / f'round_{r}' / 'metrics.json'} not found")
    est_path = run_dir / f"round_{r}" / "estimator.bin"
    if not est_path.exists():
        raise FileNotFoundError(f"{est_path} not found")
    rec = records[-1]
    if cfg.method == "apt":
        proposals = [TruncatedProposal.from_prior(task.prior, task.x_o)]
    else:
        proposals = [x.proposal for x in records]
    seed = cfg.seed if args.seed is None else args.seed
    report = sbcc_multiround(proposals, task, rec.estimator, args.m, args.p,
                             seeding.derive_rng(seed, r, "coverage"), args.strategy, cfg.sampler, cfg.k,
                             args.workers or cfg.workers)
    out_dir = Path(args.out) if args.out else run_dir / f"round_{r}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_coverage(out_dir, report)
    print(f"{out_dir / 'coverage.csv'}: max deviation from diagonal {report.max_deviation:.4f} "
          f"(M={args.m}, P={args.p}, strategy={args.strategy})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def benchmark_config(base: RunConfig, task: str, method: str, budget: int, seed: int,
                     rounds: int) -> RunConfig:
    """Config for one benchmark cell; ``budget`` is the total simulation count."""
    n_rounds = 1 if method == "npe" else rounds
    metrics = tuple(dict.fromkeys(base.metrics + BENCHMARK_METRICS))
    return replace(base, task=task, method=method, seed=seed, rounds=n_rounds,
                   simulations=budget // n_rounds, metrics=metrics,
                   name=f"{task}_{method}_b{budget}_s{seed}")


def cmd_benchmark(args) -> int:
    exp = _experiment(args)
    bench = exp.benchmark
    if args.tasks is not None:
        bench = replace(bench, tasks=tuple(t for t in args.tasks.split(",") if t))
    if args.methods is not None:
        bench = replace(bench, methods=tuple(m for m in args.methods.split(",") if m))
    if args.budgets is not None:
        bench = replace(bench, budgets=tuple(int(b) for b in args.budgets.split(",") if b))
    if args.seeds is not None:
        bench = replace(bench, seeds=tuple(int(s) for s in args.seeds.split(",") if s))
    if args.bench_rounds is not None:
        bench = replace(bench, rounds=args.bench_rounds)
    errs = bench.validate()
    if errs:
        raise ConfigError(errs)
    root = output_root(args.out, exp.out)
    root.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(exp, bench, root, args.resume)
    table = root / "benchmark.csv"
    write_table(table, rows)
    n_fail = sum(1 for row in rows if row[5] == "status" and row[6] != "ok")
    print(f"{table}: {len(rows)} rows, {n_fail} failed cell(s)")
    return EXIT_OK


def run_benchmark(exp: ExperimentConfig, bench, root: Path, resume: bool = False) -> list[list]:
    """Run every (task, method, budget, seed) cell; failures are recorded, not raised."""
    rows: list[list] = []
    tasks: dict[str, TaskSpec] = {}
    for task_name in bench.tasks:
        for method in bench.methods:
            for budget in bench.budgets:
                for seed in bench.seeds:
                    key = [task_name, method, budget]
                    cfg = benchmark_config(exp.run, task_name, method, budget, seed, bench.rounds)
                    try:
                        cfg.check()
                        if task_name not in tasks:
                            tasks[task_name] = make_task(task_name, cfg.observation)
                        _write_verbatim(root / cfg.run_name, exp, [])
                        records = run(cfg, root, tasks[task_name], resume=resume)
                    except (ValueError, KeyError, SamplerError, TrainingError) as exc:
                        log.error("benchmark cell %s failed: %s", cfg.run_name, exc)
                        rows.append(key + [0, seed, "status", f"failed: {type(exc).__name__}: {exc}"])
                        continue
                    for rec in records:
                        for metric in BENCHMARK_METRICS:
                            value = rec.metrics.get(metric)
                            # APT has no HPR, so only c2st applies to it
                            applies = metric == "c2st" or cfg.method != "apt"
                            if value is None and applies and rec.status == "ok":
                                value = "unavailable"
                            if value is not None:
                                rows.append(key + [rec.round, seed, metric, value])
                        rows.append(key + [rec.round, seed, "status", rec.status])
    return rows


def write_table(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_table(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0].keys()) != TABLE_HEADER:
        raise ValueError(f"{path} is not a benchmark table")
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def report_run(run_dir: Path, out: Path) -> list[Path]:
    """Per-round metrics CSV, per-round coverage curves and a markdown summary."""
    rounds = sorted((p for p in run_dir.glob("round_*") if (p / "metrics.json").exists()),
                    key=lambda p: int(p.name.split("_")[1]))
    if not rounds:
        raise FileNotFoundError(f"{run_dir} has no completed rounds")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics_path = out / "metrics.csv"
    table = []
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round"] + list(METRIC_KEYS))
        for rd in rounds:
            m = json.loads((rd / "metrics.json").read_text())
            row = [int(rd.name.split("_")[1])] + [_fmt(m.get(k)) for k in METRIC_KEYS]
            w.writerow(row)
            table.append(row)
    written.append(metrics_path)
    coverage_lines = []
    for rd in rounds:
        src = rd / "coverage.csv"
        if not src.exists():
            continue
        with open(src, newline="") as fh:
            pairs = [(float(r["confidence_level"]), float(r["empirical_coverage"])) for r in csv.DictReader(fh)]
        dst = out / f"coverage_{rd.name}.csv"
        with open(dst, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "coverage"])
            w.writerows([f"{a:.2f}", f"{b:.6g}"] for a, b in pairs)
        written.append(dst)
        dev = max(abs(a - b) for a, b in pairs)
        coverage_lines.append(f"| {rd.name} | {dev:.4f} |")
    md = [f"# Run report: {run_dir.name}", "", "| round | " + " | ".join(METRIC_KEYS) + " |",
          "|" + "---|" * (len(METRIC_KEYS) + 1)]
    md += ["| " + " | ".join(str(c) for c in row) + " |" for row in table]
    if coverage_lines:
        md += ["", "## Coverage", "", "| round | max deviation |", "|---|---|"] + coverage_lines
    summary = out / "summary.md"
    summary.write_text("\n".join(md) + "\n")
    written.append(summary)
    return written


def report_table(table_path: Path, out: Path) -> list[Path]:
    """Per-task pivot (median, min, max over seeds) plus a markdown summary."""
    rows = read_table(table_path)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[float]] = {}
    failures = []
    for r in rows:
        if r["metric"] == "status":
            if r["value"] != "ok":
                failures.append(r)
            continue
        try:
            v = float(r["value"])
        except ValueError:
            continue
        groups.setdefault((r["task"], r["method"], int(r["budget"]), int(r["round"]), r["metric"]), []).append(v)
    written = []
    md = [f"# Benchmark report: {table_path.name}", ""]
    for task in sorted({k[0] for k in groups}):
        path = out / f"pivot_{task}.csv"
        keys = sorted(k for k in groups if k[0] == task)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "budget", "round", "metric", "median", "min", "max", "n_seeds"])
            for k in keys:
                v = np.asarray(groups[k])
                w.writerow([k[1], k[2], k[3], k[4], f"{np.median(v):.6g}", f"{v.min():.6g}", f"{v.max():.6g}",
                            v.size])
        written.append(path)
        md += [f"## {task}", "", "| method | budget | metric | final-round median |", "|---|---|---|---|"]
        finals: dict[tuple, tuple[int, float]] = {}
        for k in keys:
            fk = (k[1], k[2], k[4])
            if fk not in finals or k[3] > finals[fk][0]:
                finals[fk] = (k[3], float(np.median(groups[k])))
        md += [f"| {m} | {b} | {metric} | {val:.4f} |" for (m, b, metric), (_, val) in sorted(finals.items())]
        md.append("")
    if failures:
        md += ["## Failed cells", ""] + [f"- {r['task']} {r['method']} budget {r['budget']} seed {r['seed']}: "
                                          f"{r['value']}" for r in failures]
    summary = out / "summary.md"
    summary.write_text("\n".join(md) + "\n")
    written.append(summary)
    return written


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    if src.is_dir():
        if (src / "benchmark.csv").exists() and not (src / "config.json").exists():
            src = src / "benchmark.csv"
        elif not (src / "config.json").exists():
            raise FileNotFoundError(f"{src / 'config.json'} not found; not a run directory")
    if src.is_file():
        out = Path(args.out) if args.out else src.parent / "report"
        written = report_table(src, out)
    else:
        out = Path(args.out) if args.out else src / "report"
        written = report_run(src, out)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsnpe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rounds=True):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--resume", action="store_true", help="continue from persisted rounds")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        if rounds:
            p.add_argument("--rounds", type=int)

    common(sub.add_parser("run", help="run one experiment"))

    p = sub.add_parser("coverage", help="expected-coverage test for a persisted round")
    p.add_argument("run_dir")
    p.add_argument("--round", type=int, help="round to test (default: last completed)")
    p.add_argument("--m", type=int, default=200, help="number of (theta*, x*) pairs")
    p.add_argument("--p", type=int, default=1000, help="posterior draws per pair")
    p.add_argument("--strategy", choices=("pooled", "truncated"), default="pooled")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (default: the round directory)")

    p = sub.add_parser("benchmark", help="grid of runs written to a long-format table")
    common(p, rounds=False)
    p.add_argument("--tasks", help="comma-separated task names")
    p.add_argument("--methods", help="comma-separated methods")
    p.add_argument("--budgets", help="comma-separated total simulation budgets")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--bench-rounds", type=int, dest="bench_rounds", help="rounds for sequential methods")

    p = sub.add_parser("report", help="plot-ready CSVs and a markdown summary")
    p.add_argument("input", help="run directory, benchmark directory or benchmark.csv")
    p.add_argument("--out")
    return parser


COMMANDS = {"run": cmd_run, "coverage": cmd_coverage, "benchmark": cmd_benchmark, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
