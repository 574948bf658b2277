"""Command-line entry point: ``rize {run,verify,aggregate,demos}``.

Exit codes: 0 ok, 1 verification failure, 2 invalid input, 3 runtime divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunSpec, load_config
from .demos import DemoFormatError, _atomic_write, generate_demos, load_demos, save_demos
from .evaluate import RunRecord, aggregate_scores, final_third_mean, load_run, normalized_score, save_run
from .mdp import get_mdp

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_RUNS_DIR = "runs"


def runs_root(cli_value: str | None) -> Path:
    return Path(cli_value or os.environ.get("RIZE_RUNS_DIR") or DEFAULT_RUNS_DIR)


def run_path(root: Path, spec: RunSpec) -> Path:
    return root / spec.task / spec.name / f"{spec.trainer.seed}.json"


def _err(msg: str):
    print(f"rize: {msg}", file=sys.stderr)


def _execute(spec: RunSpec, demos, root: Path):
    from .trainer import DivergenceError, train

    out = run_path(root, spec)
    try:
        record = train(spec.trainer, spec.mdp_id, demos)
    except DivergenceError as exc:
        snap = out.with_name(f"{spec.trainer.seed}.divergence.json")
        _atomic_write(snap, json.dumps({"error": str(exc), "snapshot": exc.snapshot},
                                       sort_keys=True))
        return "diverged", f"{spec.name} seed {spec.trainer.seed}: {exc}; snapshot at {snap}"
    record.meta["task"] = spec.task
    record.meta["label"] = spec.name
    save_run(record, out)
    return "ok", str(out)


def cmd_run(args) -> int:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seeds=[{int(args.seed)}]")
    try:
        config = load_config(args.config, overrides)
        specs = config.runs()
        if not config.demos.exists():
            raise ConfigError(f"demo file not found: {config.demos}")
        demos = load_demos(config.demos)
        get_mdp(config.mdp)
        if demos.source_mdp_id != config.mdp:
            raise ConfigError(f"{config.demos} was generated on {demos.source_mdp_id!r}, "
                              f"not {config.mdp!r}")
    except (ConfigError, DemoFormatError, ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_INPUT

    root = runs_root(args.runs_dir)
    jobs = max(1, args.jobs or min(len(specs), os.cpu_count() or 1))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda s: _execute(s, demos, root), specs))
    code = EXIT_OK
    for status, msg in results:
        if status == "ok":
            print(f"wrote {msg}")
        else:
            _err(msg)
            code = EXIT_DIVERGED
    return code


def cmd_verify(args) -> int:
    from .oracles import CHECKS, run_checks

    names = args.only or None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            _err(f"unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
            return EXIT_INPUT
    results = run_checks(names)
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    if args.report:
        _atomic_write(Path(args.report), json.dumps(
            {"passed": not failed, "checks": [r.to_dict() for r in results]},
            sort_keys=True, indent=2, default=str))
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def collect_runs(runs_dir: Path) -> list[tuple[str, str, RunRecord]]:
    """(task, label, record) for every run record under ``runs_dir/<task>/<label>/``."""
    found = []
    for path in sorted(runs_dir.glob("*/*/*.json")):
        if path.name.endswith(".divergence.json"):
            continue
        try:
            record = load_run(path)
        except (ValueError, KeyError, json.JSONDecodeError):
            continue
        found.append((path.parent.parent.name, path.parent.name, record))
    return found


def _fmt(x) -> str:
    return repr(float(x))


def _bound_rows(records: list[RunRecord]) -> list[str]:
    """Seed-averaged reward means and target-derived bounds per logged step."""
    series = [r.series for r in records if r.series.get("step")]
    if not series:
        return []
    n = min(len(s["step"]) for s in series)
    rows = ["step,R_E_mean,R_pi_mean,bound_lo,bound_hi"]
    for i in range(n):
        cols = [np.mean([s[k][i] for s in series])
                for k in ("mean_R_E", "mean_R_pi", "bound_lo", "bound_hi")]
        rows.append(",".join([str(int(series[0]["step"][i]))] + [_fmt(c) for c in cols]))
    return rows


def _curve_rows(records: list[RunRecord]) -> list[str]:
    n = min(len(r.eval_steps) for r in records)
    scores = np.array([normalized_score(r)[:n] for r in records])
    rows = ["step,normalized_mean,normalized_min,normalized_max"]
    for i in range(n):
        col = scores[:, i]
        rows.append(",".join([str(int(records[0].eval_steps[i])), _fmt(col.mean()),
                              _fmt(col.min()), _fmt(col.max())]))
    return rows


def cmd_aggregate(args) -> int:
    from .evaluate import METRICS

    runs_dir = Path(args.runs_dir)
    out_dir = Path(args.out_dir)
    runs = [(t, m, r) for t, m, r in collect_runs(runs_dir) if len(r.eval_steps) >= 3]
    if not runs:
        _err(f"no usable run records under {runs_dir}")
        return EXIT_INPUT
    by_label: dict[str, dict[str, list]] = {}
    for task, label, rec in runs:
        by_label.setdefault(label, {}).setdefault(task, []).append(rec)

    reports = []
    header = ["method", "n_runs"]
    for name in METRICS:
        header += [name, f"{name}_lo", f"{name}_hi"]
    csv = [",".join(header)]
    for label in sorted(by_label):
        per_task = {t: [final_third_mean(r) for r in recs] for t, recs in by_label[label].items()}
        rep = aggregate_scores(per_task, label, n_resamples=args.resamples, seed=args.seed)
        reports.append(rep.to_dict())
        row = [label, str(rep.n_runs)]
        for name in METRICS:
            row += [_fmt(rep.point[name]), _fmt(rep.ci[name][0]), _fmt(rep.ci[name][1])]
        csv.append(",".join(row))
        for task, recs in sorted(by_label[label].items()):
            recs = sorted(recs, key=lambda r: r.seed)
            _atomic_write(out_dir / f"curve_{task}_{label}.csv", "\n".join(_curve_rows(recs)) + "\n")
            bounds = _bound_rows(recs)
            if bounds:
                _atomic_write(out_dir / f"bounds_{task}_{label}.csv", "\n".join(bounds) + "\n")
    _atomic_write(out_dir / "report.json", json.dumps({"methods": reports}, sort_keys=True, indent=2))
    _atomic_write(out_dir / "report.csv", "\n".join(csv) + "\n")
    print(f"aggregated {len(runs)} runs over {len(by_label)} methods into {out_dir}")
    return EXIT_OK


def cmd_demos(args) -> int:
    try:
        mdp = get_mdp(args.mdp)
        if args.n_traj < 1:
            raise ValueError("--n-traj must be at least 1")
        demos = generate_demos(mdp, args.n_traj, horizon=args.horizon, alpha=args.alpha,
                               rng_seed=args.seed)
    except (ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    save_demos(demos, args.out)
    print(f"wrote {len(demos)} trajectories to {args.out} (mean return {demos.mean_return!r})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rize", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every (method, seed) in a config matrix")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--runs-dir", help="output root (default $RIZE_RUNS_DIR or ./runs)")
    p.add_argument("--jobs", type=int, help="worker threads")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--only", action="append", metavar="CHECK")
    p.add_argument("--report", help="write the report as JSON here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("aggregate", help="summarise run records into report and plot CSVs")
    p.add_argument("runs_dir")
    p.add_argument("out_dir")
    p.add_argument("--resamples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("demos", help="generate and save an expert demo set")
    p.add_argument("--mdp", required=True)
    p.add_argument("--n-traj", type=int, required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demos)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
