"""Command-line front end: ``flexlora run | verify | sweep``.

Artifacts
---------
rounds.csv   round, strategy, distribution, seed, train_loss, val_loss,
             zeroshot_loss, cost_per_round (one row per round per seed)
spectra.csv  round, layer, index, sigma, error_ratio (first seed only;
             ``index`` is the retained rank, ``error_ratio`` the relative
             Frobenius error of keeping that many components)
summary.json per-seed results plus mean/std over seeds

Every CSV starts with a ``# config_hash=... seeds=...`` comment row.
Exit codes: 0 success, 1 runtime or invariant failure, 2 bad usage/config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

from . import config as config_mod
from .errors import FlexLoraError, InvalidConfig
from .federation import run_experiment
from .sweeps import (
    ROUNDS_COLUMNS,
    SPECTRA_COLUMNS,
    SWEEPS,
    SweepOutput,
    Table,
    round_rows,
    spectra_rows,
)
from .taskgen import gen_world

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, table: Table, config_hash: str, seeds) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash} seeds={','.join(str(s) for s in seeds)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell(v) for v in row])


def read_csv(path) -> tuple[str, list[dict]]:
    """Inverse of :func:`write_csv`: the comment row and a list of string-valued dicts."""
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        return header, list(csv.DictReader(fh))


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def cmd_run(path: str, overrides, out: str | None, stdout) -> int:
    try:
        cfg = config_mod.load(path, overrides)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfig as exc:
        print(f"error: invalid config {path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(out or cfg.out)
    h = cfg.config_hash()
    try:
        world = gen_world(cfg.world)
        results = [run_experiment(dataclasses.replace(cfg.fed, seed=s), world)
                   for s in cfg.seeds]
    except FlexLoraError as exc:
        print(f"error: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out_dir.mkdir(parents=True, exist_ok=True)
    rounds = Table(ROUNDS_COLUMNS, [row for r in results for row in round_rows(r)])
    write_csv(out_dir / "rounds.csv", rounds, h, cfg.seeds)
    write_csv(out_dir / "spectra.csv", Table(SPECTRA_COLUMNS, spectra_rows(results[0])), h, cfg.seeds[:1])
    per_seed = {
        str(r.config.seed): {
            "stopped_round": r.stopped_round,
            "rounds_to_threshold": r.rounds_to_threshold,
            "threshold": r.threshold,
            "total_cost": r.total_cost,
            "cost_to_threshold": r.cost_to_threshold,
            "cost_per_round": r.cost_per_round,
            "final_val_loss": r.final_val_loss,
            "final_zeroshot_loss": r.final_zeroshot_loss,
        }
        for r in results
    }
    stats = {}
    for key in ("final_val_loss", "final_zeroshot_loss", "total_cost", "stopped_round"):
        vals = [float(v[key]) for v in per_seed.values()]
        mean = sum(vals) / len(vals)
        stats[key] = {"mean": mean, "std": math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))}
    write_json(out_dir / "summary.json", {
        "config_hash": h,
        "seeds": list(cfg.seeds),
        "world": cfg.world.as_dict(),
        "fed": cfg.fed.as_dict(),
        "per_seed": per_seed,
        "stats": stats,
    })
    print(f"wrote {out_dir}/rounds.csv, spectra.csv, summary.json", file=stdout)
    return EXIT_OK


def cmd_verify(inject_fault: bool, stdout) -> int:
    from .verify import run_checks

    start = time.perf_counter()
    results = run_checks(inject_fault=inject_fault)
    suites: dict[str, list] = {}
    for r in results:
        suites.setdefault(r.suite, []).append(r)
    for suite, rs in suites.items():
        ok = all(r.passed for r in rs)
        print(f"[{'PASS' if ok else 'FAIL'}] {suite}", file=stdout)
        for r in rs:
            mark = "ok  " if r.passed else "FAIL"
            extra = f" ({r.detail})" if r.detail else ""
            print(f"    {mark} {suite}.{r.name} {r.seconds:.2f}s{extra}", file=stdout)
    failed = [f"{r.suite}.{r.name}" for r in results if not r.passed]
    elapsed = time.perf_counter() - start
    if failed:
        print(f"verify: {len(failed)} invariant(s) failed: {', '.join(failed)} ({elapsed:.1f}s)", file=stdout)
        return EXIT_FAIL
    print(f"verify: all {len(results)} invariants passed ({elapsed:.1f}s)", file=stdout)
    return EXIT_OK


def write_sweep(result: SweepOutput, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, table in result.tables.items():
        write_csv(out_dir / name, table, result.config_hash, result.seeds)
    write_json(out_dir / "summary.json", {"preset": result.preset, "config_hash": result.config_hash,
                                           "seeds": list(result.seeds), **result.summary})


def cmd_sweep(preset: str, out: str | None, stdout) -> int:
    if preset not in SWEEPS:
        print(f"error: unknown preset {preset!r}; choose from {', '.join(SWEEPS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = SWEEPS[preset](progress=lambda msg: print(f"  {preset}: {msg}", file=stdout))
    except FlexLoraError as exc:
        print(f"error: sweep failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out_dir = Path(out or Path("sweeps") / preset)
    write_sweep(result, out_dir)
    print(f"wrote {', '.join(sorted(result.tables))}, summary.json to {out_dir}", file=stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexlora", description="Federated LoRA aggregation simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one configured experiment over its seed list")
    run.add_argument("config", help="plain-text key = value config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    run.add_argument("--out", help="output directory (default: run.out from the config)")
    ver = sub.add_parser("verify", help="run the invariant suites")
    ver.add_argument("--inject-fault", action="store_true",
                     help="flip a sign in decompose to check that the suite catches it")
    sw = sub.add_parser("sweep", help="run a named experiment preset")
    sw.add_argument("preset", help=", ".join(SWEEPS))
    sw.add_argument("--out", help="output directory (default: sweeps/<preset>)")
    return p


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.out, stdout)
    if args.command == "verify":
        return cmd_verify(args.inject_fault, stdout)
    return cmd_sweep(args.preset, args.out, stdout)


if __name__ == "__main__":
    sys.exit(main())
