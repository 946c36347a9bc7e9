"""Experiment presets and the tables they emit.

A preset is a fixed grid of (world, fed config, seeds) cells. Every cell of a
preset shares the same world so that strategies and distributions are
compared on paired data. Results come back as named tables (column tuple
plus rows) that the CLI writes as CSV.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .federation import PRESETS, ExperimentResult, FedConfig, client_scaling_experiment, run_experiment
from .taskgen import WorldConfig, gen_world
from .util import stable_hash

ROUNDS_COLUMNS = ("round", "strategy", "distribution", "seed", "train_loss",
                  "val_loss", "zeroshot_loss", "cost_per_round")
SPECTRA_COLUMNS = ("round", "layer", "index", "sigma", "error_ratio")

# reference error ratio for the spectrum study; the rank where a layer first drops below it is reported
RATIO_MARK = 0.16


@dataclass
class Table:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)


@dataclass
class SweepOutput:
    preset: str
    config_hash: str
    seeds: tuple[int, ...]
    tables: dict[str, Table]
    summary: dict


def label(cfg: FedConfig) -> str:
    return "naive_bucket" if cfg.strategy == "naive" and cfg.bucket else cfg.strategy


def round_rows(result: ExperimentResult) -> list[tuple]:
    cfg = result.config
    return [
        (r.round, label(cfg), cfg.distribution, cfg.seed, r.train_loss, r.val_loss,
         r.zeroshot_loss, r.cost_per_round)
        for r in result.reports
    ]


def spectra_rows(result: ExperimentResult) -> list[tuple]:
    rows = []
    for r in result.reports:
        for li, (sig, ratio) in enumerate(zip(r.spectra, r.error_ratios)):
            for i, (s, e) in enumerate(zip(sig, ratio)):
                rows.append((r.round, li, i + 1, float(s), float(e)))
    return rows


def first_rank_below(ratios: np.ndarray, mark: float = RATIO_MARK) -> Optional[int]:
    """Smallest retained rank whose error ratio is under ``mark``."""
    hits = np.flatnonzero(np.asarray(ratios) < mark)
    return int(hits[0]) + 1 if hits.size else None


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else None


def _std(xs):
    xs = [x for x in xs if x is not None]
    return float(np.std(xs)) if xs else None


def _hash(world: WorldConfig, cfgs, seeds) -> str:
    return stable_hash({"world": world.as_dict(), "cells": [c.as_dict() for c in cfgs],
                        "seeds": list(seeds)})


def _grid(world_cfg: WorldConfig, cells: list[FedConfig], seeds, progress=None):
    """Run every cell for every seed on one shared world."""
    world = gen_world(world_cfg)
    results = []
    for cell in cells:
        for seed in seeds:
            results.append(run_experiment(dataclasses.replace(cell, seed=int(seed)), world))
            if progress:
                progress(f"{label(cell)} {cell.distribution} seed={seed}")
    return world, results


RUN_COLUMNS = ("strategy", "distribution", "seed", "stopped_round", "final_val_loss",
               "final_zeroshot_loss", "rounds_to_threshold", "cost_per_round", "total_cost")
CELL_COLUMNS = ("strategy", "distribution", "runs", "mean_zeroshot_loss", "std_zeroshot_loss",
                "mean_val_loss", "mean_stopped_round")


def _run_row(res: ExperimentResult) -> tuple:
    cfg = res.config
    return (label(cfg), cfg.distribution, cfg.seed, res.stopped_round, res.final_val_loss,
            res.final_zeroshot_loss, res.rounds_to_threshold, res.cost_per_round, res.total_cost)


def _cell_rows(cells, results, seeds) -> list[tuple]:
    rows = []
    n = len(seeds)
    for i, cell in enumerate(cells):
        chunk = results[i * n : (i + 1) * n]
        zs = [r.final_zeroshot_loss for r in chunk]
        rows.append((label(cell), cell.distribution, n, _mean(zs), _std(zs),
                     _mean([r.final_val_loss for r in chunk]),
                     _mean([r.stopped_round for r in chunk])))
    return rows


def _strategy_grid(name, world_cfg, cells, seeds, progress) -> SweepOutput:
    _, results = _grid(world_cfg, cells, seeds, progress)
    rounds = Table(ROUNDS_COLUMNS, [row for r in results for row in round_rows(r)])
    runs = Table(RUN_COLUMNS, [_run_row(r) for r in results])
    summary_rows = _cell_rows(cells, results, seeds)
    summary = {"cells": [dict(zip(CELL_COLUMNS, row)) for row in summary_rows]}
    return SweepOutput(name, _hash(world_cfg, cells, seeds), tuple(seeds),
                       {"rounds.csv": rounds, "runs.csv": runs,
                        "summary.csv": Table(CELL_COLUMNS, summary_rows)}, summary)


def table2(progress=None) -> SweepOutput:
    """Strategy x heterogeneous resource distribution grid."""
    seeds = (0, 1, 2, 3, 4)
    cells = []
    for dist in PRESETS:
        cells += [FedConfig(strategy="flexlora", distribution=dist),
                  FedConfig(strategy="hetlora", distribution=dist),
                  FedConfig(strategy="naive", distribution=dist, bucket=True)]
    return _strategy_grid("table2", WorldConfig(), cells, seeds, progress)


def fig5a(progress=None) -> SweepOutput:
    """Homogeneous ranks: FlexLoRA against naive averaging at the smallest and largest budget."""
    seeds = (0, 1, 2)
    cells = [FedConfig(strategy=s, distribution=d)
             for d in ("type1", "type4") for s in ("flexlora", "naive")]
    return _strategy_grid("fig5a", WorldConfig(), cells, seeds, progress)


def fig4b(progress=None) -> SweepOutput:
    """Singular spectra and error ratios of the aggregated delta over a FlexLoRA run."""
    seeds = (0,)
    world_cfg = WorldConfig()
    cell = FedConfig(strategy="flexlora", distribution="uniform")
    _, results = _grid(world_cfg, [cell], seeds, progress)
    res = results[0]
    rows = []
    last = res.reports[-1] if res.reports else None
    if last is not None:
        for li, ratio in enumerate(last.error_ratios):
            hit = first_rank_below(ratio)
            rows.append((li, last.round, len(ratio), hit,
                         None if hit is None else float(ratio[hit - 1])))
    cols = ("layer", "round", "max_rank", "first_rank_below_mark", "ratio_at_that_rank")
    summary = {"ratio_mark": RATIO_MARK, "layers": [dict(zip(cols, r)) for r in rows]}
    return SweepOutput("fig4b", _hash(world_cfg, [cell], seeds), seeds,
                       {"rounds.csv": Table(ROUNDS_COLUMNS, round_rows(res)),
                        "spectra.csv": Table(SPECTRA_COLUMNS, spectra_rows(res)),
                        "summary.csv": Table(cols, rows)}, summary)


TABLE4_PROGRESS = 0.6
TABLE4_COLUMNS = ("distribution", "seed", "rounds_to_threshold", "cost_per_round",
                  "cost_to_threshold", "cost_pct_of_homogeneous", "threshold", "stopped_round", "total_cost")
TABLE4_SUMMARY = ("distribution", "runs", "reached", "mean_rounds_to_threshold",
                  "mean_cost_per_round", "mean_cost_to_threshold", "mean_cost_pct_of_homogeneous")


def table4(progress=None) -> SweepOutput:
    """Rounds and cost to a loss threshold: smallest homogeneous rank against heterogeneous mixes."""
    seeds = (0, 1, 2, 3, 4)
    world_cfg = WorldConfig(mode="mixture")
    dists = ("type1",) + tuple(PRESETS)
    cells = [FedConfig(strategy="flexlora", distribution=d, threshold_progress=TABLE4_PROGRESS)
             for d in dists]
    _, results = _grid(world_cfg, cells, seeds, progress)
    n = len(seeds)
    homo = {r.config.seed: r for r in results[:n]}
    rows = []
    for res in results:
        ref = homo[res.config.seed].cost_to_threshold
        pct = (None if res.cost_to_threshold is None or not ref
               else 100.0 * res.cost_to_threshold / ref)
        rows.append((res.config.distribution, res.config.seed, res.rounds_to_threshold,
                     res.cost_per_round, res.cost_to_threshold, pct, res.threshold,
                     res.stopped_round, res.total_cost))
    summary_rows = []
    for i, d in enumerate(dists):
        chunk = rows[i * n : (i + 1) * n]
        summary_rows.append((d, n, sum(r[2] is not None for r in chunk), _mean([r[2] for r in chunk]),
                             _mean([r[3] for r in chunk]), _mean([r[4] for r in chunk]),
                             _mean([r[5] for r in chunk])))
    summary = {"threshold_progress": TABLE4_PROGRESS,
               "rows": [dict(zip(TABLE4_SUMMARY, r)) for r in summary_rows]}
    return SweepOutput("table4", _hash(world_cfg, cells, seeds), seeds,
                       {"rounds.csv": Table(ROUNDS_COLUMNS, [x for r in results for x in round_rows(r)]),
                        "runs.csv": Table(TABLE4_COLUMNS, rows),
                        "summary.csv": Table(TABLE4_SUMMARY, summary_rows)}, summary)


# data-scarce world where the number of training clients, not rank, limits generalisation
FIG6_WORLD = WorldConfig(noise_sigma=0.5, samples_per_client=(12, 24), specific_scale=0.6)
FIG6_POOLS = (10, 50, 100)


def fig6(progress=None) -> SweepOutput:
    """Zero-shot loss against the number of clients in the training pool."""
    seeds = (0, 1, 2)
    cfg = FedConfig(strategy="flexlora", distribution="uniform")
    res = client_scaling_experiment(gen_world(FIG6_WORLD), FIG6_POOLS, seeds, cfg)
    if progress:
        progress("client scaling done")
    cols = ("pool_size",) + tuple(f"zeroshot_seed{s}" for s in seeds) + ("mean_zeroshot_loss", "fit_residual")
    rows = []
    for i, size in enumerate(res.pool_sizes):
        resid = None if res.residuals is None else res.residuals[i]
        rows.append((size, *res.losses[size], res.mean_losses[i], resid))
    fit_rows = [] if res.fit is None else [("A1", res.fit[0]), ("A2", res.fit[1]), ("A3", res.fit[2])]
    summary = {
        "pool_sizes": list(res.pool_sizes),
        "mean_zeroshot_loss": res.mean_losses,
        "fit": None if res.fit is None else dict(zip(("A1", "A2", "A3"), res.fit)),
        "relative_residuals": res.residuals,
    }
    cells = [dataclasses.replace(cfg, train_pool_size=s) for s in FIG6_POOLS]
    return SweepOutput("fig6", _hash(FIG6_WORLD, cells, seeds), seeds,
                       {"summary.csv": Table(cols, rows),
                        "fit.csv": Table(("parameter", "value"), fit_rows)}, summary)


SWEEPS: dict[str, Callable[..., SweepOutput]] = {
    "table2": table2,
    "fig5a": fig5a,
    "fig4b": fig4b,
    "table4": table4,
    "fig6": fig6,
}
