"""Invariant suites behind ``flexlora verify``.

Each check is a small seeded experiment that raises ``AssertionError`` with a
short diagnostic when the property does not hold. Checks are grouped into one
suite per module and run in registration order.
"""

from __future__ import annotations

import dataclasses
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import adapter as adapter_mod
from .adapter import LayerShape, LoraAdapter, compose, decompose, init_adapter
from .aggregate import (
    Contribution,
    aggregate_flexlora,
    aggregate_hetlora,
    aggregate_naive,
    aggregation_weights,
    redistribute,
)
from .federation import FedConfig, Simulation, run_round
from .lowrank import frobenius_norm, numerical_rank, svd, truncate, truncation_error, weighted_sum
from .simmodel import Batch, OptimizerConfig, ToyModel, grads, local_update, loss
from .taskgen import WorldConfig, gen_client_dataset, gen_world, split_indices, unseen_pool


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


_CHECKS: list[tuple[str, str, Callable[[], str | None]]] = []


def check(suite: str, name: str):
    def register(fn):
        _CHECKS.append((suite, name, fn))
        return fn
    return register


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([7919, *key])


def _max_dev_from_identity(q: np.ndarray) -> float:
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))


SVD_SIZES = [(5, 4), (4, 5), (1, 6), (16, 16), (32, 8), (8, 32), (64, 48), (128, 128)]


@check("lowrank", "orthonormality")
def _orthonormality():
    worst = 0.0
    for i, (d, p) in enumerate(SVD_SIZES):
        f = svd(_rng(1, i).standard_normal((d, p)))
        worst = max(worst, _max_dev_from_identity(f.u), _max_dev_from_identity(f.v))
    assert worst <= 1e-10, f"max |Q^T Q - I| = {worst:.3e}"
    return f"max deviation {worst:.1e}"


@check("lowrank", "reconstruction")
def _reconstruction():
    worst = 0.0
    for i, (d, p) in enumerate(SVD_SIZES):
        w = _rng(2, i).standard_normal((d, p))
        f = svd(w)
        worst = max(worst, frobenius_norm(f.reconstruct() - w) / frobenius_norm(w))
        assert np.all(np.diff(f.sigma) <= 0) and np.all(f.sigma >= 0), "sigma not sorted"
    assert worst <= 1e-10, f"relative error {worst:.3e}"
    return f"max relative error {worst:.1e}"


@check("lowrank", "tail_formula")
def _tail_formula():
    for i, (d, p) in enumerate([(12, 9), (8, 8), (6, 20)]):
        w = _rng(3, i).standard_normal((d, p))
        f = svd(w)
        norm = frobenius_norm(w)
        prev = np.inf
        for r in range(1, f.k + 1):
            tail = truncation_error(f, r)
            actual = frobenius_norm(truncate(f, r) - w)
            if r < f.k:
                assert abs(tail - actual) <= 1e-10 * actual, f"{d}x{p} r={r}: {tail} vs {actual}"
            else:
                assert tail == 0.0 and actual <= 1e-10 * norm, f"{d}x{p}: full rank error {actual}"
            assert tail <= prev, f"{d}x{p}: error increases at r={r}"
            prev = tail


@check("lowrank", "determinism")
def _svd_determinism():
    w = _rng(4).standard_normal((24, 17))
    a, b = svd(w), svd(w.copy())
    for x, y in ((a.u, b.u), (a.sigma, b.sigma), (a.v, b.v)):
        assert np.array_equal(x, y), "repeated svd differs"


@check("adapter", "roundtrip")
def _roundtrip():
    worst = 0.0
    for i in range(20):
        rng = _rng(5, i)
        d, p = rng.integers(2, 33, size=2)
        w = rng.standard_normal((d, p))
        r = int(rng.integers(1, min(d, p) + 1))
        s = float(rng.choice([0.5, 1.0, 2.0, 16.0]))
        target = truncate(svd(w), r)
        got = compose(decompose(w, r, s))
        worst = max(worst, frobenius_norm(got - target) / frobenius_norm(target))
    assert worst <= 1e-10, f"compose(decompose(w, r, s)) != truncate(svd(w), r): rel err {worst:.3e}"
    return f"max relative error {worst:.1e}"


@check("adapter", "scaling_neutrality")
def _scaling_neutrality():
    w = _rng(6).standard_normal((16, 12))
    ref = compose(decompose(w, 5, 1.0))
    for s in (0.25, 3.0, 16.0, 128.0):
        gap = frobenius_norm(compose(decompose(w, 5, s)) - ref) / frobenius_norm(ref)
        assert gap <= 1e-12, f"s={s} changes the composed delta by {gap:.3e}"


@check("adapter", "rank_bound")
def _rank_bound():
    w = _rng(7).standard_normal((20, 14))
    for r in range(1, 15):
        got = numerical_rank(compose(decompose(w, r, 2.0)))
        assert got <= r, f"rank {got} exceeds budget {r}"


def _contribs(key, ranks, counts, shape=(10, 8), s=1.0):
    out = []
    for cid, (r, n) in enumerate(zip(ranks, counts)):
        rng = _rng(8, key, cid)
        up = rng.standard_normal((shape[0], r))
        down = rng.standard_normal((r, shape[1]))
        out.append(Contribution(cid, (LoraAdapter(up, down, s), LoraAdapter(up[:6], down, s)), n))
    return out


@check("aggregate", "weight_normalization")
def _weights():
    for key, counts in enumerate([(1,), (3, 5), (10, 20, 30), (1, 1, 2, 7, 100)]):
        gamma = aggregation_weights(_contribs(key, [1] * len(counts), counts))
        assert abs(gamma.sum() - 1.0) <= 1e-12, f"weights sum to {gamma.sum()!r}"


@check("aggregate", "order_invariance")
def _order_invariance():
    het = _contribs(1, [1, 2, 4, 3], [10, 20, 30, 5])
    hom = _contribs(2, [3, 3, 3], [1, 1, 2])
    perm = [2, 0, 3, 1]
    for name, fn, cs in (("flexlora", aggregate_flexlora, het), ("hetlora", aggregate_hetlora, het),
                         ("naive", aggregate_naive, hom)):
        shuffled = [cs[i] for i in perm if i < len(cs)]
        a, b = fn(cs), fn(shuffled)
        la = a.layers if name == "flexlora" else [g.compose() for g in a]
        lb = b.layers if name == "flexlora" else [g.compose() for g in b]
        gap = max(float(np.max(np.abs(x - y))) for x, y in zip(la, lb))
        assert gap <= 1e-12, f"{name}: permuting contributions moves an entry by {gap:.3e}"


@check("aggregate", "flexlora_linearity")
def _linearity():
    cs = _contribs(3, [1, 2, 4], [10, 20, 30])
    gamma = aggregation_weights(cs)
    for li in range(2):
        want = weighted_sum([compose(c.adapters[li]) for c in cs], gamma)
        assert np.array_equal(aggregate_flexlora(cs).layers[li], want), "not the weighted sum"


@check("aggregate", "homogeneous_consistency")
def _homogeneous():
    one = _contribs(4, [3], [5])[0]
    cs = [Contribution(cid, one.adapters, 5) for cid in range(4)]
    flex = aggregate_flexlora(cs).layers
    for fn in (aggregate_naive, aggregate_hetlora):
        for w, g in zip(flex, fn(cs)):
            gap = frobenius_norm(w - g.compose()) / frobenius_norm(w)
            assert gap <= 1e-10, f"{fn.__name__} differs from FlexLoRA by {gap:.3e}"


@check("aggregate", "redistribution_fidelity")
def _redistribution():
    cs = _contribs(5, [1, 2, 4, 6], [3, 9, 4, 7])
    delta = aggregate_flexlora(cs)
    factors = delta.factors()
    budgets = {0: (1, 1), 1: (3, 2), 2: (5, 6), 3: (8, 6)}
    got = redistribute(delta, budgets, 2.0, factors)
    for cid, layers in got.items():
        for li, a in enumerate(layers):
            phi = frobenius_norm(compose(a) - delta.layers[li])
            want = truncation_error(factors[li], budgets[cid][li])
            assert abs(phi - want) <= 1e-9 * max(want, 1e-300) or (want == 0 and phi <= 1e-12), \
                f"client {cid} layer {li}: phi {phi} vs tail {want}"


def _toy(key, dims, ranks, s=1.0):
    rng = _rng(9, *key)
    shapes = [LayerShape(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    bases = [rng.standard_normal((sh.out_dim, sh.in_dim)) / np.sqrt(sh.in_dim) for sh in shapes]
    adapters = [
        LoraAdapter(0.3 * rng.standard_normal((sh.out_dim, r)), rng.standard_normal((r, sh.in_dim)) / np.sqrt(sh.in_dim), s)
        for sh, r in zip(shapes, ranks)
    ]
    x = rng.standard_normal((6, dims[0]))
    y = rng.standard_normal((6, dims[-1]))
    return ToyModel(bases, adapters), Batch(x, y)


def fd_relative_error(model: ToyModel, batch: Batch, l2: float = 0.0, step: float = 1e-5) -> float:
    """Largest coordinate relative gap between analytic and central-difference gradients.

    Coordinates whose gradient is tiny compared to the tensor's largest entry
    are compared against that scale, since their relative error is all rounding.
    """
    analytic = grads(model, batch, l2)
    worst = 0.0
    for li, a in enumerate(model.adapters):
        for which, (mat, g) in enumerate(((a.up, analytic[li][0]), (a.down, analytic[li][1]))):
            floor = 1e-3 * float(np.max(np.abs(g)))
            for idx in np.ndindex(mat.shape):
                plus, minus = mat.copy(), mat.copy()
                plus[idx] += step
                minus[idx] -= step
                vals = []
                for m in (plus, minus):
                    new = a.with_factors(m, a.down) if which == 0 else a.with_factors(a.up, m)
                    adapters = list(model.adapters)
                    adapters[li] = new
                    vals.append(loss(model.with_adapters(adapters), batch, l2))
                fd = (vals[0] - vals[1]) / (2 * step)
                denom = max(abs(fd), abs(g[idx]), floor, 1e-300)
                worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


@check("simmodel", "gradient_check")
def _gradient_check():
    worst = 0.0
    for i in range(50):
        rng = _rng(10, i)
        depth = int(rng.integers(1, 4))
        dims = [int(v) for v in rng.integers(2, 17, size=depth + 1)]
        ranks = [int(rng.integers(1, min(dims[j], dims[j + 1], 4) + 1)) for j in range(depth)]
        model, batch = _toy((10, i), dims, ranks, s=float(rng.choice([0.5, 1.0, 2.0])))
        worst = max(worst, fd_relative_error(model, batch, l2=0.01 * (i % 2)))
    assert worst <= 1e-5, f"max relative error {worst:.3e}"
    return f"max relative error {worst:.1e}"


@check("simmodel", "frozen_base")
def _frozen_base():
    model, batch = _toy((11,), [8, 6, 4], [2, 3])
    before = [b.copy() for b in model.bases]
    for kind in ("sgd", "adam"):
        local_update(model, model.adapters, batch, OptimizerConfig(kind=kind, epochs=3), seed=1)
    assert all(np.array_equal(b, c) for b, c in zip(before, model.bases)), "base weights changed"


@check("simmodel", "loss_decrease")
def _loss_decrease():
    opt = OptimizerConfig(learning_rate=1e-3, batch_size=10_000)
    for i in range(20):
        model, batch = _toy((12, i), [8, 8, 4], [2, 3])
        before = loss(model, batch)
        trained, _ = local_update(model, model.adapters, batch, opt, seed=i)
        after = loss(model.with_adapters(trained), batch)
        assert after <= before, f"seed {i}: loss rose from {before} to {after}"


@check("simmodel", "determinism")
def _train_determinism():
    model, batch = _toy((13,), [8, 6, 4], [2, 3])
    a, _ = local_update(model, model.adapters, batch, OptimizerConfig(kind="adam", epochs=2), seed=5)
    b, _ = local_update(model, model.adapters, batch, OptimizerConfig(kind="adam", epochs=2), seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.up, y.up) and np.array_equal(x.down, y.down), "training not repeatable"


_SMALL_WORLD = WorldConfig(num_clients=60, samples_per_client=(20, 40))


@check("taskgen", "reproducibility")
def _world_repro():
    a, b = gen_world(_SMALL_WORLD), gen_world(_SMALL_WORLD)
    for x, y in zip(a.bases + a.shared, b.bases + b.shared):
        assert np.array_equal(x, y), "world arrays differ"
    assert np.array_equal(a.proportions, b.proportions)
    da, db = gen_client_dataset(a, 3), gen_client_dataset(b, 3)
    assert np.array_equal(da.train.targets, db.train.targets), "datasets differ"


@check("taskgen", "split_disjointness")
def _splits():
    for n in (10, 11, 19, 57, 100, 240):
        parts = split_indices(n, np.random.default_rng(n))
        joined = np.concatenate(parts)
        assert len(joined) == n and len(np.unique(joined)) == n, f"n={n}: splits overlap or miss rows"
    world = gen_world(_SMALL_WORLD)
    ds = gen_client_dataset(world, 5)
    rows = [tuple(r) for part in (ds.train, ds.val, ds.test) for r in part.inputs]
    assert len(set(rows)) == len(rows) == ds.sample_count, "split rows overlap"


@check("taskgen", "heterogeneity_dial")
def _dial():
    for seed in range(3):
        spreads = []
        for scale in (0.0, 0.1, 0.3, 1.0, 2.0):
            world = gen_world(dataclasses.replace(_SMALL_WORLD, specific_scale=scale, seed=seed))
            deltas = [np.concatenate([d.ravel() for d in world.teacher_deltas(t)])
                      for t in range(world.config.num_task_archetypes)]
            pairs = [np.linalg.norm(deltas[i] - deltas[j])
                     for i in range(len(deltas)) for j in range(i + 1, len(deltas))]
            spreads.append(float(np.mean(pairs)))
        assert all(b > a for a, b in zip(spreads, spreads[1:])), f"seed {seed}: {spreads}"


def _short_run(strategy="flexlora", distribution="uniform", rounds=4, seed=0):
    world = gen_world(_SMALL_WORLD)
    cfg = FedConfig(strategy=strategy, distribution=distribution, participants_per_round=8,
                    num_holdout_clients=10, zeroshot_pool_size=5, max_rounds=rounds, seed=seed)
    sim = Simulation(cfg, world)
    state = sim.initial_state()
    reports = []
    for _ in range(rounds):
        report, state = run_round(sim, state)
        reports.append(report)
    return sim, reports, state


@check("federation", "sampling_without_replacement")
def _no_replacement():
    sim, reports, _ = _short_run()
    for rep in reports:
        assert len(set(rep.participants)) == len(rep.participants) == sim.per_round
        assert set(rep.participants) <= set(sim.train_pool), "participant outside the training pool"


@check("federation", "cost_identity")
def _cost_identity():
    sim, reports, _ = _short_run()
    base = sum(s.base_params for s in sim.shapes)
    for rep in reports:
        per = [sum(s.adapter_params(r) for s, r in zip(sim.shapes, sim.profiles[c].ranks)) / base
               for c in rep.participants]
        assert abs(rep.trainable_fraction - float(np.mean(per))) <= 1e-12, "fraction mismatch"
        assert rep.cost_per_round >= 0 and rep.trainable_fraction >= 0


@check("federation", "phi_fidelity")
def _phi():
    sim, reports, _ = _short_run(rounds=5)
    for rep in reports[1:]:
        factors = [svd(w) for w in rep.distributed_delta]
        for cid, phis in rep.phi.items():
            for li, phi in enumerate(phis):
                want = truncation_error(factors[li], rep.ranks[cid][li])
                assert abs(phi - want) <= 1e-9 * max(want, 1.0), \
                    f"round {rep.round} client {cid} layer {li}: {phi} vs {want}"
        for li in range(len(sim.shapes)):
            pairs = sorted((rep.ranks[c][li], rep.phi[c][li]) for c in rep.phi)
            for (r1, p1), (r2, p2) in zip(pairs, pairs[1:]):
                assert r1 == r2 or p2 <= p1 + 1e-12, f"phi grows with rank on layer {li}"


@check("federation", "replay_oracle")
def _replay():
    _, reports, _ = _short_run(rounds=3)
    for rep in reports:
        again = aggregate_flexlora(rep.contributions).layers
        gap = max(frobenius_norm(a - b) / max(frobenius_norm(b), 1e-300) for a, b in zip(again, rep.global_delta))
        assert gap <= 1e-12, f"round {rep.round}: global delta differs from replay by {gap:.3e}"
        for sig in rep.spectra:
            assert np.all(np.diff(sig) <= 0), "spectrum not sorted"


@check("federation", "strategy_agnostic_plumbing")
def _plumbing():
    sim_a, flex, _ = _short_run("flexlora", "type4", rounds=3)
    sim_b, naive, _ = _short_run("naive", "type4", rounds=3)
    for a, b in zip(flex, naive):
        assert a.participants == b.participants, f"round {a.round}: participant sets differ"
        for c in a.participants:
            assert np.array_equal(sim_a.dataset(c).train.inputs, sim_b.dataset(c).train.inputs)


@check("federation", "unseen_pool_disjoint")
def _unseen():
    sim, reports, state = _short_run(rounds=4)
    pool = unseen_pool(sim.world, 10, 3, state.trained)
    assert not set(pool) & set(state.trained), "unseen pool overlaps trained clients"
    assert not set(sim.holdout) & set(state.trained), "holdout client was trained"


@check("cli", "csv_headers")
def _headers():
    from .cli import ROUNDS_COLUMNS, SPECTRA_COLUMNS
    assert ROUNDS_COLUMNS == ("round", "strategy", "distribution", "seed", "train_loss",
                              "val_loss", "zeroshot_loss", "cost_per_round")
    assert SPECTRA_COLUMNS == ("round", "layer", "index", "sigma", "error_ratio")


@check("cli", "run_determinism")
def _cli_determinism():
    from .cli import main
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "small.cfg"
        cfg.write_text("world.num_clients = 60\nworld.samples_per_client = 20, 40\n"
                       "fed.max_rounds = 3\nfed.participants_per_round = 6\n"
                       "fed.num_holdout_clients = 10\nrun.seeds = 0, 1\n")
        outs = []
        for k in range(2):
            out = Path(tmp) / f"out{k}"
            code = main(["run", str(cfg), "--out", str(out)], stdout=_Null())
            assert code == 0, f"run exited with {code}"
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outs[0] == outs[1], "repeated runs wrote different bytes"


class _Null:
    def write(self, _):
        return 0

    def flush(self):
        pass


def suite_names() -> list[str]:
    seen: list[str] = []
    for suite, _, _ in _CHECKS:
        if suite not in seen:
            seen.append(suite)
    return seen


def run_checks(inject_fault: bool = False, suites=None) -> list[CheckResult]:
    """Run every registered check; ``inject_fault`` flips the sign in ``decompose``."""
    results = []
    previous = adapter_mod._FAULT_FLIP_SIGN
    adapter_mod._FAULT_FLIP_SIGN = inject_fault
    try:
        for suite, name, fn in _CHECKS:
            if suites is not None and suite not in suites:
                continue
            start = time.perf_counter()
            try:
                detail = fn() or ""
                passed = True
            except AssertionError as exc:
                passed, detail = False, str(exc) or "assertion failed"
            except Exception as exc:  # a crash is a failed invariant, not a crashed suite
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(suite, name, passed, detail, time.perf_counter() - start))
    finally:
        adapter_mod._FAULT_FLIP_SIGN = previous
    return results
