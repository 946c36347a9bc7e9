"""Federated round loop over a synthetic world.

A :class:`Simulation` fixes everything that does not change between rounds
(world, profiles, client data, the holdout population). :func:`run_round`
maps a :class:`RoundState` to the next one and emits a :class:`RoundReport`;
:func:`run_experiment` loops it with early stopping.

Randomness is keyed on ``(seed, round, client, purpose)`` so participant sets
and local data are the same for every aggregation strategy.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .adapter import LayerShape, LoraAdapter, adapter_from_factors, compose
from .aggregate import (
    Contribution,
    FactorPair,
    GlobalDelta,
    aggregate_flexlora,
    aggregate_hetlora,
    aggregate_naive,
    distribute_factors,
    hetlora_prune,
)
from .errors import HeterogeneousRanksUnsupported, InvalidConfig, InvalidDistribution
from .lowrank import SvdFactors, error_ratios, frobenius_norm, svd, truncate
from .simmodel import Batch, OptimizerConfig, ToyModel, _activations, local_update
from .taskgen import ClientDataset, World, gen_client_dataset, unseen_pool

STRATEGIES = ("flexlora", "naive", "hetlora")
CONFIG_TYPES = (1, 2, 3, 4)

# Rank budgets per configuration type on the 32 -> 32 -> 16 toy model. Type 3
# is small on the first layer and large on the second.
DEFAULT_PALETTE: dict[int, tuple[int, ...]] = {1: (2, 2), 2: (4, 4), 3: (4, 8), 4: (8, 8)}


@dataclass(frozen=True)
class ResourceDistribution:
    weights: tuple[float, float, float, float]
    name: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (4,) or np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidDistribution(f"weights must be 4 non-negative numbers summing to 1, got {self.weights}")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def point_mass(cls, config_type: int) -> "ResourceDistribution":
        w = [0.0] * 4
        w[config_type - 1] = 1.0
        return cls(tuple(w), f"type{config_type}")


PRESETS = {
    "uniform": ResourceDistribution((0.25, 0.25, 0.25, 0.25), "uniform"),
    "heavy_tail_light": ResourceDistribution((0.70, 0.10, 0.10, 0.10), "heavy_tail_light"),
    "normal": ResourceDistribution((0.15, 0.35, 0.35, 0.15), "normal"),
    "heavy_tail_strong": ResourceDistribution((0.10, 0.10, 0.10, 0.70), "heavy_tail_strong"),
}


def get_distribution(name: str) -> ResourceDistribution:
    if name in PRESETS:
        return PRESETS[name]
    if name.startswith("type") and name[4:] in {"1", "2", "3", "4"}:
        return ResourceDistribution.point_mass(int(name[4:]))
    raise InvalidDistribution(f"unknown resource distribution {name!r}")


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    config_type: int
    ranks: tuple[int, ...]
    sample_count: int
    optimizer: str = "sgd"


def assign_resources(
    dist: ResourceDistribution,
    client_ids: Sequence[int],
    seed,
    palette: dict[int, tuple[int, ...]] = DEFAULT_PALETTE,
    sample_counts: Sequence[int] | None = None,
    optimizer: str = "sgd",
) -> list[ClientProfile]:
    """Draw a configuration type per client, i.i.d. from ``dist``."""
    if not isinstance(dist, ResourceDistribution):
        dist = ResourceDistribution(tuple(dist))
    rng = np.random.default_rng(seed)
    types = rng.choice(np.array(CONFIG_TYPES), size=len(client_ids), p=np.array(dist.weights))
    profiles = []
    for i, (cid, t) in enumerate(zip(client_ids, types)):
        n = 1 if sample_counts is None else int(sample_counts[i])
        profiles.append(ClientProfile(int(cid), int(t), tuple(palette[int(t)]), n, optimizer))
    return profiles


@dataclass(frozen=True)
class FedConfig:
    strategy: str = "flexlora"
    distribution: str = "uniform"
    participation_rate: float = 0.05
    # fixes the per-round participant count instead of the rate when set
    participants_per_round: Optional[int] = None
    max_rounds: int = 60
    early_stop_patience: int = 3
    palette: tuple[tuple[int, ...], ...] = tuple(DEFAULT_PALETTE[t] for t in CONFIG_TYPES)
    num_holdout_clients: int = 40
    train_pool_size: Optional[int] = None
    zeroshot_pool_size: int = 20
    zeroshot_budgeted: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_decay: bool = True
    scaling: float = 1.0
    hetlora_decay: float = 0.99
    hetlora_l2: float = 5e-4
    # clamp every client to the smallest rank present (naive baseline under heterogeneity)
    bucket: bool = False
    # None means 1.5x the world's noise floor, unless threshold_progress is set
    loss_threshold: Optional[float] = None
    # fraction of the gap between the base model and the mean-teacher model to close
    threshold_progress: Optional[float] = None
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0 < self.participation_rate <= 1:
            raise InvalidConfig("participation_rate must lie in (0, 1]")
        if self.max_rounds < 0 or self.early_stop_patience < 1:
            raise InvalidConfig("max_rounds must be >= 0 and early_stop_patience >= 1")
        if len(self.palette) != 4:
            raise InvalidConfig("palette needs one rank tuple per configuration type")
        if self.participants_per_round is not None and self.participants_per_round < 1:
            raise InvalidConfig("participants_per_round must be positive")
        if self.num_holdout_clients < 0 or self.zeroshot_pool_size < 0:
            raise InvalidConfig("holdout and zero-shot pool sizes must be non-negative")
        for name in ("participants_per_round", "train_pool_size", "loss_threshold", "threshold_progress"):
            value = getattr(self, name)
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise InvalidConfig(f"{name} must be a number or none, got {value!r}")
        if self.threshold_progress is not None and not 0 < self.threshold_progress <= 1:
            raise InvalidConfig("threshold_progress must lie in (0, 1]")
        if self.loss_threshold is not None and self.threshold_progress is not None:
            raise InvalidConfig("set at most one of loss_threshold and threshold_progress")
        get_distribution(self.distribution)

    def palette_map(self) -> dict[int, tuple[int, ...]]:
        return {t: tuple(r) for t, r in zip(CONFIG_TYPES, self.palette)}

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RoundReport:
    round: int
    strategy: str
    participants: list[int]
    ranks: dict[int, tuple[int, ...]]
    train_loss: float
    val_loss: float
    zeroshot_loss: float
    zeroshot_clients: list[int]
    spectra: list[np.ndarray]
    error_ratios: list[np.ndarray]
    # per participant, per layer: ||compose(received) - global delta||_F at distribution
    phi: dict[int, list[float]]
    trainable_fraction: float
    cost_per_round: float
    distributed_delta: list[np.ndarray]
    global_delta: list[np.ndarray]
    contributions: list[Contribution] = field(repr=False, default_factory=list)


@dataclass(frozen=True)
class RoundState:
    round: int = 0
    global_delta: Optional[GlobalDelta] = None
    global_factors: Optional[tuple[FactorPair, ...]] = None
    svd_cache: Optional[tuple[SvdFactors, ...]] = None
    trained: frozenset = frozenset()
    # HETLORA only: ranks after self-pruning
    client_ranks: tuple = ()

    def composed(self) -> Optional[list[np.ndarray]]:
        if self.global_delta is not None:
            return list(self.global_delta.layers)
        if self.global_factors is not None:
            return [g.compose() for g in self.global_factors]
        return None


def _concat(batches: Sequence[Batch]) -> Batch:
    return Batch(np.vstack([b.inputs for b in batches]), np.vstack([b.targets for b in batches]))


def _mean_loss(bases, deltas, batch: Batch) -> float:
    weights = [b + d for b, d in zip(bases, deltas)]
    resid = _activations(weights, batch.inputs)[-1] - batch.targets
    return 0.5 * float(np.sum(resid * resid)) / len(batch)


def mean_teacher_delta(world: World) -> list[np.ndarray]:
    """Per-layer delta averaged over archetypes, weighted by how often each is held."""
    share = world.proportions.mean(axis=0)
    return [
        world.shared[li] + sum(w * world.specific[t][li] for t, w in enumerate(share))
        for li in range(len(world.bases))
    ]


def _full(ds: ClientDataset) -> Batch:
    return _concat([ds.train, ds.val, ds.test])


class Simulation:
    """Static part of one federated run: world, profiles, data, populations."""

    def __init__(self, cfg: FedConfig, world: World):
        cfg.validate()
        self.cfg = cfg
        self.world = world
        self.shapes = [LayerShape(*b.shape) for b in world.bases]
        n = world.num_clients
        order = np.random.default_rng([cfg.seed, 11]).permutation(n)
        if cfg.num_holdout_clients >= n:
            raise InvalidConfig("holdout population leaves no training clients")
        self.holdout = sorted(int(c) for c in order[: cfg.num_holdout_clients])
        pool = [int(c) for c in order[cfg.num_holdout_clients :]]
        if cfg.train_pool_size is not None:
            if not 1 <= cfg.train_pool_size <= len(pool):
                raise InvalidConfig(f"train_pool_size must lie in [1, {len(pool)}]")
            pool = pool[: cfg.train_pool_size]
        self.train_pool = sorted(pool)

        palette = cfg.palette_map()
        for ranks in palette.values():
            if len(ranks) != len(self.shapes):
                raise InvalidConfig("palette rank tuples must have one rank per layer")
            for r, s in zip(ranks, self.shapes):
                if not 1 <= r <= s.max_rank:
                    raise InvalidConfig(f"palette rank {r} does not fit layer {s}")
        profiles = assign_resources(
            get_distribution(cfg.distribution), list(range(n)), [cfg.seed, 12], palette,
            world.sample_counts, cfg.optimizer.kind,
        )
        if cfg.bucket:
            floor = tuple(min(p.ranks[li] for p in profiles if p.client_id in set(self.train_pool))
                          for li in range(len(self.shapes)))
            profiles = [dataclasses.replace(p, ranks=floor) for p in profiles]
        self.profiles = {p.client_id: p for p in profiles}

        if cfg.participants_per_round is not None:
            self.per_round = min(cfg.participants_per_round, len(self.train_pool))
        else:
            self.per_round = math.ceil(cfg.participation_rate * len(self.train_pool))

        self._data: dict[int, ClientDataset] = {}
        self.val_batch = _concat([self.dataset(c).val for c in self.train_pool])
        if cfg.loss_threshold is not None:
            self.threshold = float(cfg.loss_threshold)
        elif cfg.threshold_progress is not None:
            start = _mean_loss(world.bases, [np.zeros_like(b) for b in world.bases], self.val_batch)
            ref = _mean_loss(world.bases, mean_teacher_delta(world), self.val_batch)
            self.threshold = start - cfg.threshold_progress * (start - ref)
        else:
            self.threshold = 1.5 * world.noise_floor()
        rng = np.random.default_rng([cfg.seed, 13])
        self.init_down = [rng.standard_normal((s.max_rank, s.in_dim)) for s in self.shapes]

    def dataset(self, cid: int) -> ClientDataset:
        if cid not in self._data:
            self._data[cid] = gen_client_dataset(self.world, cid)
        return self._data[cid]

    def check_strategy(self) -> None:
        if self.cfg.strategy != "naive":
            return
        ranks = {self.profiles[c].ranks for c in self.train_pool}
        if len(ranks) > 1:
            raise HeterogeneousRanksUnsupported(
                f"naive aggregation with heterogeneous rank budgets {sorted(ranks)}; "
                "use a point-mass distribution or bucket=true"
            )

    def initial_adapters(self, ranks: Sequence[int]) -> list[LoraAdapter]:
        s = self.cfg.scaling
        return [
            LoraAdapter(np.zeros((shape.out_dim, r)), g[:r] / np.sqrt(shape.in_dim), s)
            for shape, g, r in zip(self.shapes, self.init_down, ranks)
        ]

    def initial_state(self) -> RoundState:
        return RoundState(client_ranks=tuple(sorted((c, p.ranks) for c, p in self.profiles.items())))

    def base_params(self) -> int:
        return sum(s.base_params for s in self.shapes)


def _pad_pair(g: FactorPair, r: int) -> FactorPair:
    have = g.up.shape[1]
    if r <= have:
        return g
    return FactorPair(np.pad(g.up, ((0, 0), (0, r - have))), np.pad(g.down, ((0, r - have), (0, 0))), g.scaling)


def _received(sim: Simulation, state: RoundState, ranks: Sequence[int]) -> list[LoraAdapter]:
    cfg = sim.cfg
    if state.round == 0 or state.composed() is None:
        return sim.initial_adapters(ranks)
    if cfg.strategy == "flexlora":
        return [adapter_from_factors(f, r, cfg.scaling) for f, r in zip(state.svd_cache, ranks)]
    if cfg.strategy == "naive":
        for g, r in zip(state.global_factors, ranks):
            if g.up.shape[1] != r:
                raise HeterogeneousRanksUnsupported(f"client rank {r} vs global rank {g.up.shape[1]}")
        return distribute_factors(state.global_factors, ranks)
    pairs = [_pad_pair(g, r) for g, r in zip(state.global_factors, ranks)]
    return distribute_factors(pairs, ranks)


def _learning_rate(cfg: FedConfig, round_index: int) -> float:
    lr = cfg.optimizer.learning_rate
    if cfg.lr_decay and cfg.max_rounds > 0:
        lr *= max(0.0, 1.0 - round_index / cfg.max_rounds)
    return lr


def run_round(sim: Simulation, state: RoundState, round_seed=None) -> tuple[RoundReport, RoundState]:
    """One synchronous FL round: sample, distribute, train locally, aggregate, evaluate."""
    cfg = sim.cfg
    sim.check_strategy()
    t = state.round
    seed = [cfg.seed, t] if round_seed is None else round_seed
    seed = list(np.atleast_1d(seed))
    rng = np.random.default_rng(seed + [1])
    participants = sorted(int(c) for c in rng.choice(sim.train_pool, size=sim.per_round, replace=False))

    current_ranks = dict(state.client_ranks)
    prev = state.composed()
    distributed = prev if prev is not None else [np.zeros((s.out_dim, s.in_dim)) for s in sim.shapes]
    opt = dataclasses.replace(cfg.optimizer, learning_rate=_learning_rate(cfg, t))
    if cfg.strategy == "hetlora":
        opt = dataclasses.replace(opt, l2_adapter_penalty=cfg.hetlora_l2)
    model = ToyModel(sim.world.bases)

    contribs, ranks, phi, train_losses = [], {}, {}, []
    adapter_params = []
    for cid in participants:
        r = tuple(current_ranks[cid])
        ranks[cid] = r
        received = _received(sim, state, r)
        phi[cid] = [frobenius_norm(compose(a) - w) for a, w in zip(received, distributed)]
        adapter_params.append(sum(s.adapter_params(ri) for s, ri in zip(sim.shapes, r)))
        data = sim.dataset(cid)
        trained, final = local_update(model, received, data.train, opt, seed + [2, cid])
        if cfg.strategy == "hetlora":
            trained = [hetlora_prune(a, cfg.hetlora_decay) for a in trained]
            current_ranks[cid] = tuple(a.rank for a in trained)
        train_losses.append(final)
        contribs.append(Contribution(cid, tuple(trained), sim.profiles[cid].sample_count))

    if cfg.strategy == "flexlora":
        delta = aggregate_flexlora(contribs)
        factors = tuple(delta.factors())
        new_state = dataclasses.replace(state, global_delta=delta, svd_cache=factors)
        composed = list(delta.layers)
    else:
        pairs = aggregate_naive(contribs) if cfg.strategy == "naive" else aggregate_hetlora(contribs)
        composed = [g.compose() for g in pairs]
        factors = tuple(svd(w) for w in composed)
        new_state = dataclasses.replace(state, global_factors=tuple(pairs))
    trained_set = state.trained | set(participants)
    new_state = dataclasses.replace(
        new_state, round=t + 1, trained=frozenset(trained_set),
        client_ranks=tuple(sorted(current_ranks.items())),
    )

    bases = sim.world.bases
    val = _mean_loss(bases, composed, sim.val_batch)
    zeroshot, zs_clients = _zeroshot(sim, composed, factors, seed, trained_set)
    fraction = float(np.mean(adapter_params)) / sim.base_params()
    report = RoundReport(
        round=t,
        strategy=cfg.strategy,
        participants=participants,
        ranks=ranks,
        train_loss=float(np.mean(train_losses)),
        val_loss=val,
        zeroshot_loss=zeroshot,
        zeroshot_clients=zs_clients,
        spectra=[f.sigma.copy() for f in factors],
        error_ratios=[error_ratios(f) for f in factors],
        phi=phi,
        trainable_fraction=fraction,
        cost_per_round=1.0 + fraction,
        distributed_delta=[w.copy() for w in distributed],
        global_delta=composed,
        contributions=contribs,
    )
    return report, new_state


def _zeroshot(sim: Simulation, composed, factors, seed, trained) -> tuple[float, list[int]]:
    """Loss on a fresh pool of clients that have not trained so far in this run."""
    count = sim.cfg.zeroshot_pool_size
    remaining = sim.world.num_clients - len(trained)
    pool = unseen_pool(sim.world, min(count, remaining), seed + [3], trained)
    if not pool:
        return float("nan"), []
    return evaluate_clients(sim, composed, factors, pool), pool


def evaluate_clients(sim: Simulation, composed, factors, clients: Sequence[int]) -> float:
    """Sample-weighted loss of the global delta over every sample of ``clients``.

    With ``zeroshot_budgeted`` each client sees the global delta truncated to
    its own rank budget instead of the full-rank delta.
    """
    bases = sim.world.bases
    if not sim.cfg.zeroshot_budgeted:
        return _mean_loss(bases, composed, _concat([_full(sim.dataset(c)) for c in clients]))
    total, count = 0.0, 0
    for c in clients:
        batch = _full(sim.dataset(c))
        deltas = [truncate(f, r) for f, r in zip(factors, sim.profiles[c].ranks)]
        total += _mean_loss(bases, deltas, batch) * len(batch)
        count += len(batch)
    return total / count


class EarlyStopper:
    """Stop once the monitored loss fails to improve for ``patience`` consecutive rounds."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class ExperimentResult:
    config: FedConfig
    reports: list[RoundReport]
    stopped_round: int
    threshold: float
    rounds_to_threshold: Optional[int]
    total_cost: float
    # summed per-round cost up to and including the threshold round
    cost_to_threshold: Optional[float]
    final_zeroshot_loss: float
    final_val_loss: float

    @property
    def cost_per_round(self) -> float:
        if not self.reports:
            return 0.0
        return self.total_cost / len(self.reports)


def run_experiment(cfg: FedConfig, world: World) -> ExperimentResult:
    sim = Simulation(cfg, world)
    state = sim.initial_state()
    stopper = EarlyStopper(cfg.early_stop_patience)
    reports: list[RoundReport] = []
    reached = None
    for _ in range(cfg.max_rounds):
        report, state = run_round(sim, state)
        reports.append(report)
        if reached is None and report.val_loss <= sim.threshold:
            reached = len(reports)
        if stopper.update(report.val_loss):
            break
    composed = state.composed()
    if composed is None:
        composed = [np.zeros_like(b) for b in world.bases]
    final_zs = evaluate_clients(sim, composed, [svd(w) for w in composed], sim.holdout) if sim.holdout else float("nan")
    return ExperimentResult(
        config=cfg,
        reports=reports,
        stopped_round=len(reports),
        threshold=sim.threshold,
        rounds_to_threshold=reached,
        total_cost=float(sum(r.cost_per_round for r in reports)),
        cost_to_threshold=(None if reached is None
                           else float(sum(r.cost_per_round for r in reports[:reached]))),
        final_zeroshot_loss=final_zs,
        final_val_loss=reports[-1].val_loss if reports else _mean_loss(world.bases, composed, sim.val_batch),
    )


def scaling_law(eps, a1, a2, a3):
    """Client count predicted from a generalisation loss: ``a1 / eps^2 * (a2 - log(eps - a3))``."""
    eps = np.asarray(eps, dtype=np.float64)
    return a1 / eps ** 2 * (a2 - np.log(eps - a3))


@dataclass
class ScalingResult:
    pool_sizes: list[int]
    losses: dict[int, list[float]]
    mean_losses: list[float]
    fit: Optional[tuple[float, float, float]]
    residuals: Optional[list[float]]


def fit_scaling_law(sizes: Sequence[int], losses: Sequence[float]):
    """Least-squares fit of the client-count law; relative residuals in client count."""
    c = np.asarray(sizes, dtype=np.float64)
    eps = np.asarray(losses, dtype=np.float64)
    floor = float(eps.min())
    span = max(float(eps.max() - eps.min()), 1e-6)

    def resid(theta):
        a1, a2, a3 = theta
        return (scaling_law(eps, a1, a2, a3) - c) / c

    x0 = np.array([float(np.mean(c * eps ** 2)), 1.0, floor - span])
    hi_a3 = floor - 1e-9 * max(abs(floor), 1.0)
    sol = least_squares(resid, x0, bounds=([-np.inf, -np.inf, -np.inf], [np.inf, np.inf, hi_a3]))
    return tuple(float(v) for v in sol.x), [float(r) for r in resid(sol.x)]


def client_scaling_experiment(
    world: World,
    pool_sizes: Sequence[int] = (10, 50, 100),
    seeds: Sequence[int] = (0, 1, 2),
    cfg: FedConfig | None = None,
    participants: int = 10,
) -> ScalingResult:
    """Train on nested client subsets of growing size with a fixed per-round participant count."""
    base = cfg or FedConfig()
    losses: dict[int, list[float]] = {}
    for size in pool_sizes:
        losses[int(size)] = []
        for seed in seeds:
            run_cfg = dataclasses.replace(base, seed=int(seed), train_pool_size=int(size),
                                          participants_per_round=min(participants, int(size)))
            losses[int(size)].append(run_experiment(run_cfg, world).final_zeroshot_loss)
    sizes = [int(s) for s in pool_sizes]
    means = [float(np.mean(losses[s])) for s in sizes]
    fit = residuals = None
    if len(set(sizes)) >= 2:
        fit, residuals = fit_scaling_law(sizes, means)
    return ScalingResult(sizes, losses, means, fit, residuals)
