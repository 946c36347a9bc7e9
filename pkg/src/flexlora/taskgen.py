"""Synthetic federated world: frozen bases, low-rank task teachers, client data.

Every archetype's teacher is the frozen base network plus a per-layer delta
``shared + specific[t]``, both exact low-rank products of seeded Gaussians.
In ``meta`` mode each client holds a single archetype; in ``mixture`` mode a
client draws per-sample archetypes from its own Dirichlet proportions.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DatasetTooSmall, InvalidConfig, PoolExhausted
from .simmodel import Batch, _activations
from .util import stable_hash

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    num_clients: int = 240
    num_task_archetypes: int = 8
    layer_dims: tuple[int, ...] = (32, 32, 16)
    shared_rank: int = 6
    # rank of each archetype's own component; an int applies to all archetypes
    teacher_rank: int | tuple[int, ...] = 2
    shared_scale: float = 1.0
    specific_scale: float = 0.3
    noise_sigma: float = 0.1
    samples_per_client: tuple[int, int] = (40, 120)
    dirichlet_alpha: float = 0.5
    mode: str = "meta"
    seed: int = 0

    def specific_ranks(self) -> tuple[int, ...]:
        if isinstance(self.teacher_rank, int):
            return (self.teacher_rank,) * self.num_task_archetypes
        return tuple(self.teacher_rank)

    def validate(self) -> None:
        if self.num_clients < 1:
            raise InvalidConfig("num_clients must be positive")
        if not 1 <= self.num_task_archetypes <= self.num_clients:
            raise InvalidConfig("need 1 <= num_task_archetypes <= num_clients")
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise InvalidConfig("layer_dims needs at least an input and an output width")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be non-negative")
        if self.mode not in ("meta", "mixture"):
            raise InvalidConfig(f"mode must be 'meta' or 'mixture', got {self.mode!r}")
        if self.dirichlet_alpha <= 0:
            raise InvalidConfig("dirichlet_alpha must be positive")
        lo, hi = self.samples_per_client
        if not 10 <= lo <= hi:
            raise InvalidConfig("samples_per_client must satisfy 10 <= low <= high")
        ranks = self.specific_ranks()
        if len(ranks) != self.num_task_archetypes:
            raise InvalidConfig("teacher_rank tuple must list one rank per archetype")
        smallest = min(min(o, i) for o, i in self.layer_shapes())
        if self.shared_rank < 0 or min(ranks) < 0 or self.shared_rank + max(ranks) > smallest:
            raise InvalidConfig(f"shared_rank + teacher_rank must lie in [0, {smallest}]")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = self.layer_dims
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class World:
    config: WorldConfig
    bases: tuple[np.ndarray, ...]
    shared: tuple[np.ndarray, ...]
    specific: tuple[tuple[np.ndarray, ...], ...]  # [archetype][layer]
    proportions: np.ndarray  # num_clients x archetypes; one-hot in meta mode
    sample_counts: np.ndarray

    @property
    def num_clients(self) -> int:
        return self.config.num_clients

    def archetype(self, client_id: int) -> int:
        """Dominant archetype of a client (its only one in meta mode)."""
        return int(np.argmax(self.proportions[client_id]))

    def teacher_deltas(self, t: int) -> list[np.ndarray]:
        return [s + x for s, x in zip(self.shared, self.specific[t])]

    def teacher_weights(self, t: int) -> list[np.ndarray]:
        return [b + d for b, d in zip(self.bases, self.teacher_deltas(t))]

    def teacher_forward(self, t: int, x: np.ndarray) -> np.ndarray:
        return _activations(self.teacher_weights(t), x)[-1]

    def noise_floor(self) -> float:
        """Expected per-sample loss ``0.5 * ||noise||^2`` of a perfect predictor."""
        return 0.5 * self.config.noise_sigma ** 2 * self.config.layer_dims[-1]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Batch
    val: Batch
    test: Batch
    archetype: int
    sample_count: int


def _low_rank(rng: np.random.Generator, shape: tuple[int, int], rank: int, scale: float) -> np.ndarray:
    d, p = shape
    if rank == 0:
        return np.zeros(shape)
    left = rng.standard_normal((d, rank))
    right = rng.standard_normal((rank, p))
    return scale * (left @ right) / np.sqrt(rank * p)


def gen_world(cfg: WorldConfig) -> World:
    cfg.validate()
    shapes = cfg.layer_shapes()
    rng_base = np.random.default_rng([cfg.seed, 0])
    bases = tuple(rng_base.standard_normal(s) / np.sqrt(s[1]) for s in shapes)
    rng_shared = np.random.default_rng([cfg.seed, 1])
    shared = tuple(_low_rank(rng_shared, s, cfg.shared_rank, cfg.shared_scale) for s in shapes)
    specific = []
    for t, r in enumerate(cfg.specific_ranks()):
        rng_t = np.random.default_rng([cfg.seed, 2, t])
        specific.append(tuple(_low_rank(rng_t, s, r, cfg.specific_scale) for s in shapes))

    T = cfg.num_task_archetypes
    rng_assign = np.random.default_rng([cfg.seed, 3])
    if cfg.mode == "meta":
        # every archetype appears at least once, the rest are uniform draws
        labels = np.concatenate([np.arange(T), rng_assign.integers(0, T, cfg.num_clients - T)])
        labels = rng_assign.permutation(labels)
        proportions = np.eye(T)[labels]
    else:
        proportions = rng_assign.dirichlet(np.full(T, cfg.dirichlet_alpha), size=cfg.num_clients)
    lo, hi = cfg.samples_per_client
    counts = np.random.default_rng([cfg.seed, 4]).integers(lo, hi + 1, cfg.num_clients)
    return World(cfg, bases, shared, tuple(specific), proportions, counts)


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 split; validation and test get the floor, train takes the remainder."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/val/test index sets in 8:1:1 proportion."""
    perm = rng.permutation(n)
    n_train, n_val, _ = split_sizes(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def gen_client_dataset(world: World, client_id: int, n: int | None = None) -> ClientDataset:
    if not 0 <= client_id < world.num_clients:
        raise InvalidConfig(f"client {client_id} outside world of {world.num_clients} clients")
    n = int(world.sample_counts[client_id]) if n is None else int(n)
    if n < 10:
        raise DatasetTooSmall(f"client {client_id}: need at least 10 samples, got {n}")
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 5, client_id, n])
    x = rng.standard_normal((n, cfg.layer_dims[0]))
    props = world.proportions[client_id]
    if cfg.mode == "meta":
        labels = np.full(n, int(np.argmax(props)))
    else:
        labels = rng.choice(len(props), size=n, p=props)
    y = np.empty((n, cfg.layer_dims[-1]))
    for t in np.unique(labels):
        rows = labels == t
        y[rows] = world.teacher_forward(int(t), x[rows])
    if cfg.noise_sigma > 0:
        y = y + cfg.noise_sigma * rng.standard_normal(y.shape)
    tr, va, te = split_indices(n, rng)
    full = Batch(x, y)
    return ClientDataset(client_id, full.take(tr), full.take(va), full.take(te),
                         world.archetype(client_id), n)


def unseen_pool(world: World, count: int, seed, trained: Iterable[int] = ()) -> list[int]:
    """Sample ``count`` clients that never took part in training."""
    if count < 0:
        raise InvalidConfig("count must be non-negative")
    seen = set(trained)
    candidates = np.array([c for c in range(world.num_clients) if c not in seen], dtype=np.int64)
    if count > candidates.size:
        raise PoolExhausted(f"asked for {count} unseen clients, only {candidates.size} remain")
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(candidates, size=count, replace=False))


def save_world(world: World, path) -> None:
    """Write a replayable snapshot: JSON header plus every array of the world."""
    header = {
        "version": SNAPSHOT_VERSION,
        "config": world.config.as_dict(),
        "config_hash": stable_hash(world.config.as_dict()),
    }
    arrays = {"proportions": world.proportions, "sample_counts": world.sample_counts}
    for li, (b, s) in enumerate(zip(world.bases, world.shared)):
        arrays[f"base_{li}"] = b
        arrays[f"shared_{li}"] = s
    for t, layers in enumerate(world.specific):
        for li, m in enumerate(layers):
            arrays[f"specific_{t}_{li}"] = m
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_world(path) -> World:
    with np.load(Path(path)) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != SNAPSHOT_VERSION:
            raise InvalidConfig(f"unsupported world snapshot version {header.get('version')}")
        raw = header["config"]
        for key in ("layer_dims", "samples_per_client"):
            raw[key] = tuple(raw[key])
        if isinstance(raw["teacher_rank"], list):
            raw["teacher_rank"] = tuple(raw["teacher_rank"])
        cfg = WorldConfig(**raw)
        if stable_hash(cfg.as_dict()) != header["config_hash"]:
            raise InvalidConfig("world snapshot config hash mismatch")
        nl = len(cfg.layer_shapes())
        bases = tuple(data[f"base_{i}"] for i in range(nl))
        shared = tuple(data[f"shared_{i}"] for i in range(nl))
        specific = tuple(
            tuple(data[f"specific_{t}_{i}"] for i in range(nl))
            for t in range(cfg.num_task_archetypes)
        )
        return World(cfg, bases, shared, specific, data["proportions"], data["sample_counts"])
