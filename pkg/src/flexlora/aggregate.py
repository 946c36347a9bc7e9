"""Server-side aggregation of client adapters.

Three strategies are provided:

* naive factor averaging (FedAvg / FedIT style): average ``B`` and ``A``
  elementwise. Only defined when every client trains the same rank.
* FlexLoRA: compose every client's full-size delta, average those with
  sample-count weights, SVD the result once and hand each client the
  truncation that fits its rank budget.
* HETLORA: zero-pad factors up to the largest rank, average elementwise and
  give each client the leading columns/rows it can hold.

All reductions run over contributions sorted by ``client_id`` so the output
does not depend on the order in which clients reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .adapter import LoraAdapter, adapter_from_factors, compose
from .errors import (
    HeterogeneousRanksUnsupported,
    InvalidDecay,
    NoContributions,
    RankOutOfRange,
    ShapeMismatch,
)
from .lowrank import SvdFactors, svd, weighted_sum


@dataclass(frozen=True)
class Contribution:
    client_id: Hashable
    adapters: tuple[LoraAdapter, ...]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        object.__setattr__(self, "adapters", tuple(self.adapters))


@dataclass(frozen=True)
class GlobalDelta:
    """Aggregated full-size delta per tunable layer."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def factors(self) -> list[SvdFactors]:
        return [svd(w) for w in self.layers]


@dataclass(frozen=True)
class FactorPair:
    """Global up/down factors produced by naive and HETLORA aggregation."""

    up: np.ndarray
    down: np.ndarray
    scaling: float = 1.0

    def compose(self) -> np.ndarray:
        return self.scaling * (self.up @ self.down)


def _sorted(contribs: Sequence[Contribution]) -> list[Contribution]:
    if not contribs:
        raise NoContributions("aggregation needs at least one contribution")
    ordered = sorted(contribs, key=lambda c: c.client_id)
    nlayers = len(ordered[0].adapters)
    ref = [a.shape for a in ordered[0].adapters]
    for c in ordered[1:]:
        if len(c.adapters) != nlayers or [a.shape for a in c.adapters] != ref:
            raise ShapeMismatch(f"client {c.client_id!r} layer shapes differ from client "
                                f"{ordered[0].client_id!r}")
    return ordered


def aggregation_weights(contribs: Sequence[Contribution]) -> np.ndarray:
    """Sample-count weights ``n_i / sum_j n_j`` in sorted-client order."""
    counts = np.array([c.sample_count for c in _sorted(contribs)], dtype=np.float64)
    return counts / counts.sum()


def aggregate_flexlora(contribs: Sequence[Contribution]) -> GlobalDelta:
    ordered = _sorted(contribs)
    gamma = aggregation_weights(ordered)
    layers = []
    for li in range(len(ordered[0].adapters)):
        layers.append(weighted_sum([compose(c.adapters[li]) for c in ordered], gamma))
    return GlobalDelta(layers)


def redistribute(
    delta: GlobalDelta,
    ranks: Mapping[Hashable, Sequence[int]],
    s: float = 1.0,
    factors: Sequence[SvdFactors] | None = None,
) -> dict[Hashable, list[LoraAdapter]]:
    """Hand every client the rank-``r_i`` truncation of the global delta.

    The SVD of each layer is computed once (or taken from ``factors``) and
    then sliced per client.
    """
    if factors is None:
        factors = delta.factors()
    out: dict[Hashable, list[LoraAdapter]] = {}
    for cid in sorted(ranks):
        budget = ranks[cid]
        if len(budget) != len(factors):
            raise ShapeMismatch(f"client {cid!r} has {len(budget)} ranks for {len(factors)} layers")
        out[cid] = [adapter_from_factors(f, r, s) for f, r in zip(factors, budget)]
    return out


def aggregate_naive(contribs: Sequence[Contribution]) -> list[FactorPair]:
    ordered = _sorted(contribs)
    for li in range(len(ordered[0].adapters)):
        ranks = {c.adapters[li].rank for c in ordered}
        if len(ranks) > 1:
            raise HeterogeneousRanksUnsupported(
                f"layer {li}: naive averaging needs identical ranks, got {sorted(ranks)}"
            )
    gamma = aggregation_weights(ordered)
    out = []
    for li in range(len(ordered[0].adapters)):
        ups = [c.adapters[li].up for c in ordered]
        downs = [c.adapters[li].down for c in ordered]
        out.append(FactorPair(weighted_sum(ups, gamma), weighted_sum(downs, gamma),
                              ordered[0].adapters[li].scaling))
    return out


def _pad(m: np.ndarray, size: int, axis: int) -> np.ndarray:
    missing = size - m.shape[axis]
    if missing == 0:
        return m
    widths = [(0, 0), (0, 0)]
    widths[axis] = (0, missing)
    return np.pad(m, widths)


def aggregate_hetlora(contribs: Sequence[Contribution]) -> list[FactorPair]:
    """Zero-pad every client's factors to the largest rank and average."""
    ordered = _sorted(contribs)
    gamma = aggregation_weights(ordered)
    out = []
    for li in range(len(ordered[0].adapters)):
        r_max = max(c.adapters[li].rank for c in ordered)
        ups = [_pad(c.adapters[li].up, r_max, 1) for c in ordered]
        downs = [_pad(c.adapters[li].down, r_max, 0) for c in ordered]
        out.append(FactorPair(weighted_sum(ups, gamma), weighted_sum(downs, gamma),
                              ordered[0].adapters[li].scaling))
    return out


def distribute_factors(global_factors: Sequence[FactorPair], ranks: Sequence[int]) -> list[LoraAdapter]:
    """Leading ``r`` columns of ``B_g`` and rows of ``A_g`` for each layer."""
    out = []
    for g, r in zip(global_factors, ranks):
        if not 1 <= r <= g.up.shape[1]:
            raise RankOutOfRange(f"rank {r} outside [1, {g.up.shape[1]}] of the global factors")
        out.append(LoraAdapter(g.up[:, :r].copy(), g.down[:r, :].copy(), g.scaling))
    return out


def pruned_rank(adapter: LoraAdapter, decay: float) -> int:
    """Smallest rank whose leading components hold ``decay`` of the delta's energy."""
    if not 0.0 < decay <= 1.0:
        raise InvalidDecay(f"decay must lie in (0, 1], got {decay}")
    sigma = svd(compose(adapter)).sigma[: adapter.rank]
    energy = sigma * sigma
    total = float(energy.sum())
    if total == 0.0:
        return 1
    cumulative = np.cumsum(energy)
    # relative slack keeps decay=1.0 from tripping on the last rounding bit
    hit = np.flatnonzero(cumulative >= decay * total * (1.0 - 1e-12))
    return max(1, int(hit[0]) + 1)


def hetlora_prune(adapter: LoraAdapter, decay: float) -> LoraAdapter:
    """Shrink an adapter to the rank holding ``decay`` of its spectral energy.

    Returns the adapter unchanged when no rank can be dropped, otherwise the
    best approximation at the reduced rank.
    """
    r = pruned_rank(adapter, decay)
    if r >= adapter.rank:
        return adapter
    return adapter_from_factors(svd(compose(adapter)), r, adapter.scaling)
