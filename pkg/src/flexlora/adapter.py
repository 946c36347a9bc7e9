"""LoRA adapters: composition into a full-size delta and SVD-based decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMatrix, RankOutOfRange, ShapeMismatch
from .lowrank import SvdFactors, as_matrix, svd

# Test hook used by ``flexlora verify --inject-fault``: flips the sign of the
# decomposed up-projection so the roundtrip invariant must fail.
_FAULT_FLIP_SIGN = False


@dataclass(frozen=True)
class LayerShape:
    out_dim: int
    in_dim: int

    def __post_init__(self):
        if self.out_dim < 1 or self.in_dim < 1:
            raise ShapeMismatch(f"layer dimensions must be positive, got {self}")

    @property
    def max_rank(self) -> int:
        return min(self.out_dim, self.in_dim)

    def adapter_params(self, rank: int) -> int:
        return rank * (self.out_dim + self.in_dim)

    @property
    def base_params(self) -> int:
        return self.out_dim * self.in_dim


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank delta ``scaling * up @ down`` for one layer.

    ``up`` is d x r and ``down`` is r x p. Instances are treated as immutable;
    optimisers build new adapters rather than editing arrays in place.
    """

    up: np.ndarray
    down: np.ndarray
    scaling: float = 1.0

    def __post_init__(self):
        up = as_matrix(self.up, "up")
        down = as_matrix(self.down, "down")
        if up.shape[1] != down.shape[0]:
            raise ShapeMismatch(f"up {up.shape} and down {down.shape} disagree on rank")
        if not self.scaling > 0:
            raise InvalidMatrix(f"scaling must be positive, got {self.scaling}")
        if up.shape[1] > min(up.shape[0], down.shape[1]):
            raise RankOutOfRange(
                f"rank {up.shape[1]} exceeds min(d, p) = {min(up.shape[0], down.shape[1])}"
            )
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "scaling", float(self.scaling))

    @property
    def rank(self) -> int:
        return self.up.shape[1]

    @property
    def shape(self) -> LayerShape:
        return LayerShape(self.up.shape[0], self.down.shape[1])

    @property
    def num_params(self) -> int:
        return self.up.size + self.down.size

    def with_factors(self, up: np.ndarray, down: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(up, down, self.scaling)


def compose(a: LoraAdapter) -> np.ndarray:
    """Full-size delta ``s * B @ A``."""
    return a.scaling * (a.up @ a.down)


def _check_rank(r: int, shape: tuple[int, int]) -> int:
    if isinstance(r, bool) or int(r) != r or not 1 <= r <= min(shape):
        raise RankOutOfRange(f"rank {r} outside [1, {min(shape)}] for layer {shape}")
    return int(r)


def adapter_from_factors(f: SvdFactors, r: int, s: float = 1.0) -> LoraAdapter:
    """Rank-``r`` adapter whose composition is the rank-``r`` truncation of ``f``.

    The singular values ride on the up-projection divided by ``s`` so that
    the scaling cancels on composition.
    """
    r = _check_rank(r, f.shape)
    if not s > 0:
        raise InvalidMatrix(f"scaling must be positive, got {s}")
    up = f.u[:, :r] * (f.sigma[:r] / s)
    if _FAULT_FLIP_SIGN:
        up = -up
    down = f.v[:, :r].T.copy()
    return LoraAdapter(up, down, s)


def decompose(w_g, r: int, s: float = 1.0) -> LoraAdapter:
    w_g = as_matrix(w_g, "w_g")
    _check_rank(r, w_g.shape)
    return adapter_from_factors(svd(w_g), r, s)


def init_adapter(shape: LayerShape, rank: int, rng: np.random.Generator, s: float = 1.0) -> LoraAdapter:
    """Zero-delta start: ``B = 0`` and ``A`` Gaussian with entry variance ``1/in_dim``."""
    rank = _check_rank(rank, (shape.out_dim, shape.in_dim))
    down = rng.standard_normal((rank, shape.in_dim)) / np.sqrt(shape.in_dim)
    return LoraAdapter(np.zeros((shape.out_dim, rank)), down, s)
