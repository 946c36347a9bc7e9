"""Toy stand-in for a frozen network with LoRA adapters.

Each layer computes ``h = (W0 + s B A) x``; ``tanh`` sits between layers and
the last layer is linear. Samples are stored as rows, so a layer acts as
``H @ (W0 + s B A).T`` on a batch ``H``.

Gradients are derived by hand and only flow into adapter factors; base
weights never change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapter import LoraAdapter, LayerShape, compose
from .errors import EmptyBatch, ShapeMismatch
from .lowrank import as_matrix


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"inputs {x.shape} and targets {y.shape} do not pair up")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass(frozen=True)
class ToyModel:
    bases: tuple[np.ndarray, ...]
    adapters: tuple[Optional[LoraAdapter], ...] = ()

    def __post_init__(self):
        bases = tuple(as_matrix(b, f"bases[{i}]") for i, b in enumerate(self.bases))
        adapters = tuple(self.adapters) or (None,) * len(bases)
        if len(adapters) != len(bases):
            raise ShapeMismatch(f"{len(adapters)} adapters for {len(bases)} layers")
        for i in range(1, len(bases)):
            if bases[i].shape[1] != bases[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} expects width {bases[i].shape[1]}, "
                                    f"previous layer gives {bases[i - 1].shape[0]}")
        for i, (b, a) in enumerate(zip(bases, adapters)):
            if a is not None and (a.up.shape[0], a.down.shape[1]) != b.shape:
                raise ShapeMismatch(f"adapter {i} does not fit base of shape {b.shape}")
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "adapters", adapters)

    @property
    def shapes(self) -> list[LayerShape]:
        return [LayerShape(*b.shape) for b in self.bases]

    def with_adapters(self, adapters: Sequence[Optional[LoraAdapter]]) -> "ToyModel":
        return ToyModel(self.bases, tuple(adapters))

    def with_deltas(self, deltas: Sequence[Optional[np.ndarray]]) -> "DeltaModel":
        return DeltaModel(self.bases, tuple(deltas))

    def effective_weights(self) -> list[np.ndarray]:
        return [b if a is None else b + compose(a) for b, a in zip(self.bases, self.adapters)]


@dataclass(frozen=True)
class DeltaModel:
    """Frozen bases plus dense deltas; used to evaluate an aggregated global delta."""

    bases: tuple[np.ndarray, ...]
    deltas: tuple[Optional[np.ndarray], ...]

    def effective_weights(self) -> list[np.ndarray]:
        return [b if d is None else b + d for b, d in zip(self.bases, self.deltas)]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 4
    l2_adapter_penalty: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.l2_adapter_penalty < 0:
            raise ValueError("l2_adapter_penalty must be non-negative")


def _activations(weights: Sequence[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Layer inputs followed by the final output: ``[x, h1, ..., y_hat]``."""
    if x.ndim != 2 or x.shape[1] != weights[0].shape[1]:
        raise ShapeMismatch(f"input of shape {x.shape} does not match first layer "
                            f"width {weights[0].shape[1]}")
    hs = [x]
    last = len(weights) - 1
    for i, w in enumerate(weights):
        z = hs[-1] @ w.T
        hs.append(np.tanh(z) if i < last else z)
    return hs


def forward(model, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    return _activations(model.effective_weights(), x)[-1]


def _penalty(adapters) -> float:
    total = 0.0
    for a in adapters:
        if a is not None:
            total += float(np.sum(a.up * a.up) + np.sum(a.down * a.down))
    return total


def loss(model, batch: Batch, l2_adapter_penalty: float = 0.0) -> float:
    """Mean of ``0.5 * ||prediction - target||^2`` plus the optional adapter penalty."""
    if len(batch) == 0:
        raise EmptyBatch("loss of an empty batch")
    resid = forward(model, batch.inputs) - batch.targets
    value = 0.5 * float(np.sum(resid * resid)) / len(batch)
    if l2_adapter_penalty:
        value += l2_adapter_penalty * _penalty(getattr(model, "adapters", ()))
    return value


def _grads_raw(bases, ups, downs, scales, batch: Batch, l2: float):
    weights = [b if u is None else b + s * (u @ d) for b, u, d, s in zip(bases, ups, downs, scales)]
    hs = _activations(weights, batch.inputs)
    n = len(batch)
    g = (hs[-1] - batch.targets) / n
    out: list = [None] * len(bases)
    for li in range(len(bases) - 1, -1, -1):
        if ups[li] is not None:
            dw = g.T @ hs[li]
            s = scales[li]
            d_up = s * (dw @ downs[li].T)
            d_down = s * (ups[li].T @ dw)
            if l2:
                d_up = d_up + 2.0 * l2 * ups[li]
                d_down = d_down + 2.0 * l2 * downs[li]
            out[li] = (d_up, d_down)
        if li > 0:
            h = hs[li]
            g = (g @ weights[li]) * (1.0 - h * h)
    return out


def grads(model: ToyModel, batch: Batch, l2_adapter_penalty: float = 0.0):
    """Gradients of :func:`loss` with respect to every adapter's ``(B, A)``.

    Layers without an adapter get ``None``.
    """
    if len(batch) == 0:
        raise EmptyBatch("gradient of an empty batch")
    ups = [None if a is None else a.up for a in model.adapters]
    downs = [None if a is None else a.down for a in model.adapters]
    scales = [1.0 if a is None else a.scaling for a in model.adapters]
    return _grads_raw(model.bases, ups, downs, scales, batch, l2_adapter_penalty)


@dataclass
class _Adam:
    b1: float
    b2: float
    eps: float
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, params: list[np.ndarray], gs: list[np.ndarray], lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, gs, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def local_update(
    model: ToyModel,
    adapters_init: Sequence[Optional[LoraAdapter]],
    dataset: Batch,
    opt: OptimizerConfig,
    seed,
) -> tuple[list[Optional[LoraAdapter]], float]:
    """Train adapters on one client's data; bases are left untouched.

    Runs ``opt.epochs`` passes of mini-batch updates over seeded shuffles.
    Adam moments start from zero on every call. Returns the trained adapters
    and the unpenalised training loss after the last step.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyBatch("local_update on an empty dataset")
    ups = [None if a is None else a.up.copy() for a in adapters_init]
    downs = [None if a is None else a.down.copy() for a in adapters_init]
    scales = [1.0 if a is None else a.scaling for a in adapters_init]
    rng = np.random.default_rng(seed)
    adam = _Adam(opt.betas[0], opt.betas[1], opt.eps) if opt.kind == "adam" else None
    steps_per_epoch = math.ceil(n / opt.batch_size)
    for _ in range(opt.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * opt.batch_size : (b + 1) * opt.batch_size]
            gs = _grads_raw(model.bases, ups, downs, scales, dataset.take(idx), opt.l2_adapter_penalty)
            params, flat = [], []
            for li, g in enumerate(gs):
                if g is not None:
                    params += [ups[li], downs[li]]
                    flat += [g[0], g[1]]
            if opt.learning_rate == 0.0 or not params:
                continue
            if adam is None:
                for p, g in zip(params, flat):
                    p -= opt.learning_rate * g
            else:
                adam.step(params, flat, opt.learning_rate)
    trained = [
        None if a is None else LoraAdapter(u, d, a.scaling)
        for a, u, d in zip(adapters_init, ups, downs)
    ]
    final = loss(model.with_adapters(trained), dataset)
    return trained, final
