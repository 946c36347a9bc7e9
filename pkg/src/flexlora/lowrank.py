"""Dense matrix kernels and a deterministic one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays. :func:`as_matrix` is the
gatekeeper that validates shape and finiteness; every public function in this
module routes its inputs through it.

The SVD uses Hestenes' one-sided Jacobi method with a round-robin
(tournament) pair ordering so that all disjoint column pairs of one step are
rotated in a single vectorised update. The ordering, the sign convention and
the tie-breaking are fixed, so identical inputs give bit-identical factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidMatrix, RankOutOfRange, ShapeMismatch

_EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 100


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise InvalidMatrix."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidMatrix(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidMatrix(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``w = u @ diag(sigma) @ v.T`` with ``k = min(d, p)`` columns."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


# ---------------------------------------------------------------------------
# dense kernels


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def scale(a, c: float) -> np.ndarray:
    return as_matrix(a, "a") * float(c)


def weighted_sum(mats: Sequence, weights: Sequence[float]) -> np.ndarray:
    """Sum ``weights[i] * mats[i]`` accumulating strictly in input order."""
    if len(mats) != len(weights):
        raise ShapeMismatch(f"{len(mats)} matrices but {len(weights)} weights")
    if not mats:
        raise ShapeMismatch("weighted_sum needs at least one matrix")
    first = as_matrix(mats[0], "mats[0]")
    acc = first * float(weights[0])
    for i in range(1, len(mats)):
        m = as_matrix(mats[i], f"mats[{i}]")
        if m.shape != first.shape:
            raise ShapeMismatch(f"mats[{i}] has shape {m.shape}, expected {first.shape}")
        acc = acc + float(weights[i]) * m
    return acc


def frobenius_norm(a) -> float:
    a = as_matrix(a, "a")
    return float(np.sqrt(np.sum(a * a)))


# ---------------------------------------------------------------------------
# SVD


def _tournament(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule: n-1 (or n) steps of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    steps = []
    for _ in range(m - 1):
        top = players[: m // 2]
        bot = players[m // 2 :][::-1]
        pairs = [(min(i, j), max(i, j)) for i, j in zip(top, bot) if i >= 0 and j >= 0]
        pairs.sort()
        steps.append((np.array([p[0] for p in pairs], dtype=np.intp),
                      np.array([p[1] for p in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return steps


def _jacobi_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``a`` (m x n, m >= n).

    Returns the rotated matrix ``a @ v`` and the accumulated rotation ``v``.
    """
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return a, v
    tol = 4 * _EPS
    negligible = (_EPS * float(np.sum(a * a))) ** 2
    steps = _tournament(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for I, J in steps:
            if I.size == 0:
                continue
            ai, aj = a[:, I], a[:, J]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            g2 = gamma * gamma
            active = (g2 > (tol * tol) * alpha * beta) & (g2 > negligible)
            if not np.any(active):
                continue
            rotated = True
            I, J = I[active], J[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = a[:, I], a[:, J]
            a[:, I] = c * ai - s * aj
            a[:, J] = s * ai + c * aj
            vi, vj = v[:, I], v[:, J]
            v[:, I] = c * vi - s * vj
            v[:, J] = s * vi + c * vj
        if not rotated:
            break
    return a, v


def _reorthonormalize(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # Columns of small singular value inherit rounding from the large ones they
    # were rotated against; Gram-Schmidt in descending-sigma order repairs them
    # while moving the dominant columns by O(eps) only.
    q = q.copy()
    for j in np.flatnonzero(keep):
        col = q[:, j]
        for _ in range(2):
            prev = q[:, :j][:, keep[:j]]
            col = col - prev @ (prev.T @ col)
        q[:, j] = col / np.sqrt(col @ col)
    return q


def _complete_columns(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged in ``keep`` by an orthonormal completion.

    Candidates are standard basis vectors; the one with the largest residual
    after projecting out the accepted columns wins (first index on ties).
    """
    m, k = q.shape
    q = q.copy()
    accepted = [j for j in range(k) if keep[j]]
    basis = q[:, accepted]
    for j in range(k):
        if keep[j]:
            continue
        cand = np.eye(m)
        for _ in range(2):
            if basis.shape[1]:
                cand = cand - basis @ (basis.T @ cand)
        norms = np.sqrt(np.sum(cand * cand, axis=0))
        best = int(np.argmax(norms))
        col = cand[:, best] / norms[best]
        q[:, j] = col
        basis = np.column_stack([basis, col]) if basis.size else col[:, None]
    return q


def svd(w) -> SvdFactors:
    """Deterministic thin SVD of a dense matrix.

    Singular values come back non-increasing; equal values keep their column
    order. The first entry of each left singular vector whose magnitude
    exceeds 1e-12 is made non-negative.
    """
    w = as_matrix(w, "w")
    d, p = w.shape
    transposed = d < p
    work = w.T if transposed else w
    rotated, right = _jacobi_columns(work)
    sigma = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    rotated = rotated[:, order]
    right = right[:, order]

    smax = sigma[0] if sigma.size else 0.0
    thresh = max(work.shape) * _EPS * smax * 10.0
    keep = sigma > thresh
    left = np.zeros_like(rotated)
    left[:, keep] = rotated[:, keep] / sigma[keep]
    left = _reorthonormalize(left, keep)
    if not np.all(keep):
        left = _complete_columns(left, keep)
        sigma = np.where(keep, sigma, 0.0)

    u, v = (right, left) if transposed else (left, right)
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return SvdFactors(u=np.ascontiguousarray(u), sigma=sigma, v=np.ascontiguousarray(v))


def _check_rank(f: SvdFactors, r: int) -> int:
    if isinstance(r, bool) or int(r) != r or not 1 <= r <= f.k:
        raise RankOutOfRange(f"rank {r} outside [1, {f.k}]")
    return int(r)


def truncate(f: SvdFactors, r: int) -> np.ndarray:
    """Best rank-``r`` approximation ``U[:, :r] diag(sigma[:r]) V[:, :r]^T``."""
    r = _check_rank(f, r)
    return (f.u[:, :r] * f.sigma[:r]) @ f.v[:, :r].T


def truncation_error(f: SvdFactors, r: int) -> float:
    """Frobenius error of the rank-``r`` truncation, i.e. the tail singular-value norm."""
    r = _check_rank(f, r)
    tail = f.sigma[r:]
    return float(np.sqrt(np.sum(tail * tail)))


def error_ratios(f: SvdFactors) -> np.ndarray:
    """Relative truncation error for every retained rank ``1..k``.

    Entry ``i-1`` is ``truncation_error(f, i) / ||W||_F``; all zeros for a zero matrix.
    """
    sq = f.sigma * f.sigma
    total = float(np.sum(sq))
    if total == 0.0:
        return np.zeros(f.k)
    # suffix sums, reversed cumulative so the tail for rank i is sum(sq[i:])
    tails = np.cumsum(sq[::-1])[::-1]
    tails = np.append(tails[1:], 0.0)
    return np.sqrt(np.maximum(tails, 0.0) / total)


def numerical_rank(w, rtol: float = 1e-10) -> int:
    f = svd(w)
    if f.sigma[0] == 0.0:
        return 0
    return int(np.sum(f.sigma > rtol * f.sigma[0]))
