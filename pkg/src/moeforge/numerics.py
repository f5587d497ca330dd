"""Dense FP64 kernels shared by the rest of the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. An expert
maps ``x`` (length ``d_in``) to ``y`` (length ``d_out``), so weights are
``d_out x d_in`` and a low-rank delta is ``a @ b.T`` with ``a`` of shape
``d_out x r`` and ``b`` of shape ``d_in x r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


class NumericsError(ValueError):
    """Raised on invalid numeric input (zero vectors, shape mismatch, NaN)."""


class SVDConvergenceError(NumericsError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max normalized off-diagonal {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


@dataclass
class OpCounter:
    """Scalar multiply counter threaded through instrumented kernels."""

    mults: int = 0

    def add(self, n: int) -> None:
        self.mults += int(n)


def as_matrix(m, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return ``m`` as a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise NumericsError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise NumericsError(f"expected {cols} cols, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError("matrix contains NaN or Inf")
    return arr


@dataclass
class FactorPair:
    """Low-rank pair whose product ``a @ b.T`` is a ``d_out x d_in`` delta."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = as_matrix(self.a)
        self.b = as_matrix(self.b)
        if self.a.shape[1] != self.b.shape[1]:
            raise NumericsError(
                f"factor inner dims differ: a has {self.a.shape[1]}, b has {self.b.shape[1]}"
            )
        r = self.a.shape[1]
        if r < 1 or r > min(self.a.shape[0], self.b.shape[0]):
            raise NumericsError(
                f"rank {r} outside [1, {min(self.a.shape[0], self.b.shape[0])}]"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the delta matrix the pair represents."""
        return self.a.shape[0], self.b.shape[0]

    def delta(self) -> np.ndarray:
        return self.a @ self.b.T

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.a @ (self.b.T @ x)

    @property
    def size(self) -> int:
        return self.a.size + self.b.size


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors (flattened if matrices).

    Identical inputs give exactly 1.0: the denominator is ``sqrt(uu * vv)``,
    and ``sqrt(s * s) == s`` holds for binary floating point.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise NumericsError(f"length mismatch: {u.size} vs {v.size}")
    su = float(np.max(np.abs(u))) if u.size else 0.0
    sv = float(np.max(np.abs(v))) if v.size else 0.0
    if su == 0.0 or sv == 0.0:
        raise NumericsError("cosine similarity undefined for a zero vector")
    # rescale so the squared norms can neither underflow nor overflow
    u = u / su
    v = v / sv
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    c = float(np.dot(u, v)) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: every column pair meets once per sweep, disjoint within a round."""
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        top = players[: m // 2]
        bottom = players[m // 2 :][::-1]
        pairs = [(a, b) if a < b else (b, a) for a, b in zip(top, bottom) if a < n and b < n]
        rounds.append((np.array([a for a, _ in pairs], dtype=np.intp), np.array([b for _, b in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_svd(m: np.ndarray, max_sweeps: int, tol: float):
    """One-sided Jacobi on the columns of ``m`` (requires rows >= cols).

    Column pairs are visited in round-robin order so each round rotates
    disjoint pairs at once. Returns ``(w, v)`` where the columns of ``w`` are
    ``sigma_j * u_j`` and ``v`` is orthogonal, with ``m = w @ v.T``.
    """
    w = m.copy()
    n = w.shape[1]
    v = np.eye(n)
    norms = np.einsum("ij,ij->j", w, w)
    rounds = _round_robin(n)
    off = 0.0
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            alpha = norms[p]
            beta = norms[q]
            wp = w[:, p]
            wq = w[:, q]
            gamma = np.einsum("ij,ij->j", wp, wq)
            live = (alpha > 0.0) & (beta > 0.0) & (gamma != 0.0)
            if not live.any():
                continue
            c_off = np.zeros_like(gamma)
            c_off[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            off = max(off, float(c_off.max()))
            rot = live & (c_off >= tol)
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            wp = w[:, p]
            wq = w[:, q]
            w[:, p] = cs * wp - sn * wq
            w[:, q] = sn * wp + cs * wq
            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = cs * vp - sn * vq
            v[:, q] = sn * vp + cs * vq
            norms[p] = np.einsum("ij,ij->j", w[:, p], w[:, p])
            norms[q] = np.einsum("ij,ij->j", w[:, q], w[:, q])
        if off < tol:
            return w, v
    raise SVDConvergenceError(max_sweeps, off)


def svd_full(m, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    """Thin SVD ``m = u @ diag(s) @ vt`` via one-sided Jacobi.

    Singular values are sorted descending (stable on ties). The first
    nonzero entry of each left singular vector is made positive. Columns of
    ``u`` belonging to zero singular values are left as zeros.
    """
    m = as_matrix(m)
    transpose = m.shape[0] < m.shape[1]
    work = m.T if transpose else m
    w, v = _jacobi_svd(work, max_sweeps, tol)
    s = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros_like(w)
    nz = s > 0
    u[:, nz] = w[:, nz] / s[nz]
    if transpose:
        # m.T = u s v.T  =>  m = v s u.T ; left vectors of m are v
        u, v = v, u
    for j in range(s.size):
        col = u[:, j]
        idx = np.flatnonzero(col)
        if idx.size and col[idx[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return u, s, v.T


def truncated_svd(m, r: int, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL) -> FactorPair:
    """Best rank-``r`` approximation of ``m`` as ``a @ b.T`` with ``a = u_r * s_r``."""
    m = as_matrix(m)
    if not 1 <= r <= min(m.shape):
        raise NumericsError(f"rank {r} outside [1, {min(m.shape)}] for shape {m.shape}")
    u, s, vt = svd_full(m, max_sweeps, tol)
    return FactorPair(u[:, :r] * s[:r], vt[:r].T.copy())


def frobenius_rel_error(m, approx) -> float:
    """``||m - approx||_F / ||m||_F``."""
    m = as_matrix(m)
    approx = as_matrix(approx)
    if m.shape != approx.shape:
        raise NumericsError(f"shape mismatch: {m.shape} vs {approx.shape}")
    denom = float(np.linalg.norm(m))
    if denom == 0.0:
        raise NumericsError("relative error undefined for an all-zero reference")
    return float(np.linalg.norm(m - approx)) / denom
