"""Low-rank weight factorization (model-provider side, plaintext)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 100
OFF_TOL = 1e-12


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LowRankFactors:
    u: np.ndarray
    v: np.ndarray
    r: int
    ratio: float
    singular_values: np.ndarray

    def product(self) -> np.ndarray:
        return self.u.reshape(-1, self.r) @ self.v.reshape(self.r, -1)

    def tail_error(self) -> float:
        """Eckart-Young optimum for this rank."""
        return float(math.sqrt(np.sum(self.singular_values[self.r :] ** 2)))


@dataclass(frozen=True)
class MultCount:
    full: int
    low: int
    beneficial: bool


def _tournament(k: int):
    """Round-robin pairings: every column pair meets once per sweep, pairs within a step are disjoint."""
    idx = list(range(k)) + ([-1] if k % 2 else [])
    size = len(idx)
    for _ in range(size - 1):
        pairs = [(idx[i], idx[size - 1 - i]) for i in range(size // 2)]
        pairs = [(p, q) for p, q in pairs if p >= 0 and q >= 0]
        yield np.array([p for p, _ in pairs], dtype=np.intp), np.array([q for _, q in pairs], dtype=np.intp)
        idx = [idx[0], idx[-1]] + idx[1:-1]


def jacobi_svd(a: np.ndarray, max_sweeps: int = MAX_SWEEPS, tol: float = OFF_TOL):
    """One-sided (Hestenes) Jacobi SVD: a = u @ diag(s) @ vt.

    Column pairs are rotated until every pair is orthogonal to ``tol`` relative
    to their norms, which diagonalizes a.T @ a implicitly. Disjoint pairs are
    rotated together. Singular values come back sorted descending.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    n, o = a.shape
    if n < o:
        u, s, vt = jacobi_svd(a.T, max_sweeps, tol)
        return vt.T, s, u.T
    v = np.eye(o)
    steps = list(_tournament(o))
    # columns below roundoff of the whole matrix are numerically zero; rotating them never settles
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p, q in steps:
            if not len(p):
                continue
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            act = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > negligible) & (beta > negligible)
            if not act.any():
                continue
            rotated = True
            g = np.where(act, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(act, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(act, c * t, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sv = np.linalg.norm(a, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, a, v = sv[order], a[:, order], v[:, order]
    u = np.zeros_like(a)
    nz = sv > 0
    u[:, nz] = a[:, nz] / sv[nz]
    return u, sv, v.T


def svd_factorize(w: np.ndarray, r: int) -> LowRankFactors:
    """W (n x o) ~ U (n x r) @ V (r x o), singular values folded into U."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    n, o = w.shape
    if not 1 <= r <= min(n, o):
        raise ValueError(f"rank {r} out of range for {n}x{o}")
    u, s, vt = jacobi_svd(w)
    return LowRankFactors(u[:, :r] * s[:r], vt[:r].copy(), r, r / min(n, o), s)


def conv_factorize(w: np.ndarray, r: int) -> LowRankFactors:
    """3x3xIxO kernel -> 3x3xIxR kernel followed by a 1x1xRxO kernel."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a (k, k, i, o) kernel, got {w.shape}")
    k1, k2, i, o = w.shape
    if not 1 <= r <= min(k1 * k2 * i, o):
        raise ValueError(f"rank {r} out of range for kernel {w.shape}")
    flat = svd_factorize(w.reshape(k1 * k2 * i, o), r)
    return LowRankFactors(flat.u.reshape(k1, k2, i, r), flat.v.reshape(1, 1, r, o), r, r / o, flat.singular_values)


def choose_rank(kind: str, dims, ratio: float) -> int:
    """Rank from a rank ratio: base is o for conv, min(n, o) for FC."""
    if not 0 < ratio <= 1:
        raise ValueError(f"rank ratio must be in (0, 1], got {ratio}")
    if kind == "conv":
        base = dims[-1]
    elif kind == "fc":
        base = min(dims[-2], dims[-1])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return max(1, int(math.floor(ratio * base + 0.5)))


def mult_count(m: int, n: int, o: int, r: int) -> MultCount:
    if min(m, n, o, r) < 1:
        raise ValueError("dimensions must be positive")
    full = m * n * o
    low = m * n * r + m * r * o
    return MultCount(full, low, r * (n + o) < n * o)


def frobenius_error(w: np.ndarray, factors: LowRankFactors) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.linalg.norm(w.reshape(-1, factors.v.reshape(factors.r, -1).shape[1]) - factors.product()))
