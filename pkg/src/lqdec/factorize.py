"""Truncated SVD factor splitting, with optional importance weighting.

Minimizing ||sqrt(F) . (A - L1 L2)||_F over rank-r factors is hard in
general, but when the weights separate as F_ij ~ (r_i c_j)^2 the problem
reduces to an SVD of the row/column rescaled matrix.  The weighted path
therefore scales A by the row and column means of sqrt(F), factorizes,
and unscales the factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SVD_METHODS = ("exact", "randomized")

# Defaults of the sketching method: Gaussian test matrix with a fixed
# oversampling margin and two power iterations, re-orthonormalized
# between passes to keep the basis well conditioned.
OVERSAMPLE = 8
POWER_ITERS = 2


@dataclass(frozen=True)
class LowRankFactors:
    """A rank-r approximation split as L1 (d x r) times L2 (r x k)."""

    l1: np.ndarray
    l2: np.ndarray

    def __post_init__(self):
        l1 = np.asarray(self.l1)
        l2 = np.asarray(self.l2)
        if l1.ndim != 2 or l2.ndim != 2 or l1.shape[1] != l2.shape[0]:
            raise ValueError(f"inconsistent factor shapes {l1.shape} and {l2.shape}")
        if not (np.all(np.isfinite(l1)) and np.all(np.isfinite(l2))):
            raise ValueError("factors must be finite")

    @property
    def rank(self) -> int:
        return self.l1.shape[1]

    def product(self) -> np.ndarray:
        """Dense reconstruction, accumulated in float64."""
        return np.asarray(self.l1, dtype=np.float64) @ np.asarray(self.l2, dtype=np.float64)


def _split(u, s, vt) -> LowRankFactors:
    root = np.sqrt(s)
    return LowRankFactors(l1=u * root, l2=root[:, None] * vt)


def svd_truncated(a, rank: int, method: str = "exact", seed: int = 0) -> LowRankFactors:
    """Best (or sketched) rank-`rank` factorization of a dense matrix.

    The singular spectrum is split evenly: L1 = U sqrt(S), L2 = sqrt(S) V^T,
    so both factors carry the same Frobenius norm.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    d, k = a.shape
    if not 1 <= rank <= min(d, k):
        raise ValueError(f"rank must lie in [1, {min(d, k)}], got {rank}")
    if method == "exact":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        return _split(u[:, :rank], s[:rank], vt[:rank])
    if method == "randomized":
        rng = np.random.default_rng(seed)
        sketch = min(min(d, k), rank + OVERSAMPLE)
        omega = rng.standard_normal((k, sketch))
        q, _ = np.linalg.qr(a @ omega)
        for _ in range(POWER_ITERS):
            z, _ = np.linalg.qr(a.T @ q)
            q, _ = np.linalg.qr(a @ z)
        b = q.T @ a
        ub, s, vt = np.linalg.svd(b, full_matrices=False)
        return _split(q @ ub[:, :rank], s[:rank], vt[:rank])
    raise ValueError(f"unknown method {method!r}, expected one of {SVD_METHODS}")


@dataclass(frozen=True)
class WeightScalers:
    """Positive row/column scalers derived from an importance matrix."""

    d_row: np.ndarray
    d_col: np.ndarray


def fisher_scalers(f) -> WeightScalers:
    """Row and column means of sqrt(F), floored away from zero.

    Means below 1e-8 of the largest mean on the same axis are clamped to
    that floor; an all-zero F degrades to all-ones scalers so the
    weighted path coincides with the unweighted one.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("expected a 2-d importance matrix")
    if not np.all(np.isfinite(f)):
        raise ValueError("importance weights must be finite")
    if np.any(f < 0):
        raise ValueError("importance weights must be nonnegative")
    root = np.sqrt(f)
    row = root.mean(axis=1)
    col = root.mean(axis=0)
    if row.max() == 0.0:
        return WeightScalers(d_row=np.ones_like(row), d_col=np.ones_like(col))
    row = np.maximum(row, 1e-8 * row.max())
    col = np.maximum(col, 1e-8 * col.max())
    return WeightScalers(d_row=row, d_col=col)


def factorize(a, f=None, rank: int = 1, method: str = "exact", seed: int = 0) -> LowRankFactors:
    """Rank-`rank` factorization, importance-weighted when `f` is given."""
    a = np.asarray(a, dtype=np.float64)
    if f is None:
        return svd_truncated(a, rank, method=method, seed=seed)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != a.shape:
        raise ValueError(f"importance shape {f.shape} does not match matrix shape {a.shape}")
    scalers = fisher_scalers(f)
    scaled = scalers.d_row[:, None] * a * scalers.d_col[None, :]
    fac = svd_truncated(scaled, rank, method=method, seed=seed)
    return LowRankFactors(
        l1=fac.l1 / scalers.d_row[:, None],
        l2=fac.l2 / scalers.d_col[None, :],
    )


def weighted_error(w, q_dequant=None, factors=None, f=None) -> float:
    """Frobenius norm of sqrt(F) . (W - (Q + L1 L2)), in float64.

    Either residual term may be omitted; without `f` the plain Frobenius
    norm of the residual is returned.
    """
    acc = np.asarray(w, dtype=np.float64)
    if acc.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if q_dequant is not None:
        qd = np.asarray(q_dequant, dtype=np.float64)
        if qd.shape != acc.shape:
            raise ValueError(f"quantized shape {qd.shape} does not match {acc.shape}")
        acc = acc - qd
    if factors is not None:
        prod = factors.product()
        if prod.shape != acc.shape:
            raise ValueError(f"factor shape {prod.shape} does not match {acc.shape}")
        acc = acc - prod
    if f is not None:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != acc.shape:
            raise ValueError(f"importance shape {f.shape} does not match {acc.shape}")
        if np.any(f < 0):
            raise ValueError("importance weights must be nonnegative")
        acc = acc * np.sqrt(f)
    return float(np.linalg.norm(acc))
