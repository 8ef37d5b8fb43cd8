"""Dense linear algebra core: truncated SVD, symmetric eigendecomposition,
and a mergeable streaming covariance accumulator.

Weights are 32-bit floats throughout; statistics accumulate in 64-bit and
are downcast only when a covariance matrix is materialized. The truncated
SVD is computed by eigendecomposing the smaller Gram matrix (W Wᵀ or Wᵀ W),
so a single symmetric eigensolver backs both decomposition routes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, NumericalError, RankError, ShapeError

__all__ = [
    "EigFactors",
    "OutputStats",
    "SvdFactors",
    "eig_sym",
    "matmul",
    "svd_truncate",
]

# Relative spectral cutoff below which a singular value is treated as zero
# and its right/left vector is completed orthogonally instead of divided out.
_SIGMA_CUTOFF = 1e-7


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with shape validation and a finiteness check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise NumericalError("matmul produced non-finite entries")
    return out


def _fix_signs(q: np.ndarray) -> np.ndarray:
    """Flip column signs so the first non-negligible entry is non-negative.

    Makes eigenvector/singular-vector output reproducible across runs; the
    threshold is relative to the column's largest magnitude so that noise in
    near-zero leading entries cannot flip a column.
    """
    q = np.array(q, copy=True)
    for j in range(q.shape[1]):
        col = q[:, j]
        mags = np.abs(col)
        peak = mags.max()
        if peak == 0.0:
            continue
        lead = int(np.argmax(mags > 1e-6 * peak))
        if col[lead] < 0:
            q[:, j] = -col
    return q


def _eigh_descending(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full symmetric eigendecomposition, eigenvalues descending.

    Works in float64, applies the deterministic sign convention, and breaks
    eigenvalue ties by original index (stable sort).
    """
    try:
        vals, vecs = np.linalg.eigh(c.astype(np.float64, copy=False))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"symmetric eigensolver failed to converge: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


@dataclass(frozen=True)
class EigFactors:
    """Top-k eigenpairs of a symmetric matrix: columns of q, values in l descending."""

    q: np.ndarray
    l: np.ndarray


def eig_sym(c: np.ndarray, k: int) -> EigFactors:
    """Top-k eigenpairs of a symmetric matrix, eigenvalues descending.

    The input is symmetrized as (c + cᵀ)/2 first; asymmetry beyond
    1e-5 * ||c||_F is rejected as a shape error.
    """
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"eig_sym expects a square matrix, got {c.shape}")
    d = c.shape[0]
    if not 1 <= k <= d:
        raise RankError(f"eig_sym k={k} out of range [1, {d}]")
    c64 = c.astype(np.float64, copy=False)
    norm = np.linalg.norm(c64)
    if norm > 0 and np.linalg.norm(c64 - c64.T) > 1e-5 * norm:
        raise ShapeError("eig_sym input is not symmetric within 1e-5 relative tolerance")
    sym = (c64 + c64.T) / 2.0
    vals, vecs = _eigh_descending(sym)
    return EigFactors(q=vecs[:, :k].astype(np.float32), l=vals[:k])


@dataclass(frozen=True)
class SvdFactors:
    """Rank-k SVD factors: u (d1 x k), s descending non-negative, v (d2 x k)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def _complete_orthonormal(basis: np.ndarray, have: int, want: int) -> np.ndarray:
    """Extend the first `have` orthonormal columns of `basis` to `want` columns.

    Deterministic: appends canonical basis vectors and re-orthonormalizes by QR.
    """
    d = basis.shape[0]
    stack = np.concatenate([basis[:, :have], np.eye(d)], axis=1)
    q, _ = np.linalg.qr(stack)
    out = basis.copy()
    out[:, have:want] = q[:, have:want]
    return _fix_signs(out)


def svd_truncate(w: np.ndarray, r: int) -> SvdFactors:
    """Best rank-r approximation factors of w, via the smaller Gram matrix.

    Reconstruction u @ diag(s) @ vᵀ satisfies the Eckart-Young identity:
    the squared Frobenius error equals the sum of the discarded squared
    singular values.
    """
    if w.ndim != 2:
        raise ShapeError(f"svd_truncate expects a matrix, got shape {w.shape}")
    d1, d2 = w.shape
    if not 1 <= r <= min(d1, d2):
        raise RankError(f"rank {r} out of range [1, {min(d1, d2)}] for shape {d1}x{d2}")

    w64 = w.astype(np.float64, copy=False)
    if d1 <= d2:
        vals, u = _eigh_descending(w64 @ w64.T)
        vals = np.maximum(vals[:r], 0.0)
        s = np.sqrt(vals)
        u = u[:, :r]
        v = np.zeros((d2, r))
        good = s > _SIGMA_CUTOFF * max(s[0], np.finfo(np.float64).tiny)
        n_good = int(good.sum())
        v[:, :n_good] = (w64.T @ u[:, :n_good]) / s[:n_good]
        if n_good < r:
            v = _complete_orthonormal(v, n_good, r)
    else:
        vals, v = _eigh_descending(w64.T @ w64)
        vals = np.maximum(vals[:r], 0.0)
        s = np.sqrt(vals)
        v = v[:, :r]
        u = np.zeros((d1, r))
        good = s > _SIGMA_CUTOFF * max(s[0], np.finfo(np.float64).tiny)
        n_good = int(good.sum())
        u[:, :n_good] = (w64 @ v[:, :n_good]) / s[:n_good]
        if n_good < r:
            u = _complete_orthonormal(u, n_good, r)

    return SvdFactors(
        u=u.astype(np.float32), s=s.astype(np.float32), v=v.astype(np.float32)
    )


@dataclass(frozen=True)
class OutputStats:
    """Streaming accumulator for a layer's per-token output distribution.

    Tracks the observation count, running mean, and the uncentered second
    moment sum Σ y yᵀ, all in float64. Updates and merges return new values;
    instances are treated as immutable.
    """

    dim: int
    count: int
    mean: np.ndarray
    moment2: np.ndarray

    @staticmethod
    def empty(dim: int) -> "OutputStats":
        if dim < 1:
            raise ShapeError(f"OutputStats dim must be positive, got {dim}")
        return OutputStats(
            dim=dim,
            count=0,
            mean=np.zeros(dim, dtype=np.float64),
            moment2=np.zeros((dim, dim), dtype=np.float64),
        )

    def update(self, batch: np.ndarray) -> "OutputStats":
        """Fold in a batch of column observations (dim x n)."""
        if batch.ndim != 2 or batch.shape[0] != self.dim:
            raise ShapeError(
                f"stats update: batch shape {batch.shape} does not match dim {self.dim}"
            )
        n = batch.shape[1]
        if n < 1:
            raise ShapeError("stats update: batch must contain at least one column")
        y = batch.astype(np.float64, copy=False)
        total = self.count + n
        mean = (self.mean * self.count + y.sum(axis=1)) / total
        m2 = self.moment2 + y @ y.T
        m2 = (m2 + m2.T) / 2.0
        return OutputStats(dim=self.dim, count=total, mean=mean, moment2=m2)

    def merge(self, other: "OutputStats") -> "OutputStats":
        """Combine two accumulators; equivalent to sequential accumulation."""
        if self.dim != other.dim:
            raise ShapeError(f"stats merge: dim {self.dim} != {other.dim}")
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        total = self.count + other.count
        mean = (self.mean * self.count + other.mean * other.count) / total
        m2 = self.moment2 + other.moment2
        return OutputStats(dim=self.dim, count=total, mean=mean, moment2=m2)

    def covariance(self) -> np.ndarray:
        """Population covariance E[yyᵀ] − E[y]E[y]ᵀ, symmetrized, as float32."""
        if self.count < 1:
            raise CalibrationError(f"no observations accumulated for dim-{self.dim} statistics")
        cov = self.moment2 / self.count - np.outer(self.mean, self.mean)
        cov = (cov + cov.T) / 2.0
        out = cov.astype(np.float32)
        if not np.isfinite(out).all():
            raise NumericalError("covariance produced non-finite entries")
        return out

    def second_moment(self) -> np.ndarray:
        """Uncentered E[yyᵀ], symmetrized, as float32."""
        if self.count < 1:
            raise CalibrationError(f"no observations accumulated for dim-{self.dim} statistics")
        m = self.moment2 / self.count
        return ((m + m.T) / 2.0).astype(np.float32)
