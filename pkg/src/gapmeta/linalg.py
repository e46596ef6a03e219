"""Deterministic SVD for small dense matrices, plus tensor unfolding.

The SVD is a one-sided Jacobi: columns of the transposed input are rotated
until pairwise orthogonal (relative off-diagonal below 1e-12, at most 60
sweeps).  The hot kernel is compiled with numba; the algorithm itself is
plain cyclic Jacobi and fully deterministic, so identical input bits always
produce identical factor bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateSvdError, DimensionError, DomainError, SvdConvergenceError

Array = np.ndarray

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
SEP_EPS = 1e-8  # minimum relative spread of squared singular values for svd_backward


DEFLATE_REL = 1e-13  # columns below this relative norm are deflated and later
# replaced by an orthonormal completion; their singular values are ~0 anyway


@njit(cache=True)
def _jacobi_sweeps(b, tol, max_sweeps):
    """Orthogonalize the columns of b in place via cyclic plane rotations.

    Column norms are tracked incrementally (refreshed exactly at the start of
    every sweep) and pairs in which either column has collapsed below
    DEFLATE_REL of the largest are skipped: such columns carry singular
    values at roundoff level and get a fresh orthonormal direction later.

    Returns (r, sweeps, worst) where r accumulates the rotations so that
    b_final = b_initial @ r, and worst is the largest relative off-diagonal
    among live pairs in the last sweep.
    """
    n, m = b.shape
    r = np.eye(m)
    norms = np.zeros(m)
    worst = 1.0
    sweeps = 0
    for s in range(max_sweeps):
        maxn = 0.0
        for j in range(m):
            acc = 0.0
            for i in range(n):
                acc += b[i, j] * b[i, j]
            norms[j] = acc
            if acc > maxn:
                maxn = acc
        cut = maxn * (DEFLATE_REL * DEFLATE_REL)
        worst = 0.0
        for p in range(m - 1):
            for q in range(p + 1, m):
                app = norms[p]
                aqq = norms[q]
                if app <= cut or aqq <= cut:
                    continue
                apq = 0.0
                for i in range(n):
                    apq += b[i, p] * b[i, q]
                denom = np.sqrt(app * aqq)
                if denom <= 0.0:
                    continue
                rel = abs(apq) / denom
                if rel > worst:
                    worst = rel
                if rel <= tol:
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = c * t
                for i in range(n):
                    bp = b[i, p]
                    bq = b[i, q]
                    b[i, p] = c * bp - sn * bq
                    b[i, q] = sn * bp + c * bq
                for i in range(m):
                    rp = r[i, p]
                    rq = r[i, q]
                    r[i, p] = c * rp - sn * rq
                    r[i, q] = sn * rp + c * rq
                norms[p] = app - t * apq
                norms[q] = aqq + t * apq
        sweeps = s + 1
        if worst <= tol:
            break
    return r, sweeps, worst


@njit(cache=True)
def _complete_columns(v, sigma, floor):
    """Fill columns of v whose sigma is below floor with an orthonormal
    completion built from standard basis vectors (deterministic).

    Candidates are consumed left to right across all completed columns, so
    the scan is linear overall.
    """
    n, m = v.shape
    cand = 0
    for j in range(m):
        if sigma[j] > floor:
            continue
        while cand < n:
            w = np.zeros(n)
            w[cand] = 1.0
            cand += 1
            # columns are sorted by sigma, so every valid column has k < j
            for k in range(j):
                d = 0.0
                for i in range(n):
                    d += v[i, k] * w[i]
                for i in range(n):
                    w[i] -= d * v[i, k]
            nrm = 0.0
            for i in range(n):
                nrm += w[i] * w[i]
            nrm = np.sqrt(nrm)
            if nrm > 0.5:
                for i in range(n):
                    v[i, j] = w[i] / nrm
                break
    return v


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD of an m x n matrix with m <= n: u (m, m), sigma (m,), v (n, m).

    sigma is nonincreasing and nonnegative; u and v have orthonormal columns;
    in each column of u the entry of largest magnitude is nonnegative.
    """

    u: Array
    sigma: Array
    v: Array

    def reconstruct(self) -> Array:
        return (self.u * self.sigma[None, :]) @ self.v.T


def svd(g: Array) -> SvdResult:
    """One-sided Jacobi SVD of an m x n matrix with m <= n."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError(f"svd: rank {g.ndim}")
    m, n = g.shape
    if m > n:
        raise DimensionError(f"svd: expected m <= n, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise DomainError("svd: non-finite entries")

    b = np.ascontiguousarray(g.T.copy())  # (n, m); columns to orthogonalize
    r, sweeps, worst = _jacobi_sweeps(b, JACOBI_TOL, MAX_SWEEPS)
    if worst > JACOBI_TOL:
        raise SvdConvergenceError(residual=float(worst), sweeps=int(sweeps))

    sigma = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = np.ascontiguousarray(r[:, order])  # (m, m), orthonormal by construction
    v = np.ascontiguousarray(b[:, order])
    scale = np.where(sigma > 0.0, sigma, 1.0)
    v = v / scale[None, :]

    # completion threshold matches the kernel's deflation level, so every
    # column the sweeps stopped touching gets a clean orthonormal direction
    floor = float(sigma[0]) * DEFLATE_REL
    if np.any(sigma <= floor):
        v = _complete_columns(v, sigma, floor)

    # sign convention: largest-magnitude entry of each left singular vector >= 0
    for j in range(m):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SvdResult(u=u, sigma=sigma, v=v)


def svd_backward(
    res: SvdResult,
    du: Array | None = None,
    dsigma: Array | None = None,
    dv: Array | None = None,
) -> Array:
    """Vector-Jacobian product of g -> (u, sigma, v) for an m x n input, m <= n.

    du/dsigma/dv are downstream gradients with respect to the factors (any may
    be omitted).  When du or dv is given, the squared singular values must be
    pairwise separated by at least SEP_EPS relative to the largest; otherwise
    the 1/(sigma_j^2 - sigma_i^2) terms explode and a DegenerateSvdError is
    raised so the caller can fall back to a factor-frozen path.
    """
    u, s, v = res.u, res.sigma, res.v
    m = u.shape[0]
    n = v.shape[0]
    dg = np.zeros((m, n))
    if du is None and dsigma is None and dv is None:
        return dg

    if dsigma is not None:
        dg += (u * np.asarray(dsigma)[None, :]) @ v.T

    if du is None and dv is None:
        return dg

    s2 = s * s
    ref = max(float(s2[0]), 1e-300)
    gaps = np.abs(s2[:, None] - s2[None, :])
    np.fill_diagonal(gaps, np.inf)
    if float(gaps.min()) / ref < SEP_EPS:
        raise DegenerateSvdError(
            f"relative singular value gap below {SEP_EPS:g}; "
            "full svd backward refused"
        )
    if n > m and dv is not None and float(s2[-1]) / ref < SEP_EPS:
        raise DegenerateSvdError(
            "smallest singular value too small for the wide-matrix v term"
        )

    f = 1.0 / (s2[None, :] - s2[:, None] + np.eye(m))
    np.fill_diagonal(f, 0.0)

    sdiag = np.diag(s)
    inner = np.zeros((m, m))
    if du is not None:
        utdu = u.T @ du
        inner += (f * (utdu - utdu.T)) @ sdiag
    if dv is not None:
        vtdv = v.T @ dv
        inner += sdiag @ (f * (vtdv - vtdv.T))
    dg += u @ inner @ v.T
    if dv is not None and n > m:
        proj = dv - v @ (v.T @ dv)  # (I - v v^T) dv
        dg += u @ np.diag(1.0 / s) @ proj.T
    return dg


# ---------------------------------------------------------------------------
# unfolding
# ---------------------------------------------------------------------------


def mode_n_unfold(t: Array, mode: int) -> Array:
    """Matricize a tensor along the given 1-based mode: (I_mode, prod rest)."""
    t = np.asarray(t, dtype=np.float64)
    if not 1 <= mode <= t.ndim:
        raise DimensionError(f"mode_n_unfold: mode {mode} out of range for rank {t.ndim}")
    return np.ascontiguousarray(np.moveaxis(t, mode - 1, 0).reshape(t.shape[mode - 1], -1))


def refold_mode_n(mat: Array, mode: int, shape: tuple[int, ...]) -> Array:
    """Inverse of mode_n_unfold for the given original shape."""
    shape = tuple(int(s) for s in shape)
    if not 1 <= mode <= len(shape):
        raise DimensionError(f"refold_mode_n: mode {mode} out of range")
    moved = (shape[mode - 1],) + tuple(s for i, s in enumerate(shape) if i != mode - 1)
    if mat.shape != (moved[0], int(np.prod(moved[1:], dtype=np.int64))):
        raise DimensionError(f"refold_mode_n: matrix {mat.shape} does not match {shape}")
    return np.ascontiguousarray(np.moveaxis(mat.reshape(moved), 0, mode - 1))


@dataclass(frozen=True)
class UnfoldedGrad:
    """A rank-2 gradient oriented so rows <= cols, remembering how to go back."""

    matrix: Array
    original_shape: tuple[int, ...]
    transposed: bool

    def restore(self, mat: Array | None = None) -> Array:
        m = self.matrix if mat is None else mat
        out = m.T if self.transposed else m
        return np.ascontiguousarray(out.reshape(self.original_shape))


def orient_min_rows(g: Array) -> UnfoldedGrad:
    """Orient a matrix so the shorter dimension indexes rows; ties keep it as is."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError(f"orient_min_rows: rank {g.ndim}")
    if g.shape[0] <= g.shape[1]:
        return UnfoldedGrad(matrix=g, original_shape=g.shape, transposed=False)
    return UnfoldedGrad(
        matrix=np.ascontiguousarray(g.T), original_shape=g.shape, transposed=True
    )
