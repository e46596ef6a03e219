"""The preconditioner zoo.

All transforms share one algebraic skeleton: an update direction is obtained
by reshaping a positive spectrum around the raw gradient.  The geometry-
adaptive transform scales the singular values of the (oriented) gradient
matrix by a learned positive diagonal; its SVD-free surrogate scales gradient
rows instead, which coincides asymptotically as the column count grows; the
two learned-diagonal baselines scale gradient entries elementwise.

Numeric (array -> array) forms live here, together with the tape primitive
``gap_apply`` that makes the SVD route differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Var
from .errors import DimensionError, DomainError

Array = np.ndarray

KINDS = ("identity", "gap", "approx_gap", "meta_sgd", "meta_sgd_pd")


def sp(x):
    """Positive map 0.5*log(1+exp(2x)); stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + 0.5 * np.log1p(np.exp(-2.0 * np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sp_inv(y):
    """Inverse of :func:`sp`; defined for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise DomainError("sp_inv: argument must be positive")
    out = y + 0.5 * np.log(-np.expm1(-2.0 * y))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GapMeta:
    """Learned spectrum parameters for one preconditioned layer.

    ``m`` has one entry per row of that layer's oriented gradient matrix;
    the effective diagonal is sp(m), which is positive for any real m.
    """

    m: Array

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 1:
            raise DimensionError(f"GapMeta: m must be rank 1, got {m.ndim}")
        if not np.all(np.isfinite(m)):
            raise DomainError("GapMeta: non-finite entries")
        object.__setattr__(self, "m", m)

    def diag(self) -> Array:
        return sp(self.m)


@dataclass(frozen=True)
class PrecondKind:
    """Which transform to apply, and to which layers."""

    kind: str
    mask: tuple[bool, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown preconditioner kind '{self.kind}'")
        object.__setattr__(self, "mask", tuple(bool(b) for b in self.mask))

    @staticmethod
    def hidden_only_mask(n_layers: int) -> tuple[bool, ...]:
        """Default applicability: weights connecting hidden units to hidden
        units; input layer, output layer and all biases stay raw."""
        return tuple(0 < i < n_layers - 1 for i in range(n_layers))


def gap_transform(g: linalg.UnfoldedGrad, meta: GapMeta) -> Array:
    """Scale the singular values of the oriented gradient by sp(m).

    Returns u @ diag(sp(m) * sigma) @ v.T, same shape as ``g.matrix``.
    """
    mat = g.matrix
    if meta.m.shape[0] != mat.shape[0]:
        raise DimensionError(
            f"gap_transform: len(m)={meta.m.shape[0]} vs rows={mat.shape[0]}"
        )
    res = linalg.svd(mat)
    w = meta.diag() * res.sigma
    return (res.u * w[None, :]) @ res.v.T


def approx_gap_transform(g: Array, meta: GapMeta) -> Array:
    """SVD-free surrogate: scale row i of the gradient by sp(m_i)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or meta.m.shape[0] != g.shape[0]:
        raise DimensionError(f"approx_gap_transform: {g.shape} vs m {meta.m.shape}")
    return g * meta.diag()[:, None]


def meta_sgd_transform(g: Array, a: Array, pd: bool = False) -> Array:
    """Elementwise learned scaling: a*g, or sp(a)*g when positivity is enforced."""
    g = np.asarray(g, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if g.shape != a.shape:
        raise DimensionError(f"meta_sgd_transform: {g.shape} vs {a.shape}")
    return (sp(a) if pd else a) * g


@dataclass(frozen=True)
class BlockDiagPrecond:
    """The explicit preconditioner: n copies of a dense block d on the diagonal.

    Acts on column-stacked vectorizations, so apply(vec(G)) == vec(d @ G).
    """

    d: Array
    n_blocks: int

    def apply(self, x: Array) -> Array:
        m = self.d.shape[0]
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (m * self.n_blocks,):
            raise DimensionError(
                f"operator expects a vector of length {m * self.n_blocks}"
            )
        cols = x.reshape(self.n_blocks, m)  # row j holds column j of G
        return (cols @ self.d.T).reshape(-1)


def build_p_gap(u: Array, meta: GapMeta, n: int) -> BlockDiagPrecond:
    """Dense block d = u @ diag(sp(m)) @ u.T plus the block-diagonal operator."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DimensionError(f"build_p_gap: u must be square, got {u.shape}")
    if meta.m.shape[0] != u.shape[0]:
        raise DimensionError("build_p_gap: len(m) must match u")
    d = (u * meta.diag()[None, :]) @ u.T
    return BlockDiagPrecond(d=d, n_blocks=int(n))


# ---------------------------------------------------------------------------
# differentiable SVD route (tape primitive)
# ---------------------------------------------------------------------------


def gap_apply(gmat: Var, s: Var) -> Var:
    """Tape primitive: u @ diag(s * sigma) @ v.T for the SVD of gmat.

    Differentiable in both arguments; the backward with respect to gmat uses
    the analytic SVD vector-Jacobian product and therefore requires well
    separated singular values (see linalg.svd_backward).  Gradients of this
    backward itself are not supported.
    """
    t = ad._same_tape(gmat, s)
    gv, sv = gmat.value, s.value
    if gv.ndim != 2 or gv.shape[0] > gv.shape[1]:
        raise DimensionError(f"gap_apply: need rows <= cols, got {gv.shape}")
    if sv.shape != (gv.shape[0],):
        raise DimensionError(f"gap_apply: spectrum shape {sv.shape} vs {gv.shape}")
    return t._push("gap_apply", (gmat.i, s.i), _gap_apply_forward([gv, sv], None))


def _gap_apply_forward(vals, meta):
    g, s = vals
    res = linalg.svd(g)
    w = s * res.sigma
    return (res.u * w[None, :]) @ res.v.T


def _gap_vjp_g_forward(vals, meta):
    gbar, g, s = vals
    res = linalg.svd(g)
    w = s * res.sigma
    du = gbar @ res.v * w[None, :]
    dsigma = s * np.diagonal(res.u.T @ gbar @ res.v)
    dv = gbar.T @ res.u * w[None, :]
    return linalg.svd_backward(res, du=du, dsigma=dsigma, dv=dv)


def _gap_apply_vjp(t, ins, out, meta, g, need):
    gmat, s = Var(t, ins[0]), Var(t, ins[1])
    res = linalg.svd(t.values[ins[0]])
    grad_g = None
    if need[0]:
        grad_g = t._push(
            "gap_vjp_g", (g.i, ins[0], ins[1]),
            _gap_vjp_g_forward([g.value, gmat.value, s.value], None),
        )
    grad_s = None
    if need[1]:
        ut = t.constant(res.u.T)
        v = t.constant(res.v)
        sig = t.constant(res.sigma)
        grad_s = ad.mul(sig, ad.diag_part(ad.matmul(ad.matmul(ut, g), v)))
    return (grad_g, grad_s)


ad._register("gap_apply", _gap_apply_forward, _gap_apply_vjp)
ad._register("gap_vjp_g", _gap_vjp_g_forward, None)
