"""Tape-based reverse-mode differentiation on dense float64 arrays.

Every primitive appends one record to an explicit :class:`Tape`.  Backward
passes are built out of the same primitive vocabulary and are appended to the
tape as well, so the output of :func:`grad` is an ordinary tape value that can
be differentiated again.  This is what lets outer-loop meta-gradients flow
through inner-loop gradient computations.

Design constraints kept deliberately tight:

* all values are float64 ``numpy`` arrays (scalars are rank-0 arrays),
* no implicit broadcasting; the only shape-changing conveniences are the
  explicit ``repeat_rows`` / ``sum_rows`` pair and the fused ``affine``,
* a completed tape is immutable in the sense that nodes are never rewritten;
  replaying it reproduces every recorded value bit-exactly.
"""

from __future__ import annotations

import heapq
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, TapeLookupError

Array = np.ndarray

# op name -> forward(input_values, meta) -> Array
_FORWARD: dict[str, Callable] = {}
# op name -> vjp(tape, in_ids, out_id, meta, cot, need) -> tuple[Var | None, ...]
_VJP: dict[str, Callable] = {}


def _f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Var:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: "Tape", i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self) -> Array:
        return self.tape.values[self.i]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.i].shape

    def __repr__(self):
        return f"Var(#{self.i}, shape={self.shape})"


class Tape:
    """Append-only record of primitive operations.

    ``ops[i]`` names the primitive, ``inputs[i]`` holds the ids of earlier
    nodes it consumed (always ``< i``, so the graph is acyclic by
    construction), ``values[i]`` is the recorded output and ``metas[i]`` any
    non-differentiable payload (constants, shapes, scalar factors).
    """

    __slots__ = ("ops", "inputs", "values", "metas")

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[Array] = []
        self.metas: list = []

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op: str, in_ids: tuple[int, ...], value: Array, meta=None) -> Var:
        self.ops.append(op)
        self.inputs.append(in_ids)
        self.values.append(value)
        self.metas.append(meta)
        return Var(self, len(self.ops) - 1)

    def constant(self, value) -> Var:
        """Record a leaf value; leaves receive no gradient expansion."""
        v = _f64(value).copy()
        v.setflags(write=False)
        return self._push("const", (), v, v)

    def replay(self) -> list[Array]:
        """Recompute every node from its recorded inputs.

        Returns the recomputed values in tape order; a healthy tape
        reproduces ``self.values`` bit-exactly.
        """
        out: list[Array] = []
        for op, in_ids, meta in zip(self.ops, self.inputs, self.metas):
            vals = [out[j] for j in in_ids]
            out.append(_FORWARD[op](vals, meta))
        return out


def _register(op: str, forward: Callable, vjp: Callable | None):
    _FORWARD[op] = forward
    _VJP[op] = vjp


def _same_tape(*vs: Var) -> Tape:
    t = vs[0].tape
    for v in vs[1:]:
        if v.tape is not t:
            raise ContractError("operands live on different tapes")
    return t


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

_register("const", lambda vals, meta: meta, None)


def add(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return t._push("add", (a.i, b.i), a.value + b.value)


_register("add", lambda vals, meta: vals[0] + vals[1], None)
_VJP["add"] = lambda t, ins, out, meta, g, need: (g, g)


def sub(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return t._push("sub", (a.i, b.i), a.value - b.value)


_register("sub", lambda vals, meta: vals[0] - vals[1], None)
_VJP["sub"] = lambda t, ins, out, meta, g, need: (g, neg(g))


def neg(a: Var) -> Var:
    return a.tape._push("neg", (a.i,), -a.value)


_register("neg", lambda vals, meta: -vals[0], None)
_VJP["neg"] = lambda t, ins, out, meta, g, need: (neg(g),)


def mul(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    return t._push("mul", (a.i, b.i), a.value * b.value)


_register("mul", lambda vals, meta: vals[0] * vals[1], None)
_VJP["mul"] = lambda t, ins, out, meta, g, need: (
    mul(g, Var(t, ins[1])) if need[0] else None,
    mul(g, Var(t, ins[0])) if need[1] else None,
)


def scale(a: Var, c: float) -> Var:
    """Multiply by a plain (non-differentiable) python float."""
    c = float(c)
    return a.tape._push("scale", (a.i,), a.value * c, c)


_register("scale", lambda vals, meta: vals[0] * meta, None)
_VJP["scale"] = lambda t, ins, out, meta, g, need: (scale(g, meta),)


def smul(s: Var, x: Var) -> Var:
    """Scalar tape value times tensor tape value."""
    t = _same_tape(s, x)
    if s.shape != ():
        raise DimensionError(f"smul: scalar operand has shape {s.shape}")
    return t._push("smul", (s.i, x.i), s.value * x.value)


_register("smul", lambda vals, meta: vals[0] * vals[1], None)
_VJP["smul"] = lambda t, ins, out, meta, g, need: (
    asum(mul(g, Var(t, ins[1]))) if need[0] else None,
    smul(Var(t, ins[0]), g) if need[1] else None,
)


def matmul(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul: {va.shape} @ {vb.shape}")
    return t._push("matmul", (a.i, b.i), va @ vb)


_register("matmul", lambda vals, meta: vals[0] @ vals[1], None)
_VJP["matmul"] = lambda t, ins, out, meta, g, need: (
    matmul(g, transpose(Var(t, ins[1]))) if need[0] else None,
    matmul(transpose(Var(t, ins[0])), g) if need[1] else None,
)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose: rank {a.value.ndim}")
    return a.tape._push("transpose", (a.i,), np.ascontiguousarray(a.value.T))


_register("transpose", lambda vals, meta: np.ascontiguousarray(vals[0].T), None)
_VJP["transpose"] = lambda t, ins, out, meta, g, need: (transpose(g),)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise DimensionError(f"reshape: {a.shape} -> {shape}")
    return a.tape._push("reshape", (a.i,), a.value.reshape(shape), shape)


_register("reshape", lambda vals, meta: vals[0].reshape(meta), None)
_VJP["reshape"] = lambda t, ins, out, meta, g, need: (
    reshape(g, t.values[ins[0]].shape),
)


def relu(a: Var) -> Var:
    return a.tape._push("relu", (a.i,), np.maximum(a.value, 0.0))


_register("relu", lambda vals, meta: np.maximum(vals[0], 0.0), None)


def _relu_vjp(t, ins, out, meta, g, need):
    mask = (t.values[ins[0]] > 0.0).astype(np.float64)
    return (mul(g, t.constant(mask)),)


_VJP["relu"] = _relu_vjp


def asum(a: Var) -> Var:
    """Sum of all elements, as a rank-0 value."""
    return a.tape._push("asum", (a.i,), np.asarray(np.sum(a.value)))


_register("asum", lambda vals, meta: np.asarray(np.sum(vals[0])), None)


def _asum_vjp(t, ins, out, meta, g, need):
    ones = t.constant(np.ones_like(t.values[ins[0]]))
    return (smul(g, ones),)


_VJP["asum"] = _asum_vjp


def sum_rows(a: Var) -> Var:
    """Column sums of a matrix: (n, d) -> (d,)."""
    if a.value.ndim != 2:
        raise DimensionError(f"sum_rows: rank {a.value.ndim}")
    return a.tape._push("sum_rows", (a.i,), a.value.sum(axis=0))


_register("sum_rows", lambda vals, meta: vals[0].sum(axis=0), None)
_VJP["sum_rows"] = lambda t, ins, out, meta, g, need: (
    repeat_rows(g, t.values[ins[0]].shape[0]),
)


def repeat_rows(v: Var, n: int) -> Var:
    """Tile a vector into n identical rows: (d,) -> (n, d)."""
    if v.value.ndim != 1:
        raise DimensionError(f"repeat_rows: rank {v.value.ndim}")
    n = int(n)
    return v.tape._push(
        "repeat_rows", (v.i,), np.broadcast_to(v.value, (n, v.value.shape[0])).copy(), n
    )


_register(
    "repeat_rows",
    lambda vals, meta: np.broadcast_to(vals[0], (meta, vals[0].shape[0])).copy(),
    None,
)
_VJP["repeat_rows"] = lambda t, ins, out, meta, g, need: (sum_rows(g),)


def affine(x: Var, w: Var, b: Var) -> Var:
    """Fused x @ w + b with the bias added to every row."""
    t = _same_tape(x, w, b)
    vx, vw, vb = x.value, w.value, b.value
    if vx.ndim != 2 or vw.ndim != 2 or vb.ndim != 1:
        raise DimensionError(f"affine: ranks {vx.ndim},{vw.ndim},{vb.ndim}")
    if vx.shape[1] != vw.shape[0] or vw.shape[1] != vb.shape[0]:
        raise DimensionError(f"affine: {vx.shape} @ {vw.shape} + {vb.shape}")
    return t._push("affine", (x.i, w.i, b.i), vx @ vw + vb)


_register("affine", lambda vals, meta: vals[0] @ vals[1] + vals[2], None)
_VJP["affine"] = lambda t, ins, out, meta, g, need: (
    matmul(g, transpose(Var(t, ins[1]))) if need[0] else None,
    matmul(transpose(Var(t, ins[0])), g) if need[1] else None,
    sum_rows(g) if need[2] else None,
)


def mse(pred: Var, target: Var) -> Var:
    """Mean of squared elementwise differences, as a rank-0 value."""
    t = _same_tape(pred, target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    d = pred.value - target.value
    return t._push("mse", (pred.i, target.i), np.asarray(np.mean(d * d)))


def _mse_forward(vals, meta):
    d = vals[0] - vals[1]
    return np.asarray(np.mean(d * d))


_register("mse", _mse_forward, None)


def _mse_vjp(t, ins, out, meta, g, need):
    p, tt = Var(t, ins[0]), Var(t, ins[1])
    coeff = 2.0 / t.values[ins[0]].size
    gp = smul(g, scale(sub(p, tt), coeff))
    return (gp if need[0] else None, neg(gp) if need[1] else None)


_VJP["mse"] = _mse_vjp


def scale_columns(x: Var, v: Var) -> Var:
    """Scale column j of a matrix by v[j]: equivalent to x @ diag(v)."""
    t = _same_tape(x, v)
    if x.value.ndim != 2 or v.value.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"scale_columns: {x.shape} vs {v.shape}")
    return t._push("scale_columns", (x.i, v.i), x.value * v.value[None, :])


_register("scale_columns", lambda vals, meta: vals[0] * vals[1][None, :], None)
_VJP["scale_columns"] = lambda t, ins, out, meta, g, need: (
    scale_columns(g, Var(t, ins[1])) if need[0] else None,
    sum_rows(mul(g, Var(t, ins[0]))) if need[1] else None,
)


def scale_rows(x: Var, v: Var) -> Var:
    """Scale row i of a matrix by v[i]; composed from existing primitives."""
    return transpose(scale_columns(transpose(x), v))


def diag_part(x: Var) -> Var:
    if x.value.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag_part: {x.shape}")
    return x.tape._push("diag_part", (x.i,), np.ascontiguousarray(np.diagonal(x.value)))


_register(
    "diag_part", lambda vals, meta: np.ascontiguousarray(np.diagonal(vals[0])), None
)
_VJP["diag_part"] = lambda t, ins, out, meta, g, need: (diag_embed(g),)


def diag_embed(v: Var) -> Var:
    if v.value.ndim != 1:
        raise DimensionError(f"diag_embed: rank {v.value.ndim}")
    return v.tape._push("diag_embed", (v.i,), np.diag(v.value))


_register("diag_embed", lambda vals, meta: np.diag(vals[0]), None)
_VJP["diag_embed"] = lambda t, ins, out, meta, g, need: (diag_part(g),)


def _sp_value(x: Array) -> Array:
    # 0.5*log(1+exp(2x)) evaluated stably for large |x|
    return np.maximum(x, 0.0) + 0.5 * np.log1p(np.exp(-2.0 * np.abs(x)))


def sp(a: Var) -> Var:
    """Elementwise positive map 0.5*log(1+exp(2x)); smooth, strictly increasing."""
    return a.tape._push("sp", (a.i,), _sp_value(a.value))


_register("sp", lambda vals, meta: _sp_value(vals[0]), None)
_VJP["sp"] = lambda t, ins, out, meta, g, need: (mul(g, sigmoid2(Var(t, ins[0]))),)


def _sigmoid2_value(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-2.0 * x[pos]))
    e = np.exp(2.0 * x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid2(a: Var) -> Var:
    """Elementwise 1/(1+exp(-2x)); the derivative of :func:`sp`."""
    return a.tape._push("sigmoid2", (a.i,), _sigmoid2_value(a.value))


_register("sigmoid2", lambda vals, meta: _sigmoid2_value(vals[0]), None)


def _sigmoid2_vjp(t, ins, out, meta, g, need):
    y = Var(t, out)
    ones = t.constant(np.ones_like(t.values[out]))
    return (mul(g, scale(mul(y, sub(ones, y)), 2.0)),)


_VJP["sigmoid2"] = _sigmoid2_vjp


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _compute_reach(tape: Tape, wrt_ids: set[int], lo: int, hi: int) -> list[bool]:
    """reach[i] is true when node i can influence some wrt node (so its
    cotangent matters during the reverse walk)."""
    reach = [False] * (hi + 1)
    inputs = tape.inputs
    for i in wrt_ids:
        reach[i] = True
    for i in range(lo, hi + 1):
        if reach[i]:
            continue
        for j in inputs[i]:
            if j >= lo and reach[j]:
                reach[i] = True
                break
    return reach


def _backward(tape: Tape, output: Var, wrt: list[Var], wrt_ids: set[int],
              lo: int, reach: list[bool]) -> list[Var]:
    out_id = output.i
    if not reach[out_id]:
        return [tape.constant(np.zeros_like(w.value)) for w in wrt]

    cot: dict[int, Var] = {out_id: tape.constant(np.asarray(1.0))}
    heap = [-out_id]
    seen = {out_id}
    ops = tape.ops
    metas = tape.metas
    inputs = tape.inputs
    while heap:
        i = -heapq.heappop(heap)
        if i in wrt_ids:
            continue  # stop here: wrt nodes act as leaves
        op = ops[i]
        if op == "const":
            cot.pop(i, None)
            continue
        g = cot.pop(i)
        in_ids = inputs[i]
        vjp_fn = _VJP[op]
        if vjp_fn is None:
            raise ContractError(f"op '{op}' has no gradient rule")
        need = tuple(j >= lo and reach[j] for j in in_ids)
        contribs = vjp_fn(tape, in_ids, i, metas[i], g, need)
        for j, c in zip(in_ids, contribs):
            if c is None:
                continue
            prev = cot.get(j)
            cot[j] = c if prev is None else add(prev, c)
            if j not in seen:
                seen.add(j)
                heapq.heappush(heap, -j)

    result = []
    for w in wrt:
        gv = cot.get(w.i)
        if gv is None:
            gv = tape.constant(np.zeros_like(w.value))
        result.append(gv)
    return result


def _check_grad_args(output: Var, wrt: Sequence[Var]) -> list[Var]:
    tape = output.tape
    if output.value.shape != ():
        raise ContractError(f"grad target must be scalar, got shape {output.value.shape}")
    wrt = list(wrt)
    n = len(tape)
    for w in wrt:
        if w.tape is not tape:
            raise TapeLookupError("wrt value lives on a different tape")
        if not (0 <= w.i < n):
            raise TapeLookupError(f"wrt id {w.i} not on tape")
    return wrt


def grad(output: Var, wrt: Sequence[Var]) -> list[Var]:
    """Gradients of a scalar tape value with respect to earlier tape values.

    The requested nodes are treated as independent inputs (the walk does not
    continue below them).  Results are tape values themselves, so they can be
    fed back into further primitives and differentiated again.  A node that
    does not influence ``output`` yields a zero gradient.
    """
    wrt = _check_grad_args(output, wrt)
    if not wrt:
        return []
    tape = output.tape
    wrt_ids = {w.i for w in wrt}
    lo = min(wrt_ids)
    reach = _compute_reach(tape, wrt_ids, lo, output.i)
    return _backward(tape, output, wrt, wrt_ids, lo, reach)


def grad_many(outputs: Sequence[Var], wrt: Sequence[Var]) -> list[list[Var]]:
    """Per-output gradients for several scalar outputs with respect to one
    set of nodes, sharing the reachability analysis across the walks."""
    if not outputs:
        return []
    wrt = _check_grad_args(outputs[0], wrt)
    tape = outputs[0].tape
    for out in outputs[1:]:
        _check_grad_args(out, wrt)
    if not wrt:
        return [[] for _ in outputs]
    wrt_ids = {w.i for w in wrt}
    lo = min(wrt_ids)
    hi = max(out.i for out in outputs)
    reach = _compute_reach(tape, wrt_ids, lo, hi)
    return [_backward(tape, out, wrt, wrt_ids, lo, reach) for out in outputs]


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient estimate of a scalar function, coordinatewise."""
    if not h > 0:
        raise DomainError("finite_diff_grad: h must be positive")
    x = _f64(x).copy()
    out = np.zeros_like(x)
    flat = out.ravel()
    xf = x.ravel()
    for k in range(x.size):
        orig = xf[k]
        xf[k] = orig + h
        fp = float(f(x))
        xf[k] = orig - h
        fm = float(f(x))
        xf[k] = orig
        flat[k] = (fp - fm) / (2.0 * h)
    return out
