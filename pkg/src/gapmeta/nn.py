"""Small dense MLP built on the tape primitives.

Hidden activations are rectified-linear, the output layer is linear.  The
same forward is available in two flavors: :func:`forward_mlp` records on a
tape (differentiable), :func:`mlp_predict` is a plain numpy evaluation for
read-only prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import DimensionError

Array = np.ndarray


@dataclass(frozen=True)
class MlpParams:
    """Per-layer (weight, bias) pairs; weight is (in_dim, out_dim)."""

    layers: tuple[tuple[Array, Array], ...]

    def __post_init__(self):
        prev_out = None
        for li, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionError(f"layer {li}: weight {w.shape}, bias {b.shape}")
            if prev_out is not None and w.shape[0] != prev_out:
                raise DimensionError(
                    f"layer {li}: in-dim {w.shape[0]} != previous out-dim {prev_out}"
                )
            prev_out = w.shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    def flat(self) -> list[Array]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out


def init_mlp(sizes: tuple[int, ...], rng: np.random.Generator) -> MlpParams:
    """Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per layer."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        layers.append((w, b))
    return MlpParams(tuple(layers))


def params_to_vars(tape: Tape, params: MlpParams) -> list[tuple[Var, Var]]:
    return [(tape.constant(w), tape.constant(b)) for w, b in params.layers]


def vars_to_params(layer_vars) -> MlpParams:
    return MlpParams(tuple((w.value.copy(), b.value.copy()) for w, b in layer_vars))


def forward_mlp(layer_vars, x: Var) -> Var:
    """Batch forward pass on the tape; x is (batch, in_dim)."""
    if x.value.ndim != 2:
        raise DimensionError(f"forward_mlp: input rank {x.value.ndim}")
    h = x
    last = len(layer_vars) - 1
    for li, (w, b) in enumerate(layer_vars):
        h = ad.affine(h, w, b)
        if li < last:
            h = ad.relu(h)
    return h


def mlp_predict(params: MlpParams, x: Array) -> Array:
    """Plain numpy forward pass (no tape); same arithmetic as forward_mlp."""
    if x.ndim != 2:
        raise DimensionError(f"mlp_predict: input rank {x.ndim}")
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for li, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if li < last:
            h = np.maximum(h, 0.0)
    return h


def mse_value(pred: Array, target: Array) -> float:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))
