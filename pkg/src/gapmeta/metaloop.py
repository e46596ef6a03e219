"""The bi-level engine: preconditioned inner-loop adaptation plus outer-loop
meta-updates of the network weights and the preconditioner parameters.

Meta-gradient modes
-------------------
``first_order``
    Inner gradients are detached; outer gradients see the inner updates as
    constants (plus the explicit dependence on the preconditioner parameters).
``factor_frozen`` (default)
    Outer gradients flow through the unrolled inner loop, but the singular
    factors of each step's gradient matrix are treated as constants.  The
    transform is expressed as d @ g with d = u diag(sp(m)) u^T, which is
    algebraically identical to scaling singular values, so forward values are
    unchanged.  Exact in the preconditioner parameters for a single inner
    step; approximate for more.
``full_svd``
    The SVD itself is differentiated via the analytic factor backward.  Falls
    back to factor_frozen (and flags the trace) whenever singular values are
    too close for a stable backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import linalg, precond
from .autodiff import Tape, Var
from .errors import (
    ConfigError,
    DimensionError,
    SvdConvergenceError,
    TrainingAbort,
)
from .nn import MlpParams, forward_mlp, init_mlp, mlp_predict, mse_value, params_to_vars, vars_to_params

Array = np.ndarray

GRAD_MODES = ("first_order", "factor_frozen", "full_svd")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on; see README for the JSON schema."""

    shots: int
    batch_size: int
    iterations: int
    alpha: float
    beta1: float  # outer learning rate for the network weights
    beta2: float  # outer learning rate for the preconditioner parameters
    k_train: int
    k_test: int
    kind: str = "gap"
    grad_mode: str = "factor_frozen"
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (40, 40)
    train_query_size: int | None = None  # defaults to `shots`
    eval_query_size: int = 100
    mask: tuple[bool, ...] | None = None  # defaults to hidden-to-hidden layers
    clip_meta_grad_norm: float | None = 10.0  # null disables clipping
    workers: int = 1
    report_format: str = "csv"

    def validate(self) -> None:
        if self.shots < 1:
            raise ConfigError("shots", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("alpha", "must be > 0")
        if not self.beta1 > 0:
            raise ConfigError("beta1", "must be > 0")
        if self.beta2 < 0:
            raise ConfigError("beta2", "must be >= 0")
        if self.k_train < 1:
            raise ConfigError("k_train", "must be >= 1")
        if self.k_test < 1:
            raise ConfigError("k_test", "must be >= 1")
        if self.kind not in precond.KINDS:
            raise ConfigError("kind", f"must be one of {precond.KINDS}")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError("grad_mode", f"must be one of {GRAD_MODES}")
        if len(self.hidden_sizes) < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes", "must be positive ints")
        if self.train_query_size is not None and self.train_query_size < 1:
            raise ConfigError("train_query_size", "must be >= 1 or null")
        if self.eval_query_size < 1:
            raise ConfigError("eval_query_size", "must be >= 1")
        if self.clip_meta_grad_norm is not None and not self.clip_meta_grad_norm > 0:
            raise ConfigError("clip_meta_grad_norm", "must be > 0 or null")
        n_layers = len(self.hidden_sizes) + 1
        if self.mask is not None and len(self.mask) != n_layers:
            raise ConfigError("mask", f"must have one flag per layer ({n_layers})")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.report_format not in ("csv", "markdown"):
            raise ConfigError("report_format", "must be 'csv' or 'markdown'")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (1, *self.hidden_sizes, 1)

    def layer_mask(self) -> tuple[bool, ...]:
        if self.mask is not None:
            return tuple(bool(b) for b in self.mask)
        return precond.PrecondKind.hidden_only_mask(len(self.hidden_sizes) + 1)

    def effective_train_query(self) -> int:
        return self.shots if self.train_query_size is None else self.train_query_size


_CONFIG_FIELDS = {
    "shots": int,
    "batch_size": int,
    "iterations": int,
    "alpha": float,
    "beta1": float,
    "beta2": float,
    "k_train": int,
    "k_test": int,
    "kind": str,
    "grad_mode": str,
    "seed": int,
    "hidden_sizes": tuple,
    "train_query_size": int,
    "eval_query_size": int,
    "mask": tuple,
    "clip_meta_grad_norm": float,
    "workers": int,
    "report_format": str,
}


def parse_config(doc: dict) -> TrainConfig:
    """Build a validated TrainConfig from a JSON-style dict; unknown keys are
    rejected with a field-level error."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(doc) - set(_CONFIG_FIELDS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    kwargs = {}
    for key, value in doc.items():
        conv = _CONFIG_FIELDS[key]
        if value is None and key in ("train_query_size", "mask", "clip_meta_grad_norm"):
            kwargs[key] = None
            continue
        try:
            if conv is tuple:
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = conv(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"cannot interpret {value!r}") from None
    try:
        cfg = TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError("<root>", str(e)) from None
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class MetaState:
    """The two meta-parameter sets: network weights and per-layer
    preconditioner parameters for the masked layers."""

    theta: MlpParams
    phi: dict[int, Array]
    kind: precond.PrecondKind

    def with_kind(self, kind: str) -> "MetaState":
        """Same weights, different transform; used by the ablation."""
        return MetaState(
            theta=self.theta, phi=self.phi, kind=replace(self.kind, kind=kind)
        )


@dataclass
class InnerTrace:
    """Adaptation transcript: k_steps+1 parameter snapshots, per-step inner
    losses and the per-step update directions actually applied."""

    params: list[MlpParams]
    losses: list[float]
    grads: list[dict[int, tuple[Array, Array]]]
    flags: list[str] = field(default_factory=list)


def init_meta_state(cfg: TrainConfig, rng: np.random.Generator) -> MetaState:
    theta = init_mlp(cfg.sizes, rng)
    mask = cfg.layer_mask()
    kind = precond.PrecondKind(cfg.kind, mask)
    phi: dict[int, Array] = {}
    if cfg.kind != "identity":
        ident = precond.sp_inv(1.0)
        for li, (w, _) in enumerate(theta.layers):
            if not mask[li]:
                continue
            if cfg.kind in ("gap", "approx_gap"):
                phi[li] = np.full(min(w.shape), ident)
            elif cfg.kind == "meta_sgd":
                phi[li] = np.ones_like(w)
            else:  # meta_sgd_pd
                phi[li] = np.full_like(w, ident)
    return MetaState(theta=theta, phi=phi, kind=kind)


def _phi_transform_vars(
    tape: Tape, phi_vars: dict[int, Var], kind: precond.PrecondKind
) -> dict[int, Var]:
    """Per-layer scaling expression reused across inner steps: sp(m) for the
    spectrum kinds, a or sp(a) for the elementwise kinds."""
    out = {}
    for li, pv in phi_vars.items():
        if kind.kind in ("gap", "approx_gap", "meta_sgd_pd"):
            out[li] = ad.sp(pv)
        else:  # meta_sgd
            out[li] = pv
    return out


def _transform_weight_grad(
    tape: Tape,
    gw: Var,
    s: Var,
    kind: str,
    grad_mode: str,
    flags: list[str],
    step: int,
    layer: int,
) -> Var:
    """Build the tape expression for one layer's transformed weight gradient."""
    if kind in ("meta_sgd", "meta_sgd_pd"):
        return ad.mul(s, gw)

    rows, cols = gw.shape
    transposed = rows > cols
    gor = ad.transpose(gw) if transposed else gw

    if kind == "approx_gap":
        gt = ad.scale_rows(gor, s)
        return ad.transpose(gt) if transposed else gt

    # kind == "gap"
    mode = grad_mode
    if mode == "full_svd":
        try:
            res = linalg.svd(gor.value)
            s2 = res.sigma * res.sigma
            ref = max(float(s2[0]), 1e-300)
            gaps = np.abs(s2[:, None] - s2[None, :])
            np.fill_diagonal(gaps, np.inf)
            degenerate = float(gaps.min()) / ref < linalg.SEP_EPS or (
                res.v.shape[0] > res.u.shape[0] and float(s2[-1]) / ref < linalg.SEP_EPS
            )
        except SvdConvergenceError:
            degenerate = True
        if degenerate:
            flags.append(f"step{step}/layer{layer}: degenerate svd, factor-frozen fallback")
            mode = "factor_frozen"
        else:
            gt = precond.gap_apply(gor, s)
            return ad.transpose(gt) if transposed else gt

    # factor_frozen (also the first_order transform: gor is already detached)
    try:
        res = linalg.svd(gor.value)
    except SvdConvergenceError as e:
        flags.append(
            f"step{step}/layer{layer}: svd residual {e.residual:.2e}, row-scaling fallback"
        )
        gt = ad.scale_rows(gor, s)
        return ad.transpose(gt) if transposed else gt
    u = tape.constant(res.u)
    d = ad.matmul(ad.scale_columns(u, s), ad.transpose(u))
    gt = ad.matmul(d, gor)
    return ad.transpose(gt) if transposed else gt


def _adapt_on_tape(
    tape: Tape,
    layer_vars: list[tuple[Var, Var]],
    s_vars: dict[int, Var],
    kind: precond.PrecondKind,
    x: Array,
    y: Array,
    alpha: float,
    k_steps: int,
    grad_mode: str,
    collect: bool,
) -> tuple[list[tuple[Var, Var]], InnerTrace]:
    xc = tape.constant(x)
    yc = tape.constant(y)
    cur = list(layer_vars)
    trace = InnerTrace(params=[], losses=[], grads=[])
    if collect:
        trace.params.append(vars_to_params(cur))
    for k in range(k_steps):
        pred = forward_mlp(cur, xc)
        loss = ad.mse(pred, yc)
        flat = [v for pair in cur for v in pair]
        grads = ad.grad(loss, flat)
        nxt: list[tuple[Var, Var]] = []
        step_grads: dict[int, tuple[Array, Array]] = {}
        for li, (w, b) in enumerate(cur):
            gw, gb = grads[2 * li], grads[2 * li + 1]
            if grad_mode == "first_order":
                gw = tape.constant(gw.value)
                gb = tape.constant(gb.value)
            if kind.mask[li] and kind.kind != "identity":
                gw_used = _transform_weight_grad(
                    tape, gw, s_vars[li], kind.kind, grad_mode, trace.flags, k, li
                )
            else:
                gw_used = gw
            nxt.append(
                (ad.sub(w, ad.scale(gw_used, alpha)), ad.sub(b, ad.scale(gb, alpha)))
            )
            if collect:
                step_grads[li] = (gw_used.value.copy(), gb.value.copy())
        cur = nxt
        if collect:
            trace.losses.append(float(loss.value))
            trace.grads.append(step_grads)
            trace.params.append(vars_to_params(cur))
    return cur, trace


def inner_adapt(
    state: MetaState,
    support: tuple[Array, Array],
    alpha: float,
    k_steps: int,
    grad_mode: str = "factor_frozen",
) -> InnerTrace:
    """Adapt the weights to one task's support set; returns the transcript.

    The input state is never mutated; the trace carries k_steps+1 parameter
    snapshots.
    """
    x, y = support
    if x.size == 0:
        raise DimensionError("inner_adapt: empty support set")
    tape = Tape()
    layer_vars = params_to_vars(tape, state.theta)
    phi_vars = {li: tape.constant(arr) for li, arr in sorted(state.phi.items())}
    s_vars = _phi_transform_vars(tape, phi_vars, state.kind)
    _, trace = _adapt_on_tape(
        tape, layer_vars, s_vars, state.kind, x, y, alpha, k_steps, grad_mode, True
    )
    return trace


class Adam:
    """Standard Adam on a flat list of arrays (moments 0.9/0.999, eps 1e-8)."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[Array] | None = None
        self.v: list[Array] | None = None

    def step(self, params: Sequence[Array], grads: Sequence[Array]) -> list[Array]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def meta_gradients(
    state: MetaState,
    task_batch: Sequence,
    cfg: TrainConfig,
    collect_traces: bool = False,
) -> tuple[list[Array], list[Array], dict]:
    """Gradients of the summed query loss with respect to the weights and the
    preconditioner parameters (flat weight/bias order, then ascending masked
    layer order), plus per-task metrics."""
    if len(task_batch) == 0:
        raise DimensionError("meta_gradients: empty task batch")

    tape = Tape()
    layer_vars = params_to_vars(tape, state.theta)
    phi_keys = sorted(state.phi)
    phi_vars = {li: tape.constant(state.phi[li]) for li in phi_keys}
    s_vars = _phi_transform_vars(tape, phi_vars, state.kind)

    theta_flat = [v for pair in layer_vars for v in pair]
    phi_list = [phi_vars[li] for li in phi_keys]
    wrt = theta_flat + phi_list

    # gradient of the summed query loss == sum of per-task gradients, reduced
    # in fixed batch order (this keeps duplicate tasks exactly additive)
    per_task: list[float] = []
    traces: list[InnerTrace] = []
    qlosses: list[Var] = []
    for ep in task_batch:
        adapted, trace = _adapt_on_tape(
            tape,
            layer_vars,
            s_vars,
            state.kind,
            ep.support_x,
            ep.support_y,
            cfg.alpha,
            cfg.k_train,
            cfg.grad_mode,
            collect_traces,
        )
        pred = forward_mlp(adapted, tape.constant(ep.query_x))
        qloss = ad.mse(pred, tape.constant(ep.query_y))
        per_task.append(float(qloss.value))
        qlosses.append(qloss)
        if collect_traces:
            traces.append(trace)
        if not np.isfinite(per_task[-1]):
            raise TrainingAbort(
                iteration=-1,
                message=f"non-finite outer loss; per-task losses {per_task}",
            )

    acc: list[Array] | None = None
    for task_grads in ad.grad_many(qlosses, wrt):
        if acc is None:
            acc = [g.value.copy() for g in task_grads]
        else:
            for buf, g in zip(acc, task_grads):
                buf += g.value

    gtheta = acc[: len(theta_flat)]
    gphi = acc[len(theta_flat):]
    total = float(np.sum(per_task))

    metrics = {
        "outer_loss_sum": total,
        "outer_loss_mean": total / len(task_batch),
        "per_task_losses": per_task,
        "grad_norm_theta": float(np.sqrt(sum(float(np.sum(g * g)) for g in gtheta))),
    }
    if collect_traces:
        metrics["traces"] = traces
    return gtheta, gphi, metrics


def outer_step(
    state: MetaState,
    task_batch: Sequence,
    cfg: TrainConfig,
    optimizers: tuple[Adam, Adam] | None = None,
    collect_traces: bool = False,
) -> tuple[MetaState, dict]:
    """One meta-update over a batch of episodes.

    Per-task query losses are summed (not averaged) in fixed batch order; the
    weight set and the preconditioner set get separate Adam updates with
    learning rates beta1 and beta2.
    """
    if optimizers is None:
        optimizers = (Adam(cfg.beta1), Adam(cfg.beta2))
    adam_theta, adam_phi = optimizers

    gtheta, gphi, metrics = meta_gradients(state, task_batch, cfg, collect_traces)
    clip = cfg.clip_meta_grad_norm
    if clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gtheta + gphi)))
        if norm > clip:
            factor = clip / norm
            gtheta = [g * factor for g in gtheta]
            gphi = [g * factor for g in gphi]
        metrics["clipped"] = norm > clip
    phi_keys = sorted(state.phi)

    flat = state.theta.flat()
    new_flat = adam_theta.step(flat, gtheta)
    new_layers = tuple(
        (new_flat[2 * i], new_flat[2 * i + 1]) for i in range(len(state.theta.layers))
    )
    if phi_keys:
        new_phi_arrays = adam_phi.step([state.phi[li] for li in phi_keys], gphi)
        new_phi = {li: arr for li, arr in zip(phi_keys, new_phi_arrays)}
    else:
        new_phi = {}

    new_state = MetaState(theta=MlpParams(new_layers), phi=new_phi, kind=state.kind)
    return new_state, metrics


@dataclass
class RunRecord:
    """Persisted training artifacts: config, windowed loss curve, final state."""

    config: TrainConfig
    losses: list[tuple[int, float]]
    state: MetaState


def meta_train(
    cfg: TrainConfig,
    task_source: Callable[[int], Sequence],
    out_dir=None,
    progress_every: int = 0,
) -> tuple[MetaState, RunRecord]:
    """Run the full outer loop; returns the final state and the run record.

    ``task_source(iteration)`` must yield the episode batch for that
    1-based iteration.  The loss curve holds one row per 100 iterations: the
    mean per-task outer loss over that window.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    state = init_meta_state(cfg, rng)
    adam_theta = Adam(cfg.beta1)
    adam_phi = Adam(cfg.beta2)

    rows: list[tuple[int, float]] = []
    window: list[float] = []
    for it in range(1, cfg.iterations + 1):
        batch = task_source(it)
        try:
            state, metrics = outer_step(
                state, batch, cfg, optimizers=(adam_theta, adam_phi)
            )
        except TrainingAbort as e:
            raise TrainingAbort(iteration=it, message=str(e)) from None
        window.append(metrics["outer_loss_mean"])
        if it % 100 == 0:
            rows.append((it, float(np.mean(window))))
            window.clear()
        if progress_every and it % progress_every == 0:
            print(
                f"iter {it}: outer loss {metrics['outer_loss_mean']:.6f}", flush=True
            )

    record = RunRecord(config=cfg, losses=rows, state=state)
    if out_dir is not None:
        from . import runio

        runio.save_run(out_dir, record)
    return state, record


def meta_test(
    state: MetaState,
    episodes: Sequence,
    alpha: float,
    k_steps_test: int,
) -> np.ndarray:
    """Per-task query MSE after support-set adaptation; no state mutation."""
    out = np.zeros(len(episodes))
    for i, ep in enumerate(episodes):
        trace = inner_adapt(state, (ep.support_x, ep.support_y), alpha, k_steps_test)
        pred = mlp_predict(trace.params[-1], ep.query_x)
        out[i] = mse_value(pred, ep.query_y)
    return out
