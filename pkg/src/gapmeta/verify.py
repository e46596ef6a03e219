"""Named verification suites behind the CLI ``verify`` subcommand.

Each suite returns a list of CheckResult lines: positive definiteness and
similarity of the explicit preconditioner, the two sphere facts, cosine
decay, the row-scaling approximation, and gradient cross-checks against
central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import linalg, metaloop, precond, tasks
from .errors import DomainError
from .nn import MlpParams, mlp_predict, mse_value
from .theory import (
    CheckResult,
    check_asymptotic_equivalence,
    check_chebyshev_bound,
    check_sphere_variance,
    cosine_decay_sweep,
)

Array = np.ndarray

SUITES = (
    "pd",
    "similarity",
    "variance",
    "chebyshev",
    "cosine",
    "approx",
    "gradcheck",
    "all",
)


def _random_case(rng: np.random.Generator) -> tuple[Array, precond.GapMeta]:
    m = int(rng.integers(2, 13))
    n = int(rng.integers(m, 2 * m + 9))
    g = rng.standard_normal((m, n))
    meta = precond.GapMeta(rng.standard_normal(m) * 1.5)
    return g, meta


def suite_pd(trials: int, rng: np.random.Generator) -> list[CheckResult]:
    """Block positivity: d = u diag(sp(m)) u^T is symmetric with strictly
    positive spectrum, the quadratic form is positive, and applying it to the
    gradient reproduces the singular-value scaling."""
    worst_asym = 0.0
    min_eig = np.inf
    worst_equiv = 0.0
    min_quad = np.inf
    for _ in range(trials):
        g, meta = _random_case(rng)
        res = linalg.svd(g)
        op = precond.build_p_gap(res.u, meta, g.shape[1])
        d = op.d
        worst_asym = max(worst_asym, float(np.linalg.norm(d - d.T)))
        eig = np.linalg.eigvalsh(d)
        min_eig = min(min_eig, float(eig.min()))
        gt = precond.gap_transform(linalg.orient_min_rows(g), meta)
        worst_equiv = max(worst_equiv, float(np.max(np.abs(gt - d @ g))))
        xs = rng.standard_normal((100, d.shape[0]))
        quad = np.einsum("ij,jk,ik->i", xs, d, xs)
        min_quad = min(min_quad, float(quad.min()))
    return [
        CheckResult("pd_symmetry", worst_asym, 1e-12, worst_asym < 1e-12),
        CheckResult("pd_min_eigenvalue", min_eig, 0.0, min_eig > 0.0),
        CheckResult("pd_quadratic_form", min_quad, 0.0, min_quad > 0.0),
        CheckResult("pd_transform_equivalence", worst_equiv, 1e-10, worst_equiv < 1e-10),
    ]


def suite_similarity(trials: int, rng: np.random.Generator) -> list[CheckResult]:
    """Eigenvalues of the dense block equal the sorted positive diagonal."""
    worst = 0.0
    for _ in range(trials):
        g, meta = _random_case(rng)
        res = linalg.svd(g)
        d = precond.build_p_gap(res.u, meta, g.shape[1]).d
        eig = np.sort(np.linalg.eigvalsh(d))
        target = np.sort(meta.diag())
        worst = max(worst, float(np.max(np.abs(eig - target))))
    return [CheckResult("similarity_eigenvalues", worst, 1e-9, worst < 1e-9)]


def suite_variance(trials: int, rng: np.random.Generator) -> list[CheckResult]:
    return [check_sphere_variance(n, trials, rng) for n in (2, 10, 100)]


def suite_chebyshev(trials: int, rng: np.random.Generator) -> list[CheckResult]:
    return [
        check_chebyshev_bound(64, 0.3, trials, rng),
        check_chebyshev_bound(256, 0.25, trials, rng),
    ]


def suite_cosine(
    trials: int, rng: np.random.Generator, n_grid: tuple[int, ...] = (16, 64, 256, 1024)
) -> list[CheckResult]:
    rows = cosine_decay_sweep(8, n_grid, trials, rng)
    stats = [r[1] for r in rows]
    decreasing = all(a > b for a, b in zip(stats, stats[1:]))
    ref_rows = cosine_decay_sweep(8, (400,), trials, rng)
    stat400, ref400 = ref_rows[0][1], ref_rows[0][2]
    rel = abs(stat400 - ref400) / ref400
    return [
        CheckResult(
            "cosine_decay_monotone",
            stats[-1],
            stats[0],
            decreasing,
            detail=" > ".join(f"{s:.4f}" for s in stats),
        ),
        CheckResult("cosine_ref_n400", stat400, ref400, rel < 0.20, detail=f"rel={rel:.3f}"),
    ]


def suite_approx(
    trials: int,
    rng: np.random.Generator,
    n_grid: tuple[int, ...] = (32, 128, 512, 1024),
    m: int = 8,
) -> list[CheckResult]:
    from .theory import DECAY_CHECK_SPECTRUM

    meta = precond.GapMeta(DECAY_CHECK_SPECTRUM[:m])
    rows = check_asymptotic_equivalence(m, n_grid, meta, trials, rng)
    errs = [r[1] for r in rows]
    decreasing = all(a > b for a, b in zip(errs, errs[1:]))
    return [
        CheckResult(
            "approx_error_decay",
            errs[-1],
            errs[0],
            decreasing,
            detail=" > ".join(f"{e:.4f}" for e in errs),
        )
    ]


# ---------------------------------------------------------------------------
# gradient cross-checks
# ---------------------------------------------------------------------------


def _fd_case_builders(rng: np.random.Generator):
    """One scalar-valued test composition per primitive op.

    All random payloads are drawn up front, so the analytic pass and every
    finite-difference probe evaluate the exact same function.
    """
    n, d, r = 4, 3, 3

    def rnd(*shape):
        return rng.standard_normal(shape)

    def wrap(build, *xs):
        # build(tape, vars) -> scalar Var, closing only over fixed arrays
        def f_at(k):
            def f(x):
                t = ad.Tape()
                vals = [x if i == k else xs[i] for i in range(len(xs))]
                vs = [t.constant(v) for v in vals]
                return float(build(t, vs).value)

            return f

        t = ad.Tape()
        vs = [t.constant(v) for v in xs]
        out = build(t, vs)
        grads = ad.grad(out, vs)
        errs = []
        for k in range(len(xs)):
            fd = ad.finite_diff_grad(f_at(k), np.asarray(xs[k], dtype=np.float64), 1e-6)
            an = grads[k].value
            scale_ref = max(float(np.max(np.abs(fd))), 1e-8)
            errs.append(float(np.max(np.abs(an - fd))) / scale_ref)
        return max(errs)

    w = rnd(n, d)
    w_nr = rnd(n, r)
    w_dn = rnd(d, n)
    w_d = rnd(d)
    w_dd = rnd(d, d)
    w_r7 = rnd(r, 7)
    g_r7 = np.diag([3.0, 2.0, 1.0]) @ rnd(r, 7) + 0.5 * rnd(r, 7)
    s_r = precond.sp(rnd(r))

    cases = {
        "add": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.add(v[0], v[1]), t.constant(w))), rnd(n, d), rnd(n, d)),
        "sub": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.sub(v[0], v[1]), t.constant(w))), rnd(n, d), rnd(n, d)),
        "neg": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.neg(v[0]), t.constant(w))), rnd(n, d)),
        "mul": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.mul(v[0], v[1]), t.constant(w))), rnd(n, d), rnd(n, d)),
        "scale": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.scale(v[0], 1.7), t.constant(w))), rnd(n, d)),
        "smul": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.smul(v[0], v[1]), t.constant(w))), np.asarray(rng.standard_normal()), rnd(n, d)),
        "matmul": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.matmul(v[0], v[1]), t.constant(w_nr))), rnd(n, d), rnd(d, r)),
        "transpose": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.transpose(v[0]), t.constant(w_dn))), rnd(n, d)),
        "reshape": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.reshape(v[0], (d, n)), t.constant(w_dn))), rnd(n, d)),
        "relu": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.relu(v[0]), t.constant(w))), rnd(n, d) + 0.05),
        "asum": lambda: wrap(lambda t, v: ad.asum(v[0]), rnd(n, d)),
        "sum_rows": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.sum_rows(v[0]), t.constant(w_d))), rnd(n, d)),
        "repeat_rows": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.repeat_rows(v[0], n), t.constant(w))), rnd(d)),
        "affine": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.affine(v[0], v[1], v[2]), t.constant(w))), rnd(n, r), rnd(r, d), rnd(d)),
        "mse": lambda: wrap(lambda t, v: ad.mse(v[0], v[1]), rnd(n, d), rnd(n, d)),
        "scale_columns": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.scale_columns(v[0], v[1]), t.constant(w))), rnd(n, d), rnd(d)),
        "diag_part": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.diag_part(v[0]), t.constant(w_d))), rnd(d, d)),
        "diag_embed": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.diag_embed(v[0]), t.constant(w_dd))), rnd(d)),
        "sp": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.sp(v[0]), t.constant(w))), rnd(n, d)),
        "sigmoid2": lambda: wrap(lambda t, v: ad.asum(ad.mul(ad.sigmoid2(v[0]), t.constant(w))), rnd(n, d)),
        "gap_apply": lambda: wrap(
            lambda t, v: ad.asum(ad.mul(precond.gap_apply(v[0], v[1]), t.constant(w_r7))),
            g_r7,
            s_r,
        ),
    }
    return cases


def primitive_fd_battery(n_seeds: int, seed: int = 0) -> dict[str, float]:
    """Worst relative FD mismatch per primitive, across seeds."""
    worst: dict[str, float] = {}
    for s in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence((seed, s)))
        for name, case in _fd_case_builders(rng).items():
            err = case()
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def phi_meta_gradient_fd(
    seed: int = 0, h: float = 1e-6
) -> tuple[float, float]:
    """Relative FD error of the one-step meta-gradient on a 1-40-40-1 net.

    With a single inner step the singular factors do not depend on the
    preconditioner parameters, so the factor-frozen gradient is exact in
    them; the weight gradient is the full unrolled second-order gradient.
    Returns (rel_err_phi, rel_err_theta) as L2 ratios.
    """
    cfg = metaloop.TrainConfig(
        shots=5, batch_size=1, iterations=1, alpha=0.01, beta1=1e-3, beta2=1e-3,
        k_train=1, k_test=1, kind="gap", grad_mode="factor_frozen", seed=seed,
    )
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    state = metaloop.init_meta_state(cfg, rng)
    task, ep = tasks.episode_for_index(seed, 0, cfg.shots, cfg.shots)

    def outer_loss(st: metaloop.MetaState) -> float:
        trace = metaloop.inner_adapt(
            st, (ep.support_x, ep.support_y), cfg.alpha, cfg.k_train
        )
        return mse_value(mlp_predict(trace.params[-1], ep.query_x), ep.query_y)

    phi_keys = sorted(state.phi)
    gtheta, gphi, _ = metaloop.meta_gradients(state, [ep], cfg)
    g_theta = np.concatenate([g.ravel() for g in gtheta])
    g_phi = np.concatenate([g.ravel() for g in gphi])

    # finite differences of the full map
    def loss_with_phi(mvec: Array) -> float:
        phi = dict(state.phi)
        out = {}
        k = 0
        for li in phi_keys:
            size = phi[li].size
            out[li] = mvec[k : k + size].reshape(phi[li].shape)
            k += size
        return outer_loss(metaloop.MetaState(state.theta, out, state.kind))

    def loss_with_theta(tvec: Array) -> float:
        layers = []
        k = 0
        for w, b in state.theta.layers:
            layers.append(
                (tvec[k : k + w.size].reshape(w.shape), tvec[k + w.size : k + w.size + b.size])
            )
            k += w.size + b.size
        return outer_loss(metaloop.MetaState(MlpParams(tuple(layers)), state.phi, state.kind))

    phi0 = np.concatenate([state.phi[li].ravel() for li in phi_keys])
    fd_phi = ad.finite_diff_grad(loss_with_phi, phi0, h)
    theta0 = np.concatenate([a.ravel() for a in state.theta.flat()])
    fd_theta = ad.finite_diff_grad(loss_with_theta, theta0, h)

    rel_phi = float(np.linalg.norm(g_phi - fd_phi) / max(np.linalg.norm(fd_phi), 1e-30))
    rel_theta = float(
        np.linalg.norm(g_theta - fd_theta) / max(np.linalg.norm(fd_theta), 1e-30)
    )
    return rel_phi, rel_theta


def suite_gradcheck(rng: np.random.Generator, n_seeds: int = 20) -> list[CheckResult]:
    worst = primitive_fd_battery(n_seeds, seed=int(rng.integers(0, 2**31)))
    worst_err = max(worst.values())
    worst_op = max(worst, key=worst.get)
    rel_phi, rel_theta = phi_meta_gradient_fd(seed=0)
    return [
        CheckResult(
            "primitive_fd", worst_err, 1e-6, worst_err < 1e-6, detail=f"worst op: {worst_op}"
        ),
        CheckResult("meta_grad_phi_fd_k1", rel_phi, 1e-4, rel_phi < 1e-4),
        CheckResult("meta_grad_theta_fd_k1", rel_theta, 1e-4, rel_theta < 1e-4),
    ]


def run_suite(
    name: str,
    trials: int = 1000,
    seed: int = 0,
    n_grid: tuple[int, ...] | None = None,
) -> list[CheckResult]:
    if name not in SUITES:
        raise DomainError(f"unknown suite '{name}'")
    rng = np.random.default_rng(np.random.SeedSequence((seed, SUITES.index(name))))
    results: list[CheckResult] = []
    if name in ("pd", "all"):
        results += suite_pd(trials, rng)
    if name in ("similarity", "all"):
        results += suite_similarity(min(trials, 500), rng)
    if name in ("variance", "all"):
        results += suite_variance(max(trials, 10_000), rng)
    if name in ("chebyshev", "all"):
        results += suite_chebyshev(max(trials, 10_000), rng)
    if name in ("cosine", "all"):
        results += suite_cosine(
            min(trials, 200), rng, n_grid=n_grid or (16, 64, 256, 1024)
        )
    if name in ("approx", "all"):
        results += suite_approx(min(trials, 400), rng, n_grid=n_grid or (32, 128, 512, 1024))
    if name in ("gradcheck", "all"):
        results += suite_gradcheck(rng)
    return results
