import numpy as np
import pytest

from gapmeta import autodiff as ad
from gapmeta.errors import ContractError, DimensionError, DomainError, TapeLookupError
from gapmeta.nn import MlpParams, forward_mlp, init_mlp, mlp_predict, params_to_vars
from gapmeta.verify import primitive_fd_battery


def test_square_gradient():
    t = ad.Tape()
    w = t.constant(3.0)
    (g,) = ad.grad(ad.mul(w, w), [w])
    assert g.value == 6.0


def test_grad_of_grad_cubic():
    # d^2/dw^2 of w^3 is 6w
    t = ad.Tape()
    w = t.constant(2.0)
    f = ad.mul(ad.mul(w, w), w)
    (g1,) = ad.grad(f, [w])
    (g2,) = ad.grad(g1, [w])
    assert g1.value == pytest.approx(12.0)
    assert g2.value == pytest.approx(12.0)


def test_grad_requires_scalar_output():
    t = ad.Tape()
    x = t.constant(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ad.grad(ad.add(x, x), [x])


def test_grad_wrt_other_tape_raises():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.constant(2.0)
    y = t2.constant(2.0)
    with pytest.raises(TapeLookupError):
        ad.grad(ad.mul(x, x), [y])


def test_unreachable_wrt_gets_zero_gradient():
    t = ad.Tape()
    x = t.constant(2.0)
    z = t.constant(np.ones(3))
    (g,) = ad.grad(ad.mul(x, x), [z])
    assert np.array_equal(g.value, np.zeros(3))


def test_shape_mismatch_raises():
    t = ad.Tape()
    a = t.constant(np.ones((2, 3)))
    b = t.constant(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ad.add(a, b)
    with pytest.raises(DimensionError):
        ad.mse(a, b)


def test_mse_values():
    t = ad.Tape()
    p = t.constant(np.array([0.0, 0.0]))
    y = t.constant(np.array([1.0, 3.0]))
    assert ad.mse(p, y).value == pytest.approx(5.0)
    assert ad.mse(p, p).value == 0.0


def test_mse_matches_scalar_loop(rng):
    p = rng.standard_normal((7, 3))
    y = rng.standard_normal((7, 3))
    acc = 0.0
    for i in range(7):
        for j in range(3):
            acc += (p[i, j] - y[i, j]) ** 2
    expect = acc / 21.0
    t = ad.Tape()
    got = float(ad.mse(t.constant(p), t.constant(y)).value)
    assert got == pytest.approx(expect, rel=1e-15)


def test_zero_network_outputs_zero():
    params = MlpParams(
        ((np.zeros((1, 4)), np.zeros(4)), (np.zeros((4, 1)), np.zeros(1)))
    )
    x = np.array([[2.0], [-1.0]])
    assert np.array_equal(mlp_predict(params, x), np.zeros((2, 1)))


def test_identity_composition():
    params = MlpParams(
        ((np.eye(1), np.zeros(1)), (np.eye(1), np.zeros(1)))
    )
    out = mlp_predict(params, np.array([[2.0]]))
    assert out == pytest.approx(np.array([[2.0]]))


def test_forward_tape_matches_predict(rng):
    params = init_mlp((1, 40, 40, 1), rng)
    x = rng.uniform(-5, 5, (5, 1))
    t = ad.Tape()
    out = forward_mlp(params_to_vars(t, params), t.constant(x))
    assert out.value.shape == (5, 1)
    assert np.all(np.isfinite(out.value))
    assert np.array_equal(out.value, mlp_predict(params, x))


def test_replay_reproduces_bit_exactly(rng):
    params = init_mlp((1, 40, 40, 1), rng)
    x = rng.uniform(-5, 5, (5, 1))
    y = rng.standard_normal((5, 1))
    t = ad.Tape()
    lv = params_to_vars(t, params)
    loss = ad.mse(forward_mlp(lv, t.constant(x)), t.constant(y))
    ad.grad(loss, [v for pair in lv for v in pair])  # extend tape with a backward
    replayed = t.replay()
    assert len(replayed) == len(t)
    for a, b in zip(replayed, t.values):
        assert np.array_equal(a, b)


def test_mlp_gradient_matches_finite_differences(rng):
    params = init_mlp((1, 40, 40, 1), rng)
    x = rng.uniform(-5, 5, (5, 1))
    y = rng.standard_normal((5, 1))
    sizes = [(w.shape, b.shape) for w, b in params.layers]

    def unflatten(flat):
        layers = []
        k = 0
        for ws, bs in sizes:
            wn = int(np.prod(ws))
            layers.append((flat[k : k + wn].reshape(ws), flat[k + wn : k + wn + bs[0]]))
            k += wn + bs[0]
        return MlpParams(tuple(layers))

    def f(flat):
        t = ad.Tape()
        lv = params_to_vars(t, unflatten(flat))
        return float(ad.mse(forward_mlp(lv, t.constant(x)), t.constant(y)).value)

    flat0 = np.concatenate([a.ravel() for a in params.flat()])
    fd = ad.finite_diff_grad(f, flat0, 1e-5)

    t = ad.Tape()
    lv = params_to_vars(t, params)
    loss = ad.mse(forward_mlp(lv, t.constant(x)), t.constant(y))
    grads = ad.grad(loss, [v for pair in lv for v in pair])
    an = np.concatenate([g.value.ravel() for g in grads])
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-6


def test_every_primitive_passes_fd_battery():
    # module invariant: analytic vjp vs central differences, 100 random seeds
    worst = primitive_fd_battery(100, seed=7)
    bad = {k: v for k, v in worst.items() if v >= 1e-6}
    assert not bad, f"primitives failing finite-difference check: {bad}"


def test_second_order_through_inner_update(rng):
    # gradient of L(theta - alpha * dL(theta)) wrt theta vs finite differences
    params = init_mlp((1, 8, 1), rng)
    x = rng.uniform(-5, 5, (6, 1))
    y = rng.standard_normal((6, 1))
    alpha = 0.05
    sizes = [(w.shape, b.shape) for w, b in params.layers]

    def unflatten(flat):
        layers = []
        k = 0
        for ws, bs in sizes:
            wn = int(np.prod(ws))
            layers.append((flat[k : k + wn].reshape(ws), flat[k + wn : k + wn + bs[0]]))
            k += wn + bs[0]
        return MlpParams(tuple(layers))

    def composed(flat):
        t = ad.Tape()
        lv = params_to_vars(t, unflatten(flat))
        flat_vars = [v for pair in lv for v in pair]
        loss0 = ad.mse(forward_mlp(lv, t.constant(x)), t.constant(y))
        gs = ad.grad(loss0, flat_vars)
        upd = [ad.sub(v, ad.scale(g, alpha)) for v, g in zip(flat_vars, gs)]
        lv1 = [(upd[2 * i], upd[2 * i + 1]) for i in range(len(lv))]
        return ad.mse(forward_mlp(lv1, t.constant(x)), t.constant(y)), flat_vars

    flat0 = np.concatenate([a.ravel() for a in params.flat()])
    fd = ad.finite_diff_grad(lambda v: float(composed(v)[0].value), flat0, 1e-5)
    loss1, flat_vars = composed(flat0)
    grads = ad.grad(loss1, flat_vars)
    an = np.concatenate([g.value.ravel() for g in grads])
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-5


def test_finite_diff_grad_basics():
    assert ad.finite_diff_grad(lambda v: float(np.sum(v)), np.ones(4), 1e-5) == pytest.approx(
        np.ones(4), abs=1e-9
    )
    assert ad.finite_diff_grad(lambda v: float(v[0] ** 2), np.array([1.0]), 1e-5)[0] == pytest.approx(
        2.0, abs=1e-9
    )
    with pytest.raises(DomainError):
        ad.finite_diff_grad(lambda v: 0.0, np.ones(2), h=0.0)


def test_tape_is_append_only_and_acyclic(rng):
    t = ad.Tape()
    a = t.constant(rng.standard_normal((3, 3)))
    b = ad.matmul(a, a)
    c = ad.asum(b)
    ad.grad(c, [a])
    for i, in_ids in enumerate(t.inputs):
        assert all(j < i for j in in_ids)
