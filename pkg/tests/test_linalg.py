import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapmeta import linalg
from gapmeta.autodiff import finite_diff_grad
from gapmeta.errors import DegenerateSvdError, DimensionError

from oracles import jacobi_eigh


# ---------------------------------------------------------------------------
# svd
# ---------------------------------------------------------------------------


def test_svd_diagonal():
    res = linalg.svd(np.array([[3.0, 0.0], [0.0, 1.0]]))
    assert res.sigma == pytest.approx([3.0, 1.0])
    assert res.u == pytest.approx(np.eye(2))
    assert res.v == pytest.approx(np.eye(2))


def test_svd_zero_matrix():
    res = linalg.svd(np.zeros((3, 5)))
    assert np.array_equal(res.sigma, np.zeros(3))
    assert np.array_equal(res.reconstruct(), np.zeros((3, 5)))
    assert res.u.T @ res.u == pytest.approx(np.eye(3), abs=1e-12)
    assert res.v.T @ res.v == pytest.approx(np.eye(3), abs=1e-12)


def test_svd_sigma_matches_independent_eigensolver(rng):
    g = rng.standard_normal((8, 20))
    res = linalg.svd(g)
    eig = jacobi_eigh(g @ g.T)
    assert np.max(np.abs(res.sigma - np.sqrt(np.maximum(eig, 0.0)))) < 1e-9


def test_svd_invariants_random_sizes(rng):
    for _ in range(60):
        m = int(rng.integers(1, 13))
        n = int(rng.integers(m, 65))
        rank = int(rng.integers(1, m + 1))
        g = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
        g *= 10.0 ** float(rng.integers(-3, 4))
        res = linalg.svd(g)
        nrm = max(np.linalg.norm(g), 1e-300)
        assert np.linalg.norm(res.reconstruct() - g) / nrm < 1e-10
        assert np.linalg.norm(res.u.T @ res.u - np.eye(m)) < 1e-10
        assert np.linalg.norm(res.v.T @ res.v - np.eye(m)) < 1e-10
        assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)


def test_svd_deterministic_bits(rng):
    g = rng.standard_normal((7, 11))
    r1 = linalg.svd(g.copy())
    r2 = linalg.svd(g.copy())
    assert np.array_equal(r1.u, r2.u)
    assert np.array_equal(r1.sigma, r2.sigma)
    assert np.array_equal(r1.v, r2.v)


def test_svd_sign_convention(rng):
    for _ in range(20):
        g = rng.standard_normal((5, 9))
        res = linalg.svd(g)
        for j in range(5):
            k = int(np.argmax(np.abs(res.u[:, j])))
            assert res.u[k, j] >= 0.0


def test_svd_shape_contract():
    with pytest.raises(DimensionError):
        linalg.svd(np.zeros((5, 2)))
    with pytest.raises(DimensionError):
        linalg.svd(np.zeros(4))


# ---------------------------------------------------------------------------
# svd backward
# ---------------------------------------------------------------------------


def test_svd_backward_sigma_only_diagonal():
    res = linalg.svd(np.diag([3.0, 1.0]))
    ds = np.array([0.7, -0.2])
    dg = linalg.svd_backward(res, dsigma=ds)
    assert dg == pytest.approx(res.u @ np.diag(ds) @ res.v.T)


def test_svd_backward_no_cotangents_is_zero():
    res = linalg.svd(np.diag([3.0, 1.0]))
    assert np.array_equal(linalg.svd_backward(res), np.zeros((2, 2)))


def test_svd_backward_matches_finite_differences(rng):
    u0, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    v0, _ = np.linalg.qr(rng.standard_normal((6, 4)))
    g0 = u0 @ np.diag([4.0, 2.5, 1.4, 0.6]) @ v0.T
    cu = rng.standard_normal((4, 4))
    cs = rng.standard_normal(4)
    cv = rng.standard_normal((6, 4))

    def f(g):
        r = linalg.svd(g)
        return float(np.sum(cu * r.u) + np.sum(cs * r.sigma) + np.sum(cv * r.v))

    fd = finite_diff_grad(f, g0.copy(), 1e-6)
    res = linalg.svd(g0)
    an = linalg.svd_backward(res, du=cu, dsigma=cs, dv=cv)
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-5


def test_svd_backward_degenerate_raises():
    res = linalg.svd(np.diag([2.0, 2.0]))
    with pytest.raises(DegenerateSvdError):
        linalg.svd_backward(res, du=np.ones((2, 2)))
    # sigma-only backward stays legal on tied spectra
    dg = linalg.svd_backward(res, dsigma=np.array([1.0, 1.0]))
    assert np.all(np.isfinite(dg))


# ---------------------------------------------------------------------------
# unfolding / orientation
# ---------------------------------------------------------------------------


def test_unfold_rank2_mode1_is_identity(rng):
    g = rng.standard_normal((4, 7))
    assert np.array_equal(linalg.mode_n_unfold(g, 1), g)


def test_unfold_round_trip_2x3x4(rng):
    t = rng.standard_normal((2, 3, 4))
    m = linalg.mode_n_unfold(t, 1)
    assert m.shape == (2, 12)
    assert np.array_equal(linalg.refold_mode_n(m, 1, t.shape), t)


def test_unfold_modes_share_multiset(rng):
    t = rng.standard_normal((3, 4, 5))
    base = np.sort(t.ravel())
    for mode in (1, 2, 3):
        m = linalg.mode_n_unfold(t, mode)
        assert m.shape[0] == t.shape[mode - 1]
        assert np.array_equal(np.sort(m.ravel()), base)


def test_unfold_mode_out_of_range(rng):
    with pytest.raises(DimensionError):
        linalg.mode_n_unfold(rng.standard_normal((2, 3)), 3)
    with pytest.raises(DimensionError):
        linalg.mode_n_unfold(rng.standard_normal((2, 3)), 0)


@settings(max_examples=60, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    data=st.data(),
)
def test_unfold_refold_bijection_property(shape, data):
    mode = data.draw(st.integers(1, len(shape)))
    t = np.arange(float(np.prod(shape))).reshape(shape)
    m = linalg.mode_n_unfold(t, mode)
    assert m.shape == (shape[mode - 1], int(np.prod(shape)) // shape[mode - 1])
    assert np.array_equal(np.sort(m.ravel()), np.sort(t.ravel()))
    assert np.array_equal(linalg.refold_mode_n(m, mode, tuple(shape)), t)


def test_orient_min_rows():
    wide = np.arange(10.0).reshape(2, 5)
    og = linalg.orient_min_rows(wide)
    assert not og.transposed and np.array_equal(og.matrix, wide)
    assert np.array_equal(og.restore(), wide)

    tall = wide.T.copy()
    og2 = linalg.orient_min_rows(tall)
    assert og2.transposed and og2.matrix.shape == (2, 5)
    assert np.array_equal(og2.restore(), tall)

    square = np.arange(1600.0).reshape(40, 40)
    og3 = linalg.orient_min_rows(square)
    assert not og3.transposed  # ties keep the original orientation
    assert np.array_equal(og3.matrix, square)
