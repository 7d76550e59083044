import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rala_kit import linalg as L
from rala_kit.linalg import DimensionError

import oracles

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_case():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_array_equal(L.matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(L.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_against_triple_loop(gen):
    a, b = gen.standard_normal((5, 7)), gen.standard_normal((7, 3))
    assert np.max(np.abs(L.matmul(a, b) - oracles.matmul_loops(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match="2x3.*2x3"):
        L.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_hadamard_trivial_cases(gen):
    a = gen.standard_normal((3, 4))
    np.testing.assert_array_equal(L.hadamard(a, np.ones((3, 4))), a)
    np.testing.assert_array_equal(L.hadamard(a, np.zeros((3, 4))), np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        L.hadamard(a, np.ones((4, 3)))


def test_hadamard_rank_two_times_rank_three():
    a = L.low_rank_factory(20, 15, 2, seed=1)
    b = L.low_rank_factory(20, 15, 3, seed=2)
    assert L.numerical_rank(L.hadamard(a, b)).numerical_rank <= 6


def test_softmax_rows_cases(gen):
    np.testing.assert_allclose(L.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    out = L.softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)
    rows = L.softmax_rows(gen.standard_normal((4, 6)))
    for row in rows:
        assert abs(sum(row) - 1.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift_invariance(a, c):
    s = L.softmax_rows(a)
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-12)
    np.testing.assert_allclose(L.softmax_rows(a + c), s, rtol=1e-9, atol=1e-15)


def test_kernel_elu1_values():
    assert L.kernel_elu1([[0.0]])[0, 0] == 1.0
    assert L.kernel_elu1([[1.0]])[0, 0] == 2.0
    v = L.kernel_elu1([[-50.0]])[0, 0]
    assert v > 0 and v == pytest.approx(oracles.elu1_scalar(-50.0), rel=1e-14)
    assert v == pytest.approx(1.93e-22, rel=1e-2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-700, 700)))
def test_kernel_elu1_positive(a):
    assert np.all(L.kernel_elu1(a) > 0)


def test_kernel_elu1_inverse_roundtrip(gen):
    p = np.abs(gen.standard_normal((5, 4))) + 1e-3
    np.testing.assert_allclose(L.kernel_elu1(L.kernel_elu1_inverse(p)), p, rtol=1e-14)


def test_svd_trivial_cases():
    np.testing.assert_allclose(L.svd(np.diag([3.0, 1.0])).singular_values, [3.0, 1.0])
    np.testing.assert_allclose(L.svd(np.ones((3, 3))).singular_values, [3.0, 0.0, 0.0], atol=1e-14)


def test_svd_against_jacobi_eigensolver(gen):
    a = gen.standard_normal((6, 4))
    eig = oracles.jacobi_eigvals(a.T @ a)
    sv = L.svd(a).singular_values
    np.testing.assert_allclose(sv**2, eig, atol=1e-9)


@pytest.mark.parametrize("shape", [(6, 4), (4, 6), (30, 30), (1, 5), (5, 1), (196, 64)])
def test_svd_factors_reconstruct(gen, shape):
    a = gen.standard_normal(shape)
    s, u, vt = L.svd(a, compute_factors=True)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert np.max(np.abs((u * s) @ vt - a)) < 1e-10 * s[0]


def test_svd_non_convergence_reports_sweeps(monkeypatch, gen):
    monkeypatch.setattr(L, "SVD_MAX_SWEEPS", 1)
    with pytest.raises(L.NumericalError, match="1 sweeps"):
        L.svd(gen.standard_normal((8, 8)))


def test_numerical_rank_cases():
    assert L.numerical_rank(np.eye(4)).numerical_rank == 4
    hankel = [[2, 3, 4], [3, 4, 5], [4, 5, 6]]
    assert oracles.exact_rank(hankel) == 2
    assert L.numerical_rank(hankel).numerical_rank == 2
    rep = L.numerical_rank(np.zeros((3, 2)))
    assert rep.numerical_rank == 0 and rep.sigma_max == 0.0


def test_numerical_rank_report_fields(gen):
    a = gen.standard_normal((7, 5))
    rep = L.numerical_rank(a, rel_eps=1e-3, name="a")
    sv = np.linalg.svd(a, compute_uv=False)
    assert rep.name == "a" and (rep.rows, rep.cols) == (7, 5)
    assert rep.tolerance == pytest.approx(1e-3 * rep.sigma_max)
    assert rep.numerical_rank == int(np.sum(sv > rep.tolerance))
    with pytest.raises(ValueError):
        L.numerical_rank(a, rel_eps=1.5)


def test_low_rank_factory():
    a = L.low_rank_factory(196, 64, 8, seed=7)
    assert L.numerical_rank(a).numerical_rank == 8
    assert np.linalg.matrix_rank(a) == 8
    full = L.low_rank_factory(6, 4, 4, seed=0)
    assert L.numerical_rank(full).numerical_rank == 4
    one = L.low_rank_factory(5, 3, 1, seed=0)
    for row in one[1:]:
        ratio = row / one[0]
        np.testing.assert_allclose(ratio, ratio[0])
    np.testing.assert_array_equal(L.low_rank_factory(5, 3, 2, seed=3), L.low_rank_factory(5, 3, 2, seed=3))
    with pytest.raises(ValueError):
        L.low_rank_factory(5, 3, 4, seed=0)


def test_mean_rows(gen):
    np.testing.assert_array_equal(L.mean_rows([[1.0, 2.0]]), [[1.0, 2.0]])
    np.testing.assert_array_equal(L.mean_rows([[1, 1], [3, 3]]), [[2, 2]])
    a = gen.standard_normal((10, 4))
    oracle = [sum(a[i, j] for i in range(10)) / 10 for j in range(4)]
    assert np.max(np.abs(L.mean_rows(a)[0] - oracle)) < 1e-13


def _pairs(kind, count=100):
    for seed in range(count):
        g = L.rng(seed, f"test.pairs.{kind}")
        n, k, m = (int(x) for x in g.integers(3, 12, size=3))
        ra = int(g.integers(1, min(n, k) + 1))
        rb = int(g.integers(1, min(k, m) + 1))
        yield seed, n, k, m, ra, rb


def test_rank_product_bound():
    for seed, n, k, m, ra, rb in _pairs("product"):
        a = L.low_rank_factory(n, k, ra, seed)
        b = L.low_rank_factory(k, m, rb, seed + 1000)
        r_ab = L.numerical_rank(L.matmul(a, b)).numerical_rank
        assert r_ab <= min(L.numerical_rank(a).numerical_rank, L.numerical_rank(b).numerical_rank)
        assert r_ab <= min(n, m)


def test_rank_subadditivity():
    for seed, n, k, _, ra, _ in _pairs("sum"):
        rb = max(1, min(n, k) - ra)
        a = L.low_rank_factory(n, k, ra, seed)
        b = L.low_rank_factory(n, k, rb, seed + 1000)
        assert L.numerical_rank(a + b).numerical_rank <= ra + rb


def test_rank_of_two_rank_one_sum_is_two():
    a = np.array([[1, 1, 1], [2, 2, 2], [3, 3, 3]])
    b = np.array([[1, 2, 3], [1, 2, 3], [1, 2, 3]])
    assert oracles.exact_rank(a + b) == 2
    assert L.numerical_rank(a + b).numerical_rank == 2


def test_rng_streams_are_reproducible_and_distinct():
    a = L.rng(5, "x").standard_normal(4)
    np.testing.assert_array_equal(a, L.rng(5, "x").standard_normal(4))
    assert not np.array_equal(a, L.rng(5, "y").standard_normal(4))
    assert not np.array_equal(a, L.rng(6, "x").standard_normal(4))
    L.rng(2**64 - 1, "x")  # full 64-bit seeds are accepted
