import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feddlr.linalg import LinalgError, frobenius_norm, matmul, svd

from oracles import direct_sum_norm

finite_entries = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


@st.composite
def matrices(draw, max_dim=12):
    m = draw(st.integers(1, max_dim))
    n = draw(st.integers(1, max_dim))
    return draw(arrays(np.float64, (m, n), elements=finite_entries))


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(matmul(a, b), np.array([[2.0, 1.0], [4.0, 3.0]]))


def test_matmul_associativity_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    c = rng.standard_normal((5, 2))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.abs(left - right).max() <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(LinalgError, match=r"2x3.*4x2"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_rejects_non_finite():
    bad = np.array([[np.nan, 1.0]])
    with pytest.raises(LinalgError):
        matmul(bad, np.ones((2, 1)))


def test_frobenius_zero_matrix():
    assert frobenius_norm(np.zeros((3, 4))) == 0.0


def test_frobenius_three_four_five():
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


def test_frobenius_matches_direct_sum_oracle():
    a = np.random.default_rng(11).standard_normal((10, 10))
    expected = direct_sum_norm(a)
    assert abs(frobenius_norm(a) - expected) <= 1e-14 * expected


def test_svd_identity_sigma():
    res = svd(np.eye(3))
    assert np.allclose(res.sigma, [1.0, 1.0, 1.0], atol=1e-12)


def test_svd_diagonal_sigma_sorted():
    res = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(res.sigma, [3.0, 2.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 5), (5, 8), (1, 6), (6, 1), (7, 7)])
def test_svd_reconstruction_and_orthonormality(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    res = svd(a)
    rel = frobenius_norm(res.reconstruct() - a) / frobenius_norm(a)
    assert rel <= 1e-10
    s = min(shape)
    assert np.abs(res.U.T @ res.U - np.eye(s)).max() <= 1e-10
    assert np.abs(res.V.T @ res.V - np.eye(s)).max() <= 1e-10
    assert np.all(np.diff(res.sigma) <= 0.0)
    assert np.all(res.sigma >= 0.0)


def test_svd_rank_deficient_keeps_orthonormal_basis():
    res = svd(np.diag([3.0, 0.0, 0.0]))
    assert np.allclose(res.sigma, [3.0, 0.0, 0.0], atol=1e-12)
    assert np.abs(res.U.T @ res.U - np.eye(3)).max() <= 1e-10
    assert np.abs(res.V.T @ res.V - np.eye(3)).max() <= 1e-10
    assert np.abs(res.reconstruct() - np.diag([3.0, 0.0, 0.0])).max() <= 1e-12


def test_svd_zero_matrix():
    res = svd(np.zeros((3, 2)))
    assert np.all(res.sigma == 0.0)
    assert np.abs(res.U.T @ res.U - np.eye(2)).max() <= 1e-12


def test_svd_deterministic_bit_identical():
    a = np.random.default_rng(3).standard_normal((9, 6))
    r1 = svd(a.copy())
    r2 = svd(a.copy())
    assert np.array_equal(r1.U, r2.U)
    assert np.array_equal(r1.sigma, r2.sigma)
    assert np.array_equal(r1.V, r2.V)


def test_svd_sign_convention_largest_entry_positive():
    a = np.random.default_rng(5).standard_normal((6, 4))
    res = svd(a)
    for j in range(4):
        col = res.U[:, j]
        assert col[np.argmax(np.abs(col))] > 0.0


def test_svd_ill_conditioned_stays_accurate():
    rng = np.random.default_rng(13)
    u = np.linalg.qr(rng.standard_normal((20, 20)))[0]
    v = np.linalg.qr(rng.standard_normal((20, 20)))[0]
    sigma = np.logspace(0, -9, 20)
    a = (u * sigma) @ v.T
    res = svd(a)
    assert frobenius_norm(res.reconstruct() - a) / frobenius_norm(a) <= 1e-10
    assert np.abs(res.U.T @ res.U - np.eye(20)).max() <= 1e-10


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_energy_identity(a):
    res = svd(a)
    norm2 = frobenius_norm(a) ** 2
    energy = float(np.sum(res.sigma**2))
    assert abs(norm2 - energy) <= 1e-10 * max(norm2, 1e-30)


@settings(max_examples=60, deadline=None)
@given(matrices(max_dim=8), st.integers(0, 2**32 - 1))
def test_triangle_inequality(a, seed):
    b = np.random.default_rng(seed).standard_normal(a.shape)
    assert frobenius_norm(a + b) <= frobenius_norm(a) + frobenius_norm(b) + 1e-9
