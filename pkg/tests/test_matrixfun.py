import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings
from hypothesis import strategies as st

from lkentropy.matrixfun import (
    InvalidInputError,
    SpectralError,
    apply_in_slots,
    full_contract,
    is_symmetric,
    kron_sum,
    lyapunov_multilinear,
    mat_exp,
    shifted_inverse,
    symmetric_part_spectrum_in,
    trace_weighted_integral,
    triple_exp_integral,
)

seeds = st.integers(0, 2**32 - 1)


def rand_gt(rng, n, lo=0.3, hi=3.0, skew=1.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    A = rng.normal(size=(n, n)) * skew
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T + 0.5 * (A - A.T)


def rand_pd(rng, n):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(0.3, 3.0, n)) @ Q.T


def series_exp(A, terms=80):
    out = np.eye(len(A))
    term = np.eye(len(A))
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


# --- mat_exp


def test_mat_exp_zero_time_is_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(mat_exp(A, 0.0), np.eye(3))


def test_mat_exp_diagonal():
    np.testing.assert_allclose(mat_exp(np.diag([1.0, 2.0]), -1.0), np.diag([math.exp(-1), math.exp(-2)]), rtol=1e-14)


def test_mat_exp_rotation_block():
    gt = np.array([[1.0, 1.0], [-1.0, 1.0]])
    expect = math.exp(-1) * np.array([[math.cos(1), -math.sin(1)], [math.sin(1), math.cos(1)]])
    got = mat_exp(gt, -1.0)
    np.testing.assert_allclose(got, expect, rtol=1e-13)
    np.testing.assert_allclose(got, series_exp(-gt), rtol=1e-13)


def test_mat_exp_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        mat_exp(np.array([[np.nan]]))


def test_mat_exp_large_norm_against_series():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 3))
    A *= 20.0 / np.linalg.norm(A, 2)
    # squaring of an accurate exp(A / 64) as the independent route
    ref = series_exp(A / 64, 40)
    for _ in range(6):
        ref = ref @ ref
    np.testing.assert_allclose(mat_exp(A), ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 4), st.floats(-2, 2), st.floats(-2, 2))
def test_mat_exp_semigroup(seed, n, s, t):
    A = np.random.default_rng(seed).normal(size=(n, n))
    lhs = mat_exp(A, s) @ mat_exp(A, t)
    rhs = mat_exp(A, s + t)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())


# --- triple exponential integral


def test_triple_scalar_case():
    n, c = 3, 1.7
    G = triple_exp_integral(c * np.eye(n))
    I = np.eye(n)
    expect = np.einsum("ad,be,cf->abcdef", I, I, I) / (3 * c)
    np.testing.assert_allclose(G, expect, atol=1e-15)


def test_triple_diagonal_case():
    lam = np.array([0.5, 1.0, 2.5])
    G = triple_exp_integral(np.diag(lam))
    for idx in np.ndindex(*G.shape):
        i, j = idx[:3], idx[3:]
        expect = 1.0 / lam[list(i)].sum() if i == j else 0.0
        assert abs(G[idx] - expect) < 1e-14


def test_triple_against_quadrature_uniform_field():
    gt = np.array([[1.0, -2.0], [2.0, 1.0]])
    lam_min = 1.0
    E = lambda y: mat_exp(-gt, y)  # noqa: E731

    def integrand(y):
        e = E(y)
        return np.einsum("ad,be,cf->abcdef", e, e, e).ravel()

    ref, _ = scipy.integrate.quad_vec(integrand, 0.0, 40.0 / lam_min, epsabs=1e-13, epsrel=1e-12)
    G = triple_exp_integral(gt)
    # index convention: G[i1 i2 i3, j1 j2 j3] multiplies the j-vector
    np.testing.assert_allclose(G.ravel(), ref, atol=1e-9)


def test_triple_requires_positive_symmetric_part():
    with pytest.raises(SpectralError):
        triple_exp_integral(np.array([[-1.0, 0.0], [0.0, 1.0]]))


def test_triple_dimension_cap():
    with pytest.raises(InvalidInputError):
        triple_exp_integral(np.eye(9))


# --- lyapunov


def test_lyapunov_scalar_rate():
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(lyapunov_multilinear(-2.0 * np.eye(3), b), b / 2.0, rtol=1e-14)


def test_lyapunov_rejects_unstable():
    with pytest.raises(SpectralError):
        lyapunov_multilinear(np.array([[0.5, 0.0], [0.0, -1.0]]), np.ones(2))


def test_lyapunov_random_rank3_residual():
    rng = np.random.default_rng(11)
    C = -rand_gt(rng, 3, 0.1, 2.0)
    assert symmetric_part_spectrum_in(C, -np.inf, -0.1)
    B = rng.normal(size=(3, 3, 3))
    A = lyapunov_multilinear(C, B)
    assert np.abs(apply_in_slots(A, C) + B).max() <= 1e-10 * np.abs(B).max()


def test_lyapunov_matches_integral_definition():
    rng = np.random.default_rng(2)
    C = -rand_gt(rng, 2, 0.5, 2.0)
    B = rng.normal(size=(2, 2))

    def integrand(t):
        e = mat_exp(C, t)
        return (e.T @ B @ e).ravel()

    ref, _ = scipy.integrate.quad_vec(integrand, 0, 80, epsabs=1e-13)
    np.testing.assert_allclose(lyapunov_multilinear(C, B).ravel(), ref, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 4))
def test_lyapunov_residual_property(seed, n, k):
    rng = np.random.default_rng(seed)
    C = -rand_gt(rng, n, 0.1, 3.0)
    B = rng.normal(size=(n,) * k)
    A = lyapunov_multilinear(C, B)
    assert np.abs(apply_in_slots(A, C) + B).max() <= 1e-10 * max(1.0, np.abs(B).max())


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 3), st.integers(1, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_lyapunov_linear_in_source(seed, n, k, a, c):
    rng = np.random.default_rng(seed)
    C = -rand_gt(rng, n)
    B1, B2 = rng.normal(size=(2,) + (n,) * k)
    lhs = lyapunov_multilinear(C, a * B1 + c * B2)
    rhs = a * lyapunov_multilinear(C, B1) + c * lyapunov_multilinear(C, B2)
    assert np.abs(lhs - rhs).max() <= 1e-11 * max(1.0, np.abs(rhs).max())


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_contraction_is_multilinear(seed, n, k):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(n,) * k)
    z1, z2 = rng.normal(size=(2, n))
    a = rng.normal()
    # T(z, ..., z) is homogeneous of degree k
    assert math.isclose(full_contract(T, a * z1), a**k * full_contract(T, z1), rel_tol=1e-10, abs_tol=1e-12)
    assert math.isclose(
        float(np.tensordot(T, z1 + z2, axes=([0], [0])).sum()),
        float(np.tensordot(T, z1, axes=([0], [0])).sum() + np.tensordot(T, z2, axes=([0], [0])).sum()),
        rel_tol=1e-10,
        abs_tol=1e-12,
    )


def test_kron_sum_matches_definition():
    C = np.array([[1.0, 2.0], [3.0, 4.0]])
    I = np.eye(2)
    np.testing.assert_array_equal(kron_sum(C, 2), np.kron(C, I) + np.kron(I, C))


# --- trace weighted integral and shifted inverse


def test_trace_weighted_scalar():
    np.testing.assert_allclose(trace_weighted_integral(2.5 * np.eye(3)), np.eye(3), rtol=1e-14)


def test_trace_weighted_diag():
    np.testing.assert_allclose(trace_weighted_integral(np.diag([1.0, 2.0])), np.diag([11 / 15, 7 / 12]), rtol=1e-14)


def test_trace_weighted_against_quadrature():
    g = rand_pd(np.random.default_rng(5), 3)

    def integrand(y):
        return (np.trace(g @ mat_exp(g, -2 * y)) * mat_exp(g, -y)).ravel()

    ref, _ = scipy.integrate.quad_vec(integrand, 0, 200, epsabs=1e-13)
    np.testing.assert_allclose(trace_weighted_integral(g).ravel(), ref, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 4))
def test_trace_weighted_bridge_identity(seed, n):
    g = rand_pd(np.random.default_rng(seed), n)
    gi = np.linalg.inv(g)
    lhs = (3 * n + 2) / 6 * gi - gi @ trace_weighted_integral(g)
    lam = np.linalg.eigvalsh(g)
    rhs = gi / 3 + 0.5 * sum(np.linalg.inv(g + 2 * l * np.eye(n)) for l in lam)
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_trace_weighted_rejects_non_symmetric():
    with pytest.raises(InvalidInputError):
        trace_weighted_integral(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(SpectralError):
        trace_weighted_integral(np.diag([1.0, -1.0]))


def _uniform_gt(g, B0):
    return np.array([[g, -B0, 0.0], [B0, g, 0.0], [0.0, 0.0, g]])


def test_shifted_inverse_zero_field():
    np.testing.assert_allclose(shifted_inverse(np.eye(3), 1.0), np.eye(3) / 3, rtol=1e-14)


def test_shifted_inverse_unit_field():
    # gamma_tilde = gamma - H with H_ik = d_i psi_k - d_k psi_i puts +B0 below the diagonal
    S = shifted_inverse(_uniform_gt(1.0, 1.0), 1.0)
    expect = np.array([[3 / 10, 1 / 10, 0], [-1 / 10, 3 / 10, 0], [0, 0, 1 / 3]])
    np.testing.assert_allclose(S, expect, atol=1e-15)
    np.testing.assert_allclose(0.5 * (S + S.T), np.diag([3 / 10, 3 / 10, 1 / 3]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 4))
def test_shifted_inverse_multiply_back(seed, n):
    rng = np.random.default_rng(seed)
    gt = rand_gt(rng, n)
    g = 0.5 * (gt + gt.T)
    S = shifted_inverse(gt, g)
    assert np.abs(S @ (gt + 2 * g) - np.eye(n)).max() <= 1e-12 * max(1.0, np.linalg.cond(gt + 2 * g))


def test_shifted_inverse_singular():
    with pytest.raises(SpectralError):
        shifted_inverse(np.diag([-2.0, 1.0]), 1.0)


def test_is_symmetric():
    assert is_symmetric(np.eye(2))
    assert not is_symmetric(np.array([[1.0, 1.0], [0.0, 1.0]]))
