import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkentropy.cellproblem import (
    CellSolution,
    apply_L,
    gaussian_average,
    gaussian_moment,
    poly_contract,
    solve_cell,
    solve_cell_derivative,
    symmetrize,
    verify_residual,
)
from lkentropy.matrixfun import SpectralError, triple_exp_integral

seeds = st.integers(0, 2**32 - 1)


def rand_gt(rng, n, lo=0.2, hi=5.0, skew=1.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    A = rng.normal(size=(n, n)) * skew
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T + 0.5 * (A - A.T)


def sym(A):
    return 0.5 * (A + A.T)


# --- solve_cell


def test_rank_one_scalar_drag():
    b = np.array([1.0, -0.5])
    sol = solve_cell(2.0, 3.0 * np.eye(2), 3.0 * np.eye(2), b)
    assert len(sol.tensors) == 1
    np.testing.assert_allclose(sol.tensors[0], -b / 3.0, rtol=1e-14)
    z = np.array([0.3, 0.7])
    assert sol.value(z) == pytest.approx(-(b @ z) / 3.0, rel=1e-14)


def test_rank_two_residual():
    rng = np.random.default_rng(3)
    gt = rand_gt(rng, 3)
    B = rng.normal(size=(3, 3))
    sol = solve_cell(1.5, gt, sym(gt), B)
    assert [A.ndim for A in sol.tensors] == [2]
    assert verify_residual(sol) <= 1e-9 * (1 + np.abs(B).max() * 100)


def test_rank_three_matches_explicit_chi_one():
    rng = np.random.default_rng(8)
    n = 3
    gt = rand_gt(rng, n)
    g = sym(gt)
    beta = 1.7
    db = rng.normal(size=n)
    B1 = 0.5 * np.einsum("ab,c->abc", np.eye(n), db)
    sol = solve_cell(beta, gt, g, B1)
    G = triple_exp_integral(gt)
    gti = np.linalg.inv(gt)
    W = np.einsum("ab,c,abcxyz->xyz", np.eye(n), db, G)
    for _ in range(20):
        z = rng.normal(size=n)
        w = gti @ z
        cubic = np.einsum("xyz,x,y,z->", W, z, z, z)
        lin = (
            np.einsum("xyz,xy,z->", W, g, w)
            + np.einsum("xyz,xz,y->", W, g, w)
            + np.einsum("xyz,yz,x->", W, g, w)
        )
        explicit = -0.5 * (cubic + 2.0 / beta * lin)
        assert sol.value(z) == pytest.approx(explicit, rel=1e-9, abs=1e-12)


def test_solve_cell_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_cell(0.0, np.eye(2), np.eye(2), np.ones(2))
    with pytest.raises(SpectralError):
        solve_cell(1.0, -np.eye(2), -np.eye(2), np.ones(2))
    with pytest.raises(ValueError):
        solve_cell(1.0, np.eye(2), 2 * np.eye(2), np.ones(2))


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 5), st.floats(0.5, 4.0))
def test_residual_property(seed, n, k, beta):
    if n == 4 and k == 5:
        k = 4
    rng = np.random.default_rng(seed)
    gt = rand_gt(rng, n)
    B = rng.normal(size=(n,) * k)
    sol = solve_cell(beta, gt, sym(gt), B)
    zmax = 4.0 * math.sqrt(n / beta)
    assert verify_residual(sol, 100, seed) <= 1e-9 * (1 + np.abs(B).max() * zmax**k)
    assert [A.ndim for A in sol.tensors] == list(range(k, 0, -2))


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 3), st.integers(1, 4))
def test_solve_cell_linear_in_source(seed, n, k):
    rng = np.random.default_rng(seed)
    gt = rand_gt(rng, n)
    B1, B2 = rng.normal(size=(2,) + (n,) * k)
    a, c = rng.normal(size=2)
    s1, s2 = solve_cell(1.3, gt, sym(gt), B1), solve_cell(1.3, gt, sym(gt), B2)
    s = solve_cell(1.3, gt, sym(gt), a * B1 + c * B2)
    for A, A1, A2 in zip(s.tensors, s1.tensors, s2.tensors):
        assert np.abs(A - (a * A1 + c * A2)).max() <= 1e-11 * max(1.0, np.abs(A).max())


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 3), st.integers(2, 4))
def test_symmetric_inputs_give_symmetric_tensors(seed, n, k):
    rng = np.random.default_rng(seed)
    g = sym(rand_gt(rng, n, skew=0.0))
    B = symmetrize(rng.normal(size=(n,) * k))
    sol = solve_cell(0.8, g, g, B)
    for A in sol.tensors:
        for p in itertools.permutations(range(A.ndim)):
            assert np.abs(A - np.transpose(A, p)).max() <= 1e-12 * max(1.0, np.abs(A).max())


def test_zero_source():
    sol = solve_cell(1.0, np.eye(2), np.eye(2), np.zeros((2, 2, 2)))
    assert all(np.all(A == 0) for A in sol.tensors)
    assert verify_residual(sol) == 0.0


def test_derivative_matches_finite_difference():
    rng = np.random.default_rng(4)
    n, k = 3, 3
    gt = rand_gt(rng, n)
    B = rng.normal(size=(n,) * k)
    db, dgt, dB = 0.3, rng.normal(size=(n, n)), rng.normal(size=(n,) * k)
    beta = 1.2
    h = 1e-6
    plus = solve_cell(beta + h * db, gt + h * dgt, sym(gt + h * dgt), B + h * dB)
    minus = solve_cell(beta - h * db, gt - h * dgt, sym(gt - h * dgt), B - h * dB)
    d = solve_cell_derivative(solve_cell(beta, gt, sym(gt), B), db, dgt, dB)
    for A, Ap, Am in zip(d, plus.tensors, minus.tensors):
        np.testing.assert_allclose(A, (Ap - Am) / (2 * h), atol=1e-6 * max(1.0, np.abs(A).max()))


# --- apply_L


def test_L_of_constant_is_zero():
    gt = np.array([[1.0, 0.5], [-0.5, 2.0]])
    chi = CellSolution(0, [np.array(2.5)], 1.0, gt, np.array(0.0))
    assert apply_L(1.0, gt, np.eye(2), chi, np.array([0.3, -1.0])) == 0.0


def test_L_of_linear_function():
    gt = np.array([[1.0, 0.5], [-0.5, 2.0]])
    a = np.array([0.7, -1.3])
    chi = CellSolution(1, [a], 1.0, gt, a)
    z = np.array([0.4, 0.9])
    Sigma = np.array([[3.0, 1.0], [1.0, 2.0]])
    assert apply_L(1.0, gt, Sigma, chi, z) == pytest.approx(-(gt.T @ a) @ z, rel=1e-14)


def test_L_of_odd_rank_solution_returns_source():
    rng = np.random.default_rng(6)
    gt = rand_gt(rng, 3)
    B = rng.normal(size=(3, 3, 3))
    beta = 1.4
    sol = solve_cell(beta, gt, sym(gt), B)
    z = rng.normal(size=(100, 3)) / math.sqrt(beta)
    lhs = apply_L(beta, gt, 2 / beta * sym(gt), sol, z)
    np.testing.assert_allclose(lhs, poly_contract(B, z, 3), atol=1e-9)


def test_L_rejects_mismatched_parameters():
    sol = solve_cell(1.0, np.eye(2), np.eye(2), np.ones(2))
    with pytest.raises(ValueError):
        apply_L(2.0, np.eye(2), np.eye(2), sol, np.zeros(2))


# --- Gaussian moments


def test_second_moment():
    for i, j in itertools.product(range(3), repeat=2):
        assert gaussian_moment(2.0, (i, j)) == (0.5 if i == j else 0.0)


def test_fourth_moment_wick():
    beta = 1.5
    d = np.eye(3)
    for i, j, k, l in itertools.product(range(3), repeat=4):
        expect = (d[i, j] * d[k, l] + d[i, k] * d[j, l] + d[i, l] * d[j, k]) / beta**2
        assert gaussian_moment(beta, (i, j, k, l)) == pytest.approx(expect, abs=1e-15)


def test_odd_moment_vanishes():
    assert gaussian_moment(1.0, (0, 1, 0)) == 0.0
    assert gaussian_average(1.0, np.ones((2, 2, 2))) == 0.0


def test_average_of_delta_pattern():
    beta = 0.7
    B = np.einsum("ab,cd->abcd", np.eye(2), np.eye(2))
    # E[|z|^4] = n(n+2) / beta^2
    assert gaussian_average(beta, B) == pytest.approx(8 / beta**2, rel=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_stein_recursion_exhaustive(n):
    beta = 1.3
    for k in range(0, 6):
        for idx in itertools.product(range(n), repeat=k):
            for i in range(n):
                lhs = gaussian_moment(beta, (i,) + idx)
                rhs = sum(gaussian_moment(beta, idx[:p] + idx[p + 1 :]) for p in range(k) if idx[p] == i) / beta
                assert lhs == pytest.approx(rhs, abs=1e-14)


def test_gaussian_moment_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        gaussian_moment(0.0, (0, 0))


def test_average_against_sampling():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(2, 2, 2, 2))
    beta = 2.0
    z = rng.normal(size=(400000, 2)) / math.sqrt(beta)
    samples = poly_contract(B, z, 4)
    se = samples.std() / math.sqrt(len(samples))
    assert abs(samples.mean() - gaussian_average(beta, B)) < 4 * se
