"""Polynomial cell-problem solutions for multilinear sources and Gaussian moments.

For a rank-k tensor B the cell equation is

    beta^-1 gamma_ij d_i d_j chi - (gt z) . grad_z chi = B(z, ..., z) - <B>

where <.> is the average over the centered Gaussian with covariance
beta^-1 I. The solution is a sum of tensors of ranks k, k-2, ... applied
to (z, ..., z).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .matrixfun import apply_in_slots, lyapunov_multilinear, require_pd_symmetric_part, sym

# --------------------------------------------------------------------------
# Gaussian moments


def _pairings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for i, other in enumerate(rest):
        for tail in _pairings(rest[:i] + rest[i + 1 :]):
            yield [(first, other)] + tail


def gaussian_moment(beta, indices):
    """E[z_i1 ... z_ik] for z ~ N(0, beta^-1 I), by Wick pairing."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    k = len(indices)
    if k % 2:
        return 0.0
    count = sum(all(indices[a] == indices[b] for a, b in p) for p in _pairings(list(range(k))))
    return count * beta ** (-k / 2)


def gaussian_average(beta, B):
    """E[B(z, ..., z)] for z ~ N(0, beta^-1 I)."""
    B = np.asarray(B, dtype=float)
    k = B.ndim
    if k == 0:
        return float(B)
    if k % 2:
        return 0.0
    total = 0.0
    for j in range(1, k):
        total += gaussian_average(beta, np.trace(B, axis1=0, axis2=j))
    return total / beta


# --------------------------------------------------------------------------
# tensor helpers


def symmetrize(A):
    A = np.asarray(A, dtype=float)
    k = A.ndim
    if k < 2:
        return A.copy()
    perms = list(itertools.permutations(range(k)))
    return sum(np.transpose(A, p) for p in perms) / len(perms)


def poly_contract(A, z, m):
    """Contract the first m slots of A with z; z may carry a leading batch axis."""
    z = np.asarray(z, dtype=float)
    out = np.asarray(A, dtype=float)
    if z.ndim == 1:
        for _ in range(m):
            out = np.tensordot(z, out, axes=([0], [0]))
        return out
    out = np.broadcast_to(out, (z.shape[0],) + out.shape)
    for _ in range(m):
        out = np.einsum("ai,ai...->a...", z, out)
    return out


def pair_contract(A, gamma, a, d):
    """Contract slots a < d of A against gamma_{i_a i_d}."""
    T = np.tensordot(A, gamma, axes=([a, d], [0, 1]))
    return T


def contracted_pairs(A, gamma):
    """sum_{a<d} A^{ad}: every slot pair contracted against gamma."""
    k = A.ndim
    out = np.zeros((A.shape[0],) * (k - 2)) if k >= 2 else 0.0
    for a in range(k):
        for d in range(a + 1, k):
            out = out + pair_contract(A, gamma, a, d)
    return out


# --------------------------------------------------------------------------
# cell solution


@dataclass
class CellSolution:
    k: int
    tensors: list
    beta: float
    gamma_tilde: np.ndarray
    B: np.ndarray

    @property
    def gamma(self):
        return sym(self.gamma_tilde)

    def _sym(self):
        if not hasattr(self, "_symcache"):
            self._symcache = [symmetrize(A) for A in self.tensors]
        return self._symcache

    def value(self, z):
        """chi(z) = sum_j A_j(z, ..., z)."""
        return sum(poly_contract(A, z, A.ndim) for A in self.tensors)

    def grad(self, z):
        out = 0.0
        for A in self._sym():
            r = A.ndim
            out = out + r * poly_contract(A, z, r - 1)
        return out

    def hess(self, z):
        out = 0.0
        for A in self._sym():
            r = A.ndim
            if r >= 2:
                out = out + r * (r - 1) * poly_contract(A, z, r - 2)
        return out

    def gaussian_average_of_grad(self):
        """E[grad_z chi] under the Gaussian with covariance beta^-1 I."""
        n = self.gamma_tilde.shape[0]
        out = np.zeros(n)
        for A in self._sym():
            r = A.ndim
            # grad of A(z..z) is r A(z..z, .), average over the first r-1 slots
            T = np.moveaxis(A, -1, 0)
            out += r * np.array([gaussian_average(self.beta, T[i]) for i in range(n)])
        return out


def solve_cell(beta, gamma_tilde, gamma, B) -> CellSolution:
    """Tensors A_0, A_1, ... of the polynomial cell-problem solution for source B."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    gt = np.asarray(gamma_tilde, dtype=float)
    g = np.asarray(gamma, dtype=float)
    require_pd_symmetric_part(gt, "gamma_tilde")
    if np.max(np.abs(g - sym(gt))) > 1e-10 * max(1.0, np.abs(gt).max()):
        raise ValueError("gamma must be the symmetric part of gamma_tilde")
    B = np.asarray(B, dtype=float)
    k = B.ndim
    if k < 1:
        raise ValueError("source rank must be at least 1")
    C = -gt
    tensors = [-lyapunov_multilinear(C, B)]
    for _ in range(1, (k - 1) // 2 + 1):
        src = (2.0 / beta) * contracted_pairs(tensors[-1], g)
        tensors.append(lyapunov_multilinear(C, src))
    return CellSolution(k=k, tensors=tensors, beta=float(beta), gamma_tilde=gt, B=B)


def solve_cell_derivative(sol: CellSolution, dbeta, dgamma_tilde, dB):
    """Directional derivative of each A_j for a change (dbeta, dgt, dB) of the inputs.

    Differentiating sum_i A(.., C v_i, ..) = -S gives
    d A = lyap(C, dS + sum_i A(.., dC v_i, ..)).
    """
    C = -sol.gamma_tilde
    dC = -np.asarray(dgamma_tilde, dtype=float)
    g, dg = sol.gamma, sym(np.asarray(dgamma_tilde, dtype=float))
    beta = sol.beta
    out = []
    X = -sol.tensors[0]
    dX = lyapunov_multilinear(C, np.asarray(dB, dtype=float) + apply_in_slots(X, dC))
    out.append(-dX)
    for j in range(1, len(sol.tensors)):
        prev, dprev = sol.tensors[j - 1], out[j - 1]
        dsrc = (
            (-2.0 * dbeta / beta**2) * contracted_pairs(prev, g)
            + (2.0 / beta) * contracted_pairs(dprev, g)
            + (2.0 / beta) * contracted_pairs(prev, dg)
        )
        out.append(lyapunov_multilinear(C, dsrc + apply_in_slots(sol.tensors[j], dC)))
    return out


def apply_L(beta, gamma_tilde, Sigma, chi: CellSolution, z):
    """(L chi)(z) = 1/2 Sigma_kl d_k d_l chi - (gt z) . grad chi, evaluated exactly."""
    gt = np.asarray(gamma_tilde, dtype=float)
    if not np.isclose(beta, chi.beta, rtol=1e-14, atol=0) or not np.allclose(gt, chi.gamma_tilde, rtol=1e-14, atol=0):
        raise ValueError("chi was built for a different (beta, gamma_tilde)")
    Sigma = np.asarray(Sigma, dtype=float)
    z = np.asarray(z, dtype=float)
    if chi.k == 0:
        return 0.0 if z.ndim == 1 else np.zeros(len(z))
    grad = chi.grad(z)
    hess = chi.hess(z)
    drift = z @ gt.T
    if z.ndim == 1:
        second = 0.5 * np.sum(Sigma * hess) if np.ndim(hess) else 0.0
        return second - drift @ grad
    second = 0.5 * np.einsum("kl,akl->a", Sigma, hess) if np.ndim(hess) else 0.0
    return second - np.einsum("ak,ak->a", drift, grad)


def verify_residual(chi: CellSolution, sample_count=100, seed=0):
    """max |L chi(z) - B(z..z) + <B>| over Gaussian samples of z."""
    n = chi.gamma_tilde.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((sample_count, n)) / math.sqrt(chi.beta)
    Sigma = (2.0 / chi.beta) * chi.gamma
    lhs = apply_L(chi.beta, chi.gamma_tilde, Sigma, chi, z)
    rhs = poly_contract(chi.B, z, chi.k) - gaussian_average(chi.beta, chi.B)
    return float(np.max(np.abs(lhs - rhs)))
