"""Dense small-n matrix calculus.

Tensors are plain numpy arrays of shape ``(n,) * k`` with row-major index
order. A rank-6 G tensor is stored with axes ``(i1, i2, i3, j1, j2, j3)``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

SPECTRAL_TOL = 1e-10
MAX_TRIPLE_DIM = 8


class InvalidInputError(ValueError):
    pass


class SpectralError(ValueError):
    """A spectral precondition (definiteness, stability) does not hold."""


def _as_square(A, name="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


def sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def is_symmetric(A, tol=SPECTRAL_TOL):
    A = np.asarray(A, dtype=float)
    scale = max(1.0, float(np.max(np.abs(A), initial=0.0)))
    return bool(np.max(np.abs(A - A.T), initial=0.0) <= tol * scale)


def symmetric_part_spectrum(A):
    """Sorted eigenvalues of (A + A^T)/2."""
    return np.linalg.eigvalsh(sym(_as_square(A)))


def symmetric_part_spectrum_in(A, a, b):
    ev = symmetric_part_spectrum(A)
    return bool(ev[0] > a and ev[-1] < b)


def require_pd_symmetric_part(A, name="matrix"):
    ev = symmetric_part_spectrum(A)
    if ev[0] <= SPECTRAL_TOL:
        raise SpectralError(
            f"symmetric part of {name} is not positive definite (min eigenvalue {ev[0]:.3e})"
        )


def mat_exp(A, t=1.0):
    """Return exp(t A)."""
    A = _as_square(A)
    if not np.isfinite(t):
        raise InvalidInputError("t must be finite")
    return scipy.linalg.expm(t * A)


def kron_sum(C, k):
    """Matrix of sum_i I x ... x C x ... x I (C in slot i) on n**k row-major vectors."""
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    out = np.zeros((n**k, n**k))
    eye = np.eye(n)
    for slot in range(k):
        term = np.ones((1, 1))
        for i in range(k):
            term = np.kron(term, C if i == slot else eye)
        out += term
    return out


def triple_exp_integral(gamma_tilde):
    """G = int_0^inf e^{-y gt} (x) e^{-y gt} (x) e^{-y gt} dy as a rank-6 tensor.

    This is the inverse of the threefold Kronecker sum of gamma_tilde.
    """
    gt = _as_square(gamma_tilde, "gamma_tilde")
    n = gt.shape[0]
    if n > MAX_TRIPLE_DIM:
        raise InvalidInputError(f"dimension {n} exceeds the cap of {MAX_TRIPLE_DIM}")
    require_pd_symmetric_part(gt, "gamma_tilde")
    G = np.linalg.inv(kron_sum(gt, 3))
    return G.reshape((n,) * 6)


def _require_stable(C):
    if symmetric_part_spectrum(C)[-1] < -SPECTRAL_TOL:
        return
    # the symmetric-part test is only sufficient; fall back to the spectrum
    if np.max(np.linalg.eigvals(C).real) < -SPECTRAL_TOL:
        return
    raise SpectralError("C has an eigenvalue with non-negative real part")


def lyapunov_multilinear(C, B):
    """Solve sum_i A(..., C v_i, ...) = -B for the rank-k tensor A.

    The solution is int_0^inf B(e^{tC} v_1, ..., e^{tC} v_k) dt, computed
    with a dense Kronecker-sum solve.
    """
    C = _as_square(C, "C")
    B = np.asarray(B, dtype=float)
    k = B.ndim
    n = C.shape[0]
    if k == 0:
        raise InvalidInputError("source tensor must have rank >= 1")
    if B.shape != (n,) * k:
        raise InvalidInputError(f"tensor shape {B.shape} does not match dimension {n}")
    _require_stable(C)
    L = kron_sum(C.T, k)
    A = np.linalg.solve(L, -B.reshape(-1))
    return A.reshape(B.shape)


def apply_in_slots(A, C):
    """sum_i A(..., C v_i, ...) as a tensor (the Lyapunov operator)."""
    A = np.asarray(A, dtype=float)
    out = np.zeros_like(A)
    for slot in range(A.ndim):
        out += np.moveaxis(np.tensordot(A, C, axes=([slot], [0])), -1, slot)
    return out


def trace_weighted_integral(gamma):
    """M = int_0^inf Tr[gamma e^{-2 y gamma}] e^{-y gamma} dy for symmetric PD gamma."""
    g = _as_square(gamma, "gamma")
    if not is_symmetric(g):
        raise InvalidInputError("gamma must be symmetric")
    lam, U = np.linalg.eigh(sym(g))
    if lam[0] <= SPECTRAL_TOL:
        raise SpectralError("gamma must be positive definite")
    w = (lam[None, :] / (2.0 * lam[None, :] + lam[:, None])).sum(axis=1)
    return (U * w) @ U.T


def shifted_inverse(gamma_tilde, gamma):
    """(gt + 2 gamma)^{-1}; a scalar gamma means gamma * I."""
    gt = _as_square(gamma_tilde, "gamma_tilde")
    g = np.asarray(gamma, dtype=float)
    shift = 2.0 * g * np.eye(gt.shape[0]) if g.ndim == 0 else 2.0 * _as_square(g, "gamma")
    M = gt + shift
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise SpectralError("gamma_tilde + 2 gamma is singular")
    return np.linalg.inv(M)


def contract(T, *vectors):
    """T(v_1, ..., v_j) over the leading j slots."""
    out = np.asarray(T, dtype=float)
    for v in vectors:
        out = np.tensordot(v, out, axes=([0], [0]))
    return out


def full_contract(T, z):
    """T(z, ..., z)."""
    return contract(T, *([z] * np.ndim(T)))
