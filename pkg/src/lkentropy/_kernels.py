"""Per-step arithmetic kernels with a numba and a pure-numpy implementation.

The backend is chosen by the ``LKENTROPY_BACKEND`` environment variable
(``numba`` or ``numpy``); numba is the default when it imports. Both
implementations stay importable so they can be compared directly.
"""

from __future__ import annotations

import os
import types

import numpy as np

# --------------------------------------------------------------------------
# numpy


def _np_matvec(M, v):
    if M.ndim == 2:
        return v @ M.T
    return np.einsum("aij,aj->ai", M, v)


def _np_ou_update(z, E, Phi, F, L, xi, scale):
    """E z + Phi F + scale * L xi; matrices are shared (n, n) or per path (N, n, n)."""
    noise = _np_matvec(L, xi)
    if scale is not None:
        noise = noise * scale[:, None]
    return _np_matvec(E, z) + _np_matvec(Phi, F) + noise


def _np_underdamped_increment(z0, z1, dt, sqrt_m, beta, beta_dt, beta_grad, V, V_dt, phi, dq):
    r0 = np.sum(z0 * z0, axis=1)
    r1 = np.sum(z1 * z1, axis=1)
    zz = 0.5 * (r0 + r1)
    zzz = 0.5 * (r0[:, None] * z0 + r1[:, None] * z1)
    return (
        (beta_dt * V + beta * V_dt) * dt
        + 0.5 * beta_dt * zz * dt
        + 0.5 * np.sum(beta_grad * zzz, axis=1) * (dt / sqrt_m)
        + np.sum(phi * dq, axis=1)
    )


numpy_kernels = types.SimpleNamespace(
    name="numpy",
    ou_update=_np_ou_update,
    underdamped_increment=_np_underdamped_increment,
)


# --------------------------------------------------------------------------
# numba


def _build_numba():
    import numba

    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def ou_update_shared(z, E, Phi, F, L, xi, scale):
        N, n = z.shape
        out = np.empty_like(z)
        for a in range(N):
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += E[i, j] * z[a, j] + Phi[i, j] * F[a, j]
                noise = 0.0
                for j in range(n):
                    noise += L[i, j] * xi[a, j]
                out[a, i] = acc + scale[a] * noise
        return out

    @njit
    def ou_update_batched(z, E, Phi, F, L, xi):
        N, n = z.shape
        out = np.empty_like(z)
        for a in range(N):
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += E[a, i, j] * z[a, j] + Phi[a, i, j] * F[a, j]
                noise = 0.0
                for j in range(n):
                    noise += L[a, i, j] * xi[a, j]
                out[a, i] = acc + noise
        return out

    @njit
    def underdamped_increment(z0, z1, dt, sqrt_m, beta, beta_dt, beta_grad, V, V_dt, phi, dq):
        N, n = z0.shape
        out = np.empty(N)
        for a in range(N):
            r0 = 0.0
            r1 = 0.0
            for i in range(n):
                r0 += z0[a, i] * z0[a, i]
                r1 += z1[a, i] * z1[a, i]
            cubic = 0.0
            work = 0.0
            for i in range(n):
                cubic += beta_grad[a, i] * 0.5 * (r0 * z0[a, i] + r1 * z1[a, i])
                work += phi[a, i] * dq[a, i]
            out[a] = (
                (beta_dt[a] * V[a] + beta[a] * V_dt[a]) * dt
                + 0.5 * beta_dt[a] * 0.5 * (r0 + r1) * dt
                + 0.5 * cubic * (dt / sqrt_m)
                + work
            )
        return out

    def ou_update(z, E, Phi, F, L, xi, scale):
        z = np.ascontiguousarray(z)
        F = np.ascontiguousarray(F)
        xi = np.ascontiguousarray(xi)
        if E.ndim == 2:
            if scale is None:
                scale = np.ones(z.shape[0])
            return ou_update_shared(z, E, Phi, F, L, xi, np.ascontiguousarray(scale))
        return ou_update_batched(
            z, np.ascontiguousarray(E), np.ascontiguousarray(Phi), F, np.ascontiguousarray(L), xi
        )

    def increment(z0, z1, dt, sqrt_m, beta, beta_dt, beta_grad, V, V_dt, phi, dq):
        c = np.ascontiguousarray
        return underdamped_increment(
            c(z0), c(z1), float(dt), float(sqrt_m), c(beta), c(beta_dt), c(beta_grad), c(V), c(V_dt), c(phi), c(dq)
        )

    return types.SimpleNamespace(name="numba", ou_update=ou_update, underdamped_increment=increment)


try:
    numba_kernels = _build_numba()
except ImportError:  # pragma: no cover
    numba_kernels = None


def select_backend(name=None):
    name = (name or os.environ.get("LKENTROPY_BACKEND", "numba")).lower()
    if name == "numpy" or numba_kernels is None:
        return numpy_kernels
    if name != "numba":
        raise ValueError(f"unknown backend {name!r}")
    return numba_kernels


kernels = select_backend()
