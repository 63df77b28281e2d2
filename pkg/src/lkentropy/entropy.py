"""Entropy-production ledgers, small-mass limit formulas and anomaly evaluators.

Ledgers are ``Observable`` objects consumed by ``simulate_ensemble``. Limit
formulas are evaluated on recorded overdamped paths (``PathGrid``) and
return one value per path, so that combined estimators keep their
per-path correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cellproblem import CellSolution, gaussian_average, solve_cell, solve_cell_derivative
from .matrixfun import kron_sum, shifted_inverse, sym, trace_weighted_integral, triple_exp_integral
from .simulate import Observable, PathGrid
from .system import STANDARD, UNIFORM_B, AssumptionError, SystemSpec, _uniform_b_checks

VARIANTS = ("general", "psi0", "psi0_eigen", "scalar", "uniformB")
PATH_AGREEMENT_TOL = 1e-9


class VariantError(ValueError):
    pass


# --------------------------------------------------------------------------
# pointwise building blocks (all batched over the bundle's points)


def entropy_force(b):
    """V grad(beta) + beta F_ext - beta d_t psi."""
    return b.V[:, None] * b.beta_grad + b.beta[:, None] * (b.F_ext - b.psi_dt)


def entropy_force_jac(b):
    """[a, i, j] = d_i of component j of ``entropy_force``."""
    return (
        b.V_grad[:, :, None] * b.beta_grad[:, None, :]
        + b.V[:, None, None] * b.beta_hess
        + b.beta_grad[:, :, None] * (b.F_ext - b.psi_dt)[:, None, :]
        + b.beta[:, None, None] * (b.F_ext_jac - b.psi_dt_jac)
    )


def div_force_gti(b):
    """d_i (Phi_j (gt^-1)^{ji}) with Phi = ``entropy_force``."""
    return np.einsum("aij,aji->a", entropy_force_jac(b), b.gti) + np.einsum(
        "aj,aiji->a", entropy_force(b), b.dgti
    )


def _g_batch(gt):
    """G for every point of a batch of gamma_tilde matrices, shape (N, n, ..., n)."""
    N, n, _ = gt.shape
    eye = np.eye(n)
    K = (
        np.einsum("aij,kl,mp->aikmjlp", gt, eye, eye)
        + np.einsum("ij,akl,mp->aikmjlp", eye, gt, eye)
        + np.einsum("ij,kl,amp->aikmjlp", eye, eye, gt)
    ).reshape(N, n**3, n**3)
    return np.linalg.inv(K).reshape((N,) + (n,) * 6)


def g_tensor(b):
    """G at every point of a bundle; computed once when gamma_tilde is constant."""
    if b.spec.gamma_tilde_uniform:
        G = triple_exp_integral(b.gt[0])
        return np.broadcast_to(G, (b.N,) + G.shape)
    return _g_batch(b.gt)


def anomaly_matrix_general(b):
    """M with anomaly integrand beta^-3 grad(beta) . M grad(beta), from G."""
    n = b.n
    P = np.einsum("aiikxyz->akxyz", g_tensor(b))
    K = (
        0.5 * n * np.eye(n)[None]
        + np.einsum("akxyy,axl->akl", P, b.gt)
        - np.einsum("akxyl,axy->akl", P, b.gamma)
    )
    return K @ b.gti


def _eig_sym(g):
    lam, U = np.linalg.eigh(sym(g))
    if np.any(lam <= 0):
        raise AssumptionError("gamma is not positive definite")
    return lam, U


def anomaly_matrix_psi0(b):
    """((3n+2)/6 - M(gamma)) gamma^-1 with M the trace-weighted exponential integral."""
    n = b.n
    lam, U = _eig_sym(b.gamma)
    w = (lam[:, None, :] / (2.0 * lam[:, None, :] + lam[:, :, None])).sum(axis=2)
    d = ((3 * n + 2) / 6.0 - w) / lam
    return (U * d[:, None, :]) @ np.swapaxes(U, 1, 2)


def anomaly_matrix_eigen(b):
    """1/2 (2/3 gamma^-1 + sum_i (gamma + 2 lambda_i)^-1)."""
    lam, U = _eig_sym(b.gamma)
    d = (2.0 / 3.0) / lam + (1.0 / (lam[:, None, :] + 2.0 * lam[:, :, None])).sum(axis=1)
    return 0.5 * (U * d[:, None, :]) @ np.swapaxes(U, 1, 2)


def _scalar_gamma(b):
    g = b.gamma[:, 0, 0]
    dev = np.abs(b.gamma - g[:, None, None] * np.eye(b.n)[None]).max()
    if dev > 1e-12 * max(1.0, float(np.abs(g).max())):
        raise VariantError("the scalar variant needs gamma proportional to the identity")
    return g


def anomaly_matrix_scalar(b):
    g = _scalar_gamma(b)
    return ((b.n + 2) / 6.0 / g)[:, None, None] * np.eye(b.n)[None]


def anomaly_matrix_uniform_b(b):
    g = _scalar_gamma(b)
    if b.spec.gamma_tilde_uniform:
        S = shifted_inverse(b.gt[0], g[0])
        S = np.broadcast_to(S, b.gt.shape)
    else:
        S = np.linalg.inv(b.gt + 2.0 * g[:, None, None] * np.eye(b.n)[None])
    return 0.5 * (b.n + 2) * S


def require_variant(spec: SystemSpec, variant):
    if variant not in VARIANTS:
        raise VariantError(f"unknown anomaly variant {variant!r}")
    if variant in ("psi0", "psi0_eigen", "scalar") and not spec.psi_zero:
        raise VariantError(f"variant {variant!r} needs psi = 0")
    if variant == "uniformB":
        probe = np.zeros((1, spec.n))
        hard, _ = _uniform_b_checks(spec, probe, np.array([0.0]))
        if hard:
            raise VariantError("variant 'uniformB' needs the uniform-field setup: " + "; ".join(hard))


_MATRICES = {
    "general": anomaly_matrix_general,
    "psi0": anomaly_matrix_psi0,
    "psi0_eigen": anomaly_matrix_eigen,
    "scalar": anomaly_matrix_scalar,
    "uniformB": anomaly_matrix_uniform_b,
}


def anomaly_integrand_from_bundle(b, variant="general"):
    M = _MATRICES[variant](b)
    return np.einsum("ak,akl,al->a", b.beta_grad, M, b.beta_grad) / b.beta**3


def anomaly_integrand(spec: SystemSpec, t, q, variant="general"):
    """Pointwise anomaly integrand at time t for positions q of shape (N, n)."""
    require_variant(spec, variant)
    return anomaly_integrand_from_bundle(spec.bundle(t, q), variant)


# --- limit-formula integrands


def _common_terms(b):
    """d_r(beta V) - beta^-1 d_r beta."""
    return b.beta_dt * b.V + b.beta * b.V_dt - b.beta_dt / b.beta


def limit_integrand_general(b):
    return (
        _common_terms(b)
        + np.einsum("aj,ajk,ak->a", entropy_force(b), b.gti, b.F)
        + div_force_gti(b) / b.beta
        + anomaly_integrand_from_bundle(b, "general")
    )


def limit_integrand_psi0(b):
    """Same integrand assembled for psi = 0 from gamma alone."""
    gi = b.gamma_inv
    dgi = -gi[:, None] @ b.gamma_grad @ gi[:, None]
    phi = b.V[:, None] * b.beta_grad + b.beta[:, None] * b.F_ext
    phi_jac = (
        b.V_grad[:, :, None] * b.beta_grad[:, None, :]
        + b.V[:, None, None] * b.beta_hess
        + b.beta_grad[:, :, None] * b.F_ext[:, None, :]
        + b.beta[:, None, None] * b.F_ext_jac
    )
    div = np.einsum("aij,aji->a", phi_jac, gi) + np.einsum("aj,aiji->a", phi, dgi)
    force = -b.V_grad + b.F_ext
    return (
        _common_terms(b)
        + div / b.beta
        + np.einsum("aj,ajk,ak->a", force, gi, phi)
        + anomaly_integrand_from_bundle(b, "psi0")
    )


def overdamped_expected_integrand(b):
    """Integrand of the expected overdamped entropy (no anomaly term)."""
    return (
        _common_terms(b)
        + np.einsum("aj,ajk,ak->a", entropy_force(b), b.gti, b.F)
        + div_force_gti(b) / b.beta
    )


def log_beta_ito_integrand(b):
    """Integrand whose expectation gives E[ln(beta_t / beta_s)] by Ito's formula."""
    w = b.beta_grad / b.beta[:, None]
    dw = b.beta_hess / b.beta[:, None, None] - w[:, :, None] * w[:, None, :]
    return (
        b.beta_dt / b.beta
        + np.einsum("ai,ai->a", w, b.drift_force + b.S_ito)
        + np.einsum("aij,aji->a", dw, b.gti) / b.beta
    )


# --------------------------------------------------------------------------
# path functionals on recorded grids


def _trapz_over(grid: PathGrid, fn, spec):
    vals = np.stack([fn(spec.bundle(t, grid.q[:, r])) for r, t in enumerate(grid.times)], axis=1)
    return np.trapezoid(vals, grid.times, axis=1)


def _boundary(spec, grid: PathGrid, log_coef):
    qs, qt = grid.q[:, 0], grid.q[:, -1]
    s, t = grid.times[0], grid.times[-1]
    bs, bt = spec.bundle(s, qs), spec.bundle(t, qt)
    return bs.beta * bs.V - bt.beta * bt.V + log_coef * np.log(bt.beta / bs.beta)


def _need_grid(grid):
    if grid is None or not isinstance(grid, PathGrid) or len(grid.times) < 2:
        raise ValueError("a recorded path grid is required")


def limit_formula(spec: SystemSpec, grid: PathGrid, s, t, check=True):
    """Per-path values whose mean is the small-mass limit of E[S_env] over [s, t].

    With psi = 0 the formula is evaluated along a second route built from
    gamma alone, and the two must agree at every sample point.
    """
    _need_grid(grid)
    g = grid.window(s, t)
    n = spec.n
    if spec.psi_zero and check:

        def fn(b):
            a = limit_integrand_general(b)
            c = limit_integrand_psi0(b)
            gap = np.max(np.abs(a - c) / np.maximum(1.0, np.abs(a)))
            if gap > PATH_AGREEMENT_TOL:
                raise AssertionError(f"psi=0 and general limit integrands differ by {gap:.3e}")
            return a

    else:
        fn = limit_integrand_general
    return _boundary(spec, g, 0.5 * (n + 2)) + _trapz_over(g, fn, spec)


def limit_path_disagreement(spec: SystemSpec, grid: PathGrid, s, t):
    """Max relative pointwise gap between the general and psi=0 integrands, per path."""
    if not spec.psi_zero:
        raise VariantError("the psi = 0 route needs psi = 0")
    g = grid.window(s, t)
    gaps = [
        np.abs(limit_integrand_general(b) - limit_integrand_psi0(b)) / np.maximum(1.0, np.abs(limit_integrand_general(b)))
        for b in (spec.bundle(tt, g.q[:, r]) for r, tt in enumerate(g.times))
    ]
    return np.max(np.stack(gaps, axis=1), axis=1)


def expected_overdamped_entropy(spec: SystemSpec, grid: PathGrid, s, t):
    """Per-path values whose mean is E[S_env,0] over [s, t] in closed form."""
    _need_grid(grid)
    g = grid.window(s, t)
    return _boundary(spec, g, 1.0) + _trapz_over(g, overdamped_expected_integrand, spec)


def anomaly(spec: SystemSpec, grid: PathGrid, s, t, variant="general"):
    """Per-path time integral of the anomaly integrand."""
    _need_grid(grid)
    require_variant(spec, variant)
    g = grid.window(s, t)
    return _trapz_over(g, lambda b: anomaly_integrand_from_bundle(b, variant), spec)


def log_beta_ratio_ito(spec: SystemSpec, grid: PathGrid, s, t):
    _need_grid(grid)
    return _trapz_over(grid.window(s, t), log_beta_ito_integrand, spec)


def applicable_variants(spec: SystemSpec):
    out = ["general"]
    if spec.psi_zero:
        out += ["psi0", "psi0_eigen"]
        try:
            _scalar_gamma(spec.bundle(0.0, np.zeros((1, spec.n))))
            if spec.gamma_scalar_constant:
                out.append("scalar")
        except VariantError:
            pass
    try:
        require_variant(spec, "uniformB")
        out.append("uniformB")
    except VariantError:
        pass
    return out


@dataclass
class AnomalyReport:
    values: dict
    stderr: dict
    count: int
    cross_checks: dict = field(default_factory=dict)

    @property
    def consistent(self):
        return all(v["pass"] for v in self.cross_checks.values())


def anomaly_report(per_path: dict) -> AnomalyReport:
    """Means, stderrs and pairwise agreement of per-path anomaly values.

    Two variants agree when the per-path differences have mean within three
    standard errors of zero (exactly zero differences also pass).
    """
    keys = list(per_path)
    N = len(per_path[keys[0]]) if keys else 0
    vals, errs, checks = {}, {}, {}
    for k in keys:
        v = np.asarray(per_path[k], dtype=float)
        vals[k] = float(v.mean())
        errs[k] = float(v.std(ddof=1) / math.sqrt(N)) if N > 1 else float("nan")
    for i, a in enumerate(keys):
        for c in keys[i + 1 :]:
            d = np.asarray(per_path[a]) - np.asarray(per_path[c])
            mean = float(d.mean())
            se = float(d.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
            ok = abs(mean) <= 3 * se or abs(mean) <= 1e-9 * max(1.0, abs(vals[a]))
            checks[(a, c)] = {"difference": mean, "stderr": se, "pass": bool(ok)}
    return AnomalyReport(vals, errs, N, checks)


# --------------------------------------------------------------------------
# Y forms (the two intermediate terms of the limit derivation)


def _point(b, a):
    return b.spec.bundle(b.t, b.q[a : a + 1])


def y1_raw(b, g_builder=None):
    """Y1 assembled from G, at every point of a bundle (looped; for verification)."""
    g_builder = g_builder or triple_exp_integral
    out = np.empty((b.N, b.n))
    for a in range(b.N):
        G = g_builder(b.gt[a])
        gti, gam, db, beta = b.gti[a], b.gamma[a], b.beta_grad[a], b.beta[a]
        phi = entropy_force(_point(b, a))[0]
        # delta_{j1 j2} G^{j1 j2 l}_{i1 i2 i3} (delta^{i1 i3} db^{i2} + 1/2 delta^{i1 i2} db^{i3})
        Gj = np.einsum("abcjjl->abcl", G)
        t2 = np.einsum("abal,b->l", Gj, db) + 0.5 * np.einsum("aacl,c->l", Gj, db)
        P = np.einsum("aacxyz,c->xyz", G, db)
        t3 = np.einsum("xyk,xy,kl->l", P, gam, gti) + 2 * np.einsum("kyz,yz,kl->l", P, gam, gti)
        out[a] = phi @ gti + (t2 + t3) / beta
    return out


def y1_simplified(b):
    return np.einsum("ai,ail->al", entropy_force(b) + 0.5 * (b.n + 2) * (b.beta_grad / b.beta[:, None]), b.gti)


def _g_and_grad(gt, dgt):
    """G and its q-derivatives d_i G = -G (d_i K) G for the threefold Kronecker sum K."""
    n = gt.shape[0]
    Kinv = np.linalg.inv(kron_sum(gt, 3))
    dG = np.stack([-(Kinv @ kron_sum(dgt[i], 3) @ Kinv) for i in range(n)])
    return Kinv.reshape((n,) * 6), dG.reshape((n,) + (n,) * 6)


def y2_raw(b):
    """Y2 assembled from G and its derivatives (looped; for verification)."""
    out = np.empty(b.N)
    n = b.n
    for a in range(b.N):
        G, dG = _g_and_grad(b.gt[a], b.dgt[a])
        beta, db, hb = b.beta[a], b.beta_grad[a], b.beta_hess[a]
        gam, dgam, gti, dgti = b.gamma[a], b.gamma_grad[a], b.gti[a], b.dgti[a]
        P = np.einsum("aacxyz->cxyz", G)  # [i3, j1, j2, j3]
        dP = np.einsum("iaacxyz->icxyz", dG)  # [i, i3, j1, j2, j3]
        # 1/2 beta^-2 d_i(db^{i3} P_{i3 j1 j2 j3}) (delta_{j1 j2} delta_{j3 i} + 2 delta_{j2 j3} delta_{j1 i})
        R = np.einsum("ic,cxyz->icxyz", hb, P) + np.einsum("c,icxyz->icxyz", db, dP)
        t1 = 0.5 / beta**2 * (np.einsum("icxxi->", R) + 2 * np.einsum("icixx->", R))
        # beta^-1 d_i (w_{i3} Q_{i3 l} gti^{l i}), Q = P_{i3 j1 j2 l} gamma_{j1 j2} + 2 P_{i3 j1 l j3} gamma_{j1 j3}
        w = db / beta
        dw = hb / beta - np.outer(db, db) / beta**2
        Q = np.einsum("cxyl,xy->cl", P, gam) + 2 * np.einsum("cxlz,xz->cl", P, gam)
        dQ = (
            np.einsum("icxyl,xy->icl", dP, gam)
            + np.einsum("cxyl,ixy->icl", P, dgam)
            + 2 * np.einsum("icxlz,xz->icl", dP, gam)
            + 2 * np.einsum("cxlz,ixz->icl", P, dgam)
        )
        t2 = (
            np.einsum("ic,cl,li->", dw, Q, gti)
            + np.einsum("c,icl,li->", w, dQ, gti)
            + np.einsum("c,cl,ili->", w, Q, dgti)
        ) / beta
        out[a] = t1 + t2 + div_force_gti(_point(b, a))[0] / beta
    return out


def y2_simplified(b):
    n = b.n
    c = 0.5 * (n + 2)
    first = (np.einsum("aij,aji->a", b.beta_hess, b.gti) + np.einsum("aj,aiji->a", b.beta_grad, b.dgti)) / b.beta**2
    P = np.einsum("aiicxyz->acxyz", g_tensor(b))
    Q = np.einsum("acxyl,axy->acl", P, b.gamma) + 2 * np.einsum("acxlz,axz->acl", P, b.gamma)
    last = np.einsum("ai,ac,acl,ali->a", b.beta_grad, b.beta_grad, Q, b.gti) / b.beta**3
    return c * first + div_force_gti(b) / b.beta - last


def y1_uniform_b(b):
    """Uniform-field reduction of Y1 through (gt + 2 gamma)^-1."""
    g = _scalar_gamma(b)[:, None, None]
    S = np.linalg.inv(b.gt + 2.0 * g * np.eye(b.n)[None])
    w = b.beta_grad / b.beta[:, None]
    return (
        np.einsum("ai,ail->al", entropy_force(b), b.gti)
        + (1 + 0.5 * b.n) * np.einsum("aj,ajl->al", w, S)
        + (b.n + 2) * np.einsum("aj,ajk,akl->al", w, g * S, b.gti)
    )


def g_contraction_identities(gt, g_builder=None):
    """Residuals of the three G contraction identities at one gamma_tilde."""
    gt = np.asarray(gt, dtype=float)
    n = gt.shape[0]
    G = (g_builder or triple_exp_integral)(gt)
    g = sym(gt)
    I = np.eye(n)
    a = 0.5 * np.einsum("abcjjh,ab,hk->ck", G, I, gt) + np.einsum("aacxyz,xy,zk->ck", G, g, I)
    b = np.einsum("acajjh,hk->ck", G, gt) + 2 * np.einsum("aacxyz,yz,xk->ck", G, g, I)
    c = np.einsum("aachyy,hk->ck", G, gt) + 2 * np.einsum("aacxyz,xz,yk->ck", G, g, I)
    return {
        "n_half": float(np.abs(a - 0.5 * n * I).max()),
        "delta_b": float(np.abs(b - I).max()),
        "delta_c": float(np.abs(c - I).max()),
    }


def anomaly_bridge_residual(gamma):
    """(3n+2)/6 gamma^-1 - gamma^-1 M versus 1/3 gamma^-1 + 1/2 sum_i (gamma + 2 lambda_i)^-1."""
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[0]
    gi = np.linalg.inv(gamma)
    lhs = (3 * n + 2) / 6.0 * gi - gi @ trace_weighted_integral(gamma)
    lam = np.linalg.eigvalsh(gamma)
    rhs = gi / 3.0 + 0.5 * sum(np.linalg.inv(gamma + 2 * l * np.eye(n)) for l in lam)
    return float(np.abs(lhs - rhs).max())


# --------------------------------------------------------------------------
# overdamped ledger covectors


def _tr(X):
    return np.swapaxes(X, -1, -2)


def _per_point(b, fn):
    """fn(gti, H, gt, gamma^-1) at every point; evaluated once when all four are constant."""
    if b.spec.gamma_tilde_uniform and b.spec.gamma_constant:
        return np.broadcast_to(fn(b.gti[0], b.H[0], b.gt[0], b.gamma_inv[0]), b.gt.shape)
    return fn(b.gti, b.H, b.gt, b.gamma_inv)


def _antisym_gti(b):
    return _per_point(b, lambda gti, H, gt, gi: 0.5 * (gti - _tr(gti)))


def _minus_part(b):
    """b_- and its divergence under the standard involution."""
    A = _per_point(b, lambda gti, H, gt, gi: _tr(gti) @ H @ gti)  # (gt^-1)^{ki} H_kl (gt^-1)^{lj}
    # d_m A^{ij}, via A = (gt^-1 - gt^-T)/2
    dA = 0.5 * (b.dgti - np.swapaxes(b.dgti, 2, 3))
    divA = np.einsum("ajij->ai", dA)
    b_minus = np.einsum("aij,aj->ai", A, b.F) + divA / b.beta[:, None]
    inv_beta_grad = -b.beta_grad / b.beta[:, None] ** 2
    dd = 0.0
    if not b.spec.gamma_tilde_uniform:
        ddA = 0.5 * (b.ddgti - np.swapaxes(b.ddgti, 3, 4))
        dd = np.einsum("aijij->a", ddA) / b.beta
    div = (
        np.einsum("aiij,aj->a", dA, b.F)
        + np.einsum("aij,aij->a", A, b.F_jac)
        + np.einsum("ai,ai->a", inv_beta_grad, divA)
        + dd
    )
    return b_minus, div, A


def plus_covector_standard(b):
    """2 Sigma~^-1 b^_+ and the dr integrand 2 b^_+ Sigma~^-1 b_- + div b_-."""
    inv_beta_grad = -b.beta_grad / b.beta[:, None] ** 2
    W = _per_point(b, lambda gti, H, gt, gi: gti @ H @ _tr(gti))  # (gt^-1)^{ik} H_kl (gt^-1)^{jl}
    bhat = (
        np.einsum("aij,aj->ai", b.gti, b.F)
        - np.einsum("aik,ak->ai", b.gti, inv_beta_grad)
        + np.einsum("aj,aij->ai", inv_beta_grad - b.F, W)
    )
    Sinv_half = _per_point(b, lambda gti, H, gt, gi: _tr(gt) @ gi @ gt)  # (beta/2) Sigma~^-1
    cov = b.beta[:, None] * np.einsum("aij,aj->ai", Sinv_half, bhat)
    b_minus, div, _ = _minus_part(b)
    return cov, np.einsum("ai,ai->a", cov, b_minus) + div


def plus_covector_uniform_b(b):
    """Covector and dr integrand of the overdamped ledger under the uniform-field involution."""
    A = _antisym_gti(b)
    force = -b.V_grad + b.F_ext
    cov = b.beta[:, None] * force + b.beta_grad / b.beta[:, None]
    rate = np.einsum("ai,aij,aj->a", b.beta_grad / b.beta[:, None], A, force) + np.einsum(
        "aij,aij->a", A, b.F_ext_jac - b.V_hess
    )
    return cov, rate


# --------------------------------------------------------------------------
# observables


def _state(ctx, ob):
    return ctx.state.setdefault(id(ob), {})


class UnderdampedEntropy(Observable):
    """S_env for the underdamped system over the window."""

    names = ("S_env_m",)
    regimes = ("underdamped",)

    def start(self, ctx):
        _state(ctx, self)["acc"] = np.zeros(ctx.N)

    def on_mark(self, ctx, which, t, q, z, b):
        st = _state(ctx, self)
        bH = b.beta * (0.5 * np.sum(z * z, axis=1) + b.V)
        st["acc"] += bH if which == "start" else -bH

    def on_step(self, ctx, step):
        b = step.mid
        st = _state(ctx, self)
        st["acc"] += _kernels.kernels.underdamped_increment(
            step.z0,
            step.z1,
            step.dt,
            math.sqrt(ctx.m),
            b.beta,
            b.beta_dt,
            b.beta_grad,
            b.V,
            b.V_dt,
            entropy_force(b),
            step.q1 - step.q0,
        )

    def result(self, ctx):
        return {"S_env_m": _state(ctx, self)["acc"]}


class OverdampedEntropy(Observable):
    """S_env for the overdamped system; Stratonovich sums by the trapezoid in state."""

    regimes = ("overdamped",)

    def __init__(self, involution=STANDARD, name=None):
        if involution not in (STANDARD, UNIFORM_B):
            raise ValueError(f"unknown involution {involution!r}")
        self.involution = involution
        self.key = name or ("S_env_0" if involution == STANDARD else "S_env_0_uB")
        self.names = (self.key,)

    def _parts(self, b):
        # the end bundle of one step is the start bundle of the next
        cache = b.__dict__.setdefault("_ledger_parts", {})
        if self.involution not in cache:
            fn = plus_covector_standard if self.involution == STANDARD else plus_covector_uniform_b
            cache[self.involution] = fn(b)
        return cache[self.involution]

    def start(self, ctx):
        if self.involution == UNIFORM_B:
            hard, _ = _uniform_b_checks(ctx.spec, np.zeros((1, ctx.spec.n)), np.array([0.0]))
            if hard:
                raise AssumptionError("; ".join(hard))
        _state(ctx, self)["acc"] = np.zeros(ctx.N)

    def on_step(self, ctx, step):
        st = _state(ctx, self)
        c0, r0 = self._parts(step.b0)
        c1, r1 = self._parts(step.b1)
        dq = step.q1 - step.q0
        st["acc"] += 0.5 * np.einsum("ai,ai->a", c0 + c1, dq) - 0.5 * (r0 + r1) * step.dt

    def result(self, ctx):
        return {self.key: _state(ctx, self)["acc"]}


class LogBetaRatio(Observable):
    names = ("log_beta_ratio",)

    def on_mark(self, ctx, which, t, q, z, b):
        st = _state(ctx, self)
        st[which] = np.log(b.beta)

    def result(self, ctx):
        st = _state(ctx, self)
        return {"log_beta_ratio": st["end"] - st["start"]}


class GibbsMarginal(Observable):
    """beta(t, q_t) ||z_t||^2 at the window end."""

    names = ("beta_z2",)
    regimes = ("underdamped",)

    def on_mark(self, ctx, which, t, q, z, b):
        if which == "end":
            _state(ctx, self)["v"] = b.beta * np.sum(z * z, axis=1)

    def result(self, ctx):
        return {"beta_z2": _state(ctx, self)["v"]}


class TerminalMoments(Observable):
    """Components of q and ||q||^2 at the window end."""

    def __init__(self, n):
        self.names = tuple(f"q{i}" for i in range(n)) + ("q_norm2",)

    def on_mark(self, ctx, which, t, q, z, b):
        if which == "end":
            st = _state(ctx, self)
            for i in range(q.shape[1]):
                st[f"q{i}"] = q[:, i].copy()
            st["q_norm2"] = np.sum(q * q, axis=1)

    def result(self, ctx):
        st = _state(ctx, self)
        return {k: st[k] for k in self.names}


@dataclass
class TensorField:
    """B(t, q) = f(t, q) * B0 for a constant rank-k tensor B0 and scalar field f (default 1)."""

    B0: np.ndarray
    scalar: object = None

    @property
    def rank(self):
        return np.ndim(self.B0)

    def factor(self, t, q):
        return np.ones(len(q)) if self.scalar is None else self.scalar.value(t, q)

    def factor_grad(self, t, q):
        return np.zeros(q.shape) if self.scalar is None else self.scalar.grad(t, q)


def _poly(B0, z):
    out = np.broadcast_to(B0, (z.shape[0],) + B0.shape)
    for _ in range(B0.ndim):
        out = np.einsum("ai,ai...->a...", z, out)
    return out


class HomogenizationIntegral(Observable):
    """J = int B(q) (z, ..., z) dr over the window; odd ranks are scaled by m^-1/2."""

    regimes = ("underdamped",)

    def __init__(self, field: TensorField, name="J"):
        self.field, self.key = field, name
        self.names = (name,)

    def start(self, ctx):
        _state(ctx, self)["acc"] = np.zeros(ctx.N)

    def on_step(self, ctx, step):
        B0 = np.asarray(self.field.B0, dtype=float)
        f = self.field.factor(step.t0 + 0.5 * step.dt, step.mid.q)
        st = _state(ctx, self)
        st["acc"] += f * 0.5 * (_poly(B0, step.z0) + _poly(B0, step.z1)) * step.dt

    def result(self, ctx):
        v = _state(ctx, self)["acc"]
        if self.field.rank % 2:
            v = v / math.sqrt(ctx.m)
        return {self.key: v}


def homogenization_limit_integrand(spec: SystemSpec, field: TensorField, t, q, fast=True):
    """Integrand of the m -> 0 limit of E[J] (even rank) or of m^-1/2 E[J] (odd rank)."""
    b = spec.bundle(t, q)
    B0 = np.asarray(field.B0, dtype=float)
    k = B0.ndim
    f = field.factor(t, b.q)
    if k % 2 == 0:
        return f * gaussian_average(1.0, B0) * b.beta ** (-k / 2)
    df = field.factor_grad(t, b.q)
    if fast and spec.gamma_tilde_uniform:
        sol = solve_cell(1.0, b.gt[0], sym(b.gt[0]), B0)
        total = np.zeros(b.N)
        n = b.n
        for j, A in enumerate(sol.tensors):
            r = A.ndim
            single = CellSolution(r, [A], 1.0, sol.gamma_tilde, A)
            g = single.gaussian_average_of_grad()
            h = np.array([gaussian_average(1.0, np.multiply.outer(np.eye(n)[i], A)) for i in range(n)])
            bj = b.beta ** (-j)
            total -= f * bj * b.beta ** (-(r - 1) / 2) * (b.F @ g)
            d = df * bj[:, None] - (j * f * b.beta ** (-j - 1))[:, None] * b.beta_grad
            total -= b.beta ** (-(r + 1) / 2) * (d @ h)
        return total
    out = np.empty(b.N)
    n = b.n
    for a in range(b.N):
        sol = solve_cell(b.beta[a], b.gt[a], b.gamma[a], f[a] * B0)
        val = -b.F[a] @ sol.gaussian_average_of_grad()
        for i in range(n):
            dA = solve_cell_derivative(sol, b.beta_grad[a, i], b.dgt[a, i], df[a, i] * B0)
            e = np.eye(n)[i]
            val -= sum(gaussian_average(b.beta[a], np.multiply.outer(e, T)) for T in dA)
        out[a] = val
    return out


class HomogenizationLimit(Observable):
    """Limit of E[J] (or m^-1/2 E[J] for odd rank) as a trapezoid over overdamped path grids."""

    regimes = ("overdamped",)
    uses_grid = True

    def __init__(self, field: TensorField, name="J_limit"):
        self.field, self.key = field, name
        self.names = (name,)

    def on_grid(self, ctx, grid):
        g = grid.window(*ctx.window)
        vals = np.stack(
            [homogenization_limit_integrand(ctx.spec, self.field, tt, g.q[:, r]) for r, tt in enumerate(g.times)],
            axis=1,
        )
        _state(ctx, self)["v"] = np.trapezoid(vals, g.times, axis=1)

    def result(self, ctx):
        return {self.key: _state(ctx, self)["v"]}


class LimitTerms(Observable):
    """Grid functionals on overdamped paths: limit formula, closed-form E[S_env,0], anomalies."""

    regimes = ("overdamped",)
    uses_grid = True

    def __init__(self, spec: SystemSpec, variants=None, homogenization: TensorField | None = None):
        self.variants = list(variants) if variants is not None else applicable_variants(spec)
        for v in self.variants:
            require_variant(spec, v)
        self.homogenization = homogenization
        names = ["limit", "S_env_0_formula", "log_beta_ratio_ito"] + [f"anomaly_{v}" for v in self.variants]
        if spec.psi_zero:
            names.append("limit_path_gap")
        if homogenization is not None:
            names.append("J_limit")
        self.names = tuple(names)

    def on_grid(self, ctx, grid):
        s, t = ctx.window
        spec = ctx.spec
        st = _state(ctx, self)
        g = grid.window(s, t)
        bundles = [spec.bundle(tt, g.q[:, r]) for r, tt in enumerate(g.times)]

        def integrate(fn):
            vals = np.stack([fn(b) for b in bundles], axis=1)
            return np.trapezoid(vals, g.times, axis=1)

        n = spec.n
        st["limit"] = _boundary(spec, g, 0.5 * (n + 2)) + integrate(limit_integrand_general)
        st["S_env_0_formula"] = _boundary(spec, g, 1.0) + integrate(overdamped_expected_integrand)
        st["log_beta_ratio_ito"] = integrate(log_beta_ito_integrand)
        for v in self.variants:
            st[f"anomaly_{v}"] = integrate(lambda b, v=v: anomaly_integrand_from_bundle(b, v))
        if spec.psi_zero:
            gaps = [
                np.abs(limit_integrand_general(b) - limit_integrand_psi0(b))
                / np.maximum(1.0, np.abs(limit_integrand_general(b)))
                for b in bundles
            ]
            st["limit_path_gap"] = np.max(np.stack(gaps, axis=1), axis=1)
        if self.homogenization is not None:
            vals = np.stack(
                [homogenization_limit_integrand(spec, self.homogenization, tt, g.q[:, r]) for r, tt in enumerate(g.times)],
                axis=1,
            )
            st["J_limit"] = np.trapezoid(vals, g.times, axis=1)

    def result(self, ctx):
        st = _state(ctx, self)
        return {k: st[k] for k in self.names}
