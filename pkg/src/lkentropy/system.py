"""System definition: fields, derivative bundles, drifts and assumption checks."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .fields import (
    MATRIX,
    SCALAR,
    VECTOR,
    FieldError,
    MatrixConstant,
    VectorConstant,
    VectorLinear,
    VectorUniformB,
    make_field,
)


class ConfigError(ValueError):
    pass


class AssumptionError(ValueError):
    pass


@dataclass(frozen=True)
class InitialCondition:
    """Distribution of q at the start time: a point mass or an axis-aligned Gaussian."""

    kind: str
    mean: np.ndarray
    std: np.ndarray

    def sample(self, rng, n):
        if self.kind == "point":
            return self.mean.copy()
        return self.mean + self.std * rng.standard_normal(n)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    n: int
    horizon: float
    beta: object
    gamma: object
    V: object
    psi: object
    F_ext: object
    uniform_B0: float | None = None
    initial: InitialCondition | None = None
    source: dict = field(default_factory=dict, repr=False)

    def bundle(self, t, q):
        return Bundle(self, t, q)

    @property
    def psi_zero(self):
        """True when psi has no (t, q) dependence, e.g. a uniform field with B0 = 0."""
        psi = _unwrap(self.psi)
        if type(psi) is VectorConstant:
            return True
        return isinstance(psi, VectorLinear) and not np.any(psi.M)

    @property
    def gamma_tilde_uniform(self):
        """True when gamma_tilde does not depend on (t, q)."""
        return isinstance(_unwrap(self.gamma), MatrixConstant) and isinstance(
            _unwrap(self.psi), (VectorConstant, VectorLinear)
        )

    @property
    def gamma_constant(self):
        return isinstance(_unwrap(self.gamma), MatrixConstant)

    @property
    def gamma_scalar_constant(self):
        g = _unwrap(self.gamma)
        return isinstance(g, MatrixConstant) and g.is_scalar

    def initial_condition(self):
        if self.initial is None:
            return InitialCondition("point", np.zeros(self.n), np.zeros(self.n))
        return self.initial


# --------------------------------------------------------------------------
# derivative bundle


def _sym_sqrt_and_derivative(gamma, dgamma):
    """Symmetric square root s of gamma and its q-derivatives (s X + X s = d gamma)."""
    lam, U = np.linalg.eigh(0.5 * (gamma + np.swapaxes(gamma, -1, -2)))
    if np.any(lam <= 0):
        raise AssumptionError("gamma is not positive definite")
    r = np.sqrt(lam)
    Ut = np.swapaxes(U, -1, -2)
    s = (U * r[..., None, :]) @ Ut
    denom = r[..., :, None] + r[..., None, :]
    rot = Ut[:, None] @ dgamma @ U[:, None]
    ds = U[:, None] @ (rot / denom[:, None]) @ Ut[:, None]
    return s, ds


class Bundle:
    """Lazy evaluation of every coefficient and derivative at a batch of points.

    Index conventions (batch axis first): ``beta_grad[a, i]``,
    ``psi_jac[a, i, k] = d_i psi_k``, ``dH[a, j, i, k] = d_j H_ik``,
    ``dgti[a, j, i, k] = d_j (gt^-1)^{ik}``, ``F_jac[a, i, k] = d_i F_k``.
    """

    def __init__(self, spec: SystemSpec, t, q):
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            q = q[None, :]
        self.spec, self.t, self.q = spec, float(t), q
        self.N, self.n = q.shape

    # --- beta
    @cached_property
    def beta(self):
        return self.spec.beta.value(self.t, self.q)

    @cached_property
    def beta_dt(self):
        return self.spec.beta.dt(self.t, self.q)

    @cached_property
    def beta_grad(self):
        return self.spec.beta.grad(self.t, self.q)

    @cached_property
    def beta_hess(self):
        return self.spec.beta.hess(self.t, self.q)

    # --- V
    @cached_property
    def V(self):
        return self.spec.V.value(self.t, self.q)

    @cached_property
    def V_dt(self):
        return self.spec.V.dt(self.t, self.q)

    @cached_property
    def V_grad(self):
        return self.spec.V.grad(self.t, self.q)

    @cached_property
    def V_hess(self):
        return self.spec.V.hess(self.t, self.q)

    # --- psi and H
    @cached_property
    def psi(self):
        return self.spec.psi.value(self.t, self.q)

    @cached_property
    def psi_dt(self):
        return self.spec.psi.dt(self.t, self.q)

    @cached_property
    def psi_jac(self):
        return self.spec.psi.jac(self.t, self.q)

    @cached_property
    def psi_dt_jac(self):
        return self.spec.psi.dt_jac(self.t, self.q)

    @cached_property
    def H(self):
        J = self.psi_jac
        return J - np.swapaxes(J, 1, 2)

    @cached_property
    def dH(self):
        h = self.spec.psi.hess(self.t, self.q)
        return h - np.swapaxes(h, 2, 3)

    @cached_property
    def ddH(self):
        h = self.spec.psi.third(self.t, self.q)
        return h - np.swapaxes(h, 3, 4)

    # --- gamma, gamma tilde
    @cached_property
    def gamma(self):
        return self.spec.gamma.value(self.t, self.q)

    @cached_property
    def gamma_grad(self):
        return self.spec.gamma.grad(self.t, self.q)

    @cached_property
    def gamma_hess(self):
        return self.spec.gamma.hess(self.t, self.q)

    @cached_property
    def gt(self):
        return self.gamma - self.H

    @cached_property
    def gti(self):
        if self.spec.gamma_tilde_uniform:
            return np.broadcast_to(np.linalg.inv(self.gt[0]), self.gt.shape)
        return np.linalg.inv(self.gt)

    @cached_property
    def dgt(self):
        return self.gamma_grad - self.dH

    @cached_property
    def gamma_inv(self):
        if self.spec.gamma_constant:
            return np.broadcast_to(np.linalg.inv(self.gamma[0]), self.gamma.shape)
        return np.linalg.inv(self.gamma)

    @cached_property
    def dgti(self):
        if self.spec.gamma_tilde_uniform:
            return np.zeros((self.N,) + (self.n,) * 3)
        g = self.gti[:, None]
        return -g @ self.dgt @ g

    @cached_property
    def ddgt(self):
        return self.gamma_hess - self.ddH

    @cached_property
    def ddgti(self):
        """ddgti[a, l, j, i, k] = d_l d_j (gt^-1)^{ik}."""
        if self.spec.gamma_tilde_uniform:
            return np.zeros((self.N,) + (self.n,) * 4)
        g = self.gti[:, None, None]
        dl = self.dgt[:, :, None]
        dj = self.dgt[:, None, :]
        return g @ dl @ g @ dj @ g + g @ dj @ g @ dl @ g - g @ self.ddgt @ g

    # --- forces
    @cached_property
    def F_ext(self):
        return self.spec.F_ext.value(self.t, self.q)

    @cached_property
    def F_ext_jac(self):
        return self.spec.F_ext.jac(self.t, self.q)

    @cached_property
    def F(self):
        return -self.psi_dt - self.V_grad + self.F_ext

    @cached_property
    def F_jac(self):
        return -self.psi_dt_jac - self.V_hess + self.F_ext_jac

    # --- noise
    @cached_property
    def Sigma(self):
        return (2.0 / self.beta)[:, None, None] * self.gamma

    @cached_property
    def _sqrt_gamma(self):
        if self.spec.gamma_constant:
            s, _ = _sym_sqrt_and_derivative(self.gamma[:1], self.gamma_grad[:1])
            return np.broadcast_to(s[0], self.gamma.shape), np.zeros((self.N,) + (self.n,) * 3)
        return _sym_sqrt_and_derivative(self.gamma, self.gamma_grad)

    @cached_property
    def sigma(self):
        return np.sqrt(2.0 / self.beta)[:, None, None] * self._sqrt_gamma[0]

    @cached_property
    def dsigma(self):
        """dsigma[a, k, l, xi] = d_k sigma_{l xi}."""
        s, ds = self._sqrt_gamma
        c = np.sqrt(2.0 / self.beta)
        dc = -0.5 * (c / self.beta)[:, None] * self.beta_grad
        return dc[:, :, None, None] * s[:, None] + c[:, None, None, None] * ds

    # --- drifts
    @cached_property
    def drift_force(self):
        return np.einsum("aik,ak->ai", self.gti, self.F)

    @cached_property
    def S_ito(self):
        return noise_induced_drift_ito(self)

    @cached_property
    def S_strat(self):
        return noise_induced_drift_strat(self)

    @cached_property
    def gti_sigma(self):
        return self.gti @ self.sigma


def noise_induced_drift_ito(bundle: Bundle):
    """S^i = beta^-1 d_j (gt^-1)^{ij}."""
    return np.einsum("ajij->ai", bundle.dgti) / bundle.beta[:, None]


def noise_induced_drift_strat(bundle: Bundle):
    """Noise-induced drift paired with the Stratonovich convention."""
    b = bundle
    first = np.einsum("ajil,ajk,alk->ai", b.dgti, b.gti, b.H) / b.beta[:, None]
    second = np.einsum("ail,aklx,akx->ai", b.gti, b.dsigma, b.gti_sigma)
    return first - 0.5 * second


def ito_strat_correction(bundle: Bundle):
    """1/2 sum_xi d_k (gt^-1 sigma)^i_xi (gt^-1 sigma)^k_xi."""
    b = bundle
    d = np.einsum("akil,alx->akix", b.dgti, b.sigma) + np.einsum("ail,aklx->akix", b.gti, b.dsigma)
    return 0.5 * np.einsum("akix,akx->ai", d, b.gti_sigma)


def derive_sigma(spec: SystemSpec, t, q):
    """Symmetric positive square root of 2 beta^-1 gamma at a single point."""
    b = spec.bundle(t, np.asarray(q, dtype=float).reshape(1, -1))
    if b.beta[0] <= 0:
        raise AssumptionError("beta must be positive")
    return b.sigma[0]


# --------------------------------------------------------------------------
# time reversal


class _Reversed:
    """Field evaluated at T - t, optionally with its sign flipped."""

    def __init__(self, base, T, sign=1.0):
        self.base, self.T, self.sign = base, float(T), float(sign)
        self.n = base.n
        self.kind = base.kind
        self.family = base.family
        self.time_dependent = base.time_dependent
        for attr in ("is_scalar", "M", "B0"):
            if hasattr(base, attr):
                setattr(self, attr, getattr(base, attr))

    def __getattr__(self, name):
        if name.startswith("__") or name == "base":
            raise AttributeError(name)
        fn = getattr(self.base, name)
        if not callable(fn):
            raise AttributeError(name)
        flip = -1.0 if name.startswith("dt") else 1.0
        s = self.sign * flip

        def call(t, q):
            return s * fn(self.T - t, q)

        return call


def _unwrap(f):
    while isinstance(f, _Reversed):
        f = f.base
    return f


STANDARD, UNIFORM_B = "standard", "uniform_B"


def reverse_system(spec: SystemSpec, T=None, involution=STANDARD) -> SystemSpec:
    """Coefficients of the time-reversed system under the chosen involution."""
    T = spec.horizon if T is None else float(T)
    if involution == UNIFORM_B:
        report = validate_assumptions(spec, uniform_b=True)
        if report.uniform_b_violations or report.uniform_b_flags:
            raise AssumptionError(
                "uniform-B reversal needs the uniform-field assumptions: "
                + "; ".join(report.uniform_b_violations + report.uniform_b_flags)
            )
        psi_sign = 1.0
    elif involution == STANDARD:
        psi_sign = -1.0
    else:
        raise ValueError(f"unknown involution {involution!r}")
    wrap = _Reversed
    psi = spec.psi if isinstance(_unwrap(spec.psi), VectorUniformB) and psi_sign > 0 else wrap(spec.psi, T, psi_sign)
    return SystemSpec(
        n=spec.n,
        horizon=spec.horizon,
        beta=wrap(spec.beta, T),
        gamma=wrap(spec.gamma, T),
        V=wrap(spec.V, T),
        psi=psi,
        F_ext=wrap(spec.F_ext, T),
        uniform_B0=spec.uniform_B0,
        initial=spec.initial,
        source=spec.source,
    )


# --------------------------------------------------------------------------
# assumption checks


@dataclass
class AssumptionReport:
    beta_min: float
    beta_max: float
    gamma_eig_min: float
    gamma_eig_max: float
    grad_V_max: float
    dpsi_max: float
    gamma_tilde_sym_min: float
    violations: list
    uniform_b_violations: list
    uniform_b_flags: list
    points: int

    @property
    def passed(self):
        return not self.violations and not self.uniform_b_violations


def probe_points(n, box=3.0, count=1000, seed=12345):
    rng = np.random.default_rng(seed)
    return rng.uniform(-box, box, size=(count, n))


def validate_assumptions(spec: SystemSpec, box=3.0, count=1000, times=10, seed=12345, uniform_b=None):
    """Sample the probe grid and report ranges and violated assumptions."""
    q = probe_points(spec.n, box, count, seed)
    ts = np.linspace(0.0, spec.horizon, times)
    bmin = gmin = smin = np.inf
    bmax = gmax = gradV = dpsi = 0.0
    bmax = -np.inf
    for t in ts:
        b = spec.bundle(t, q)
        bmin, bmax = min(bmin, b.beta.min()), max(bmax, b.beta.max())
        ev = np.linalg.eigvalsh(0.5 * (b.gamma + np.swapaxes(b.gamma, 1, 2)))
        gmin, gmax = min(gmin, ev.min()), max(gmax, ev.max())
        ev_t = np.linalg.eigvalsh(0.5 * (b.gt + np.swapaxes(b.gt, 1, 2)))
        smin = min(smin, ev_t.min())
        gradV = max(gradV, float(np.abs(b.V_grad).max()))
        dpsi = max(dpsi, float(np.abs(b.psi_jac).max()), float(np.abs(b.psi_dt).max()))
    violations = []
    if not np.isfinite(bmin) or bmin <= 0:
        violations.append(f"beta_min = {bmin:.4g} is not positive")
    if not np.isfinite(gmin) or gmin <= 0:
        violations.append(f"gamma eigenvalue min = {gmin:.4g} is not positive")
    b0 = spec.bundle(0.0, q)
    asym = np.max(np.abs(b0.gamma - np.swapaxes(b0.gamma, 1, 2)))
    if asym > 1e-12 * max(1.0, gmax):
        violations.append("gamma is not symmetric")
    ub_viol, ub_flags = [], []
    if uniform_b if uniform_b is not None else spec.uniform_B0 is not None:
        ub_viol, ub_flags = _uniform_b_checks(spec, q, ts)
    return AssumptionReport(
        beta_min=float(bmin),
        beta_max=float(bmax),
        gamma_eig_min=float(gmin),
        gamma_eig_max=float(gmax),
        grad_V_max=gradV,
        dpsi_max=dpsi,
        gamma_tilde_sym_min=float(smin),
        violations=violations,
        uniform_b_violations=ub_viol,
        uniform_b_flags=ub_flags,
        points=len(q) * len(ts),
    )


def _uniform_b_checks(spec, q, ts, tol=1e-12):
    """Hard requirements and symmetry flags for the uniform-field setting."""
    hard, flags = [], []
    if spec.n != 3:
        hard.append("uniform field setting needs dimension 3")
        return hard, flags
    psi = _unwrap(spec.psi)
    if not isinstance(psi, VectorUniformB):
        hard.append("psi must be the uniform_B vector potential")
    elif spec.uniform_B0 is not None and psi.B0 != spec.uniform_B0:
        hard.append("psi B0 does not match uniform_B0")
    flip = np.array([-1.0, 1.0, 1.0])
    qf = q * flip
    for t in ts:
        b, bf = spec.bundle(t, q), spec.bundle(t, qf)
        g = b.gamma
        g0 = g[:, 0, 0]
        if np.max(np.abs(g - g0[:, None, None] * np.eye(3))) > tol or np.ptp(g0) > tol:
            hard.append("gamma must be a q-independent scalar")
            break
    for t in ts:
        b, bf = spec.bundle(t, q), spec.bundle(t, qf)
        if np.max(np.abs(b.beta - bf.beta)) > tol * max(1.0, np.abs(b.beta).max()):
            flags.append("sigma is not invariant under q1 -> -q1")
            break
    for t in ts:
        b, bf = spec.bundle(t, q), spec.bundle(t, qf)
        if np.max(np.abs(b.V - bf.V)) > tol * max(1.0, np.abs(b.V).max()):
            flags.append("V is not invariant under q1 -> -q1")
            break
    for t in ts:
        b, bf = spec.bundle(t, q), spec.bundle(t, qf)
        if np.max(np.abs(bf.F_ext - b.F_ext * flip)) > tol * max(1.0, np.abs(b.F_ext).max()):
            flags.append("F_ext does not satisfy the q1 reflection rule")
            break
    return hard, flags


# --------------------------------------------------------------------------
# configuration


TOP_KEYS = {"dimension", "horizon", "beta", "gamma", "psi", "V", "F_ext", "uniform_B0", "initial"}


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(msg, text=None, key=None):
    line = _line_of(text, key) if key else None
    if line is not None:
        raw = text.splitlines()[line - 1].strip()
        msg = f"line {line}: {msg}  [{raw}]"
    raise ConfigError(msg)


def _parse_initial(spec, n):
    if not isinstance(spec, dict) or set(spec) - {"family", "params"}:
        raise ConfigError("'initial' must be an object with 'family' and 'params'")
    fam = spec.get("family")
    params = spec.get("params", {})
    if fam == "point":
        extra = set(params) - {"q0"}
        if extra:
            raise ConfigError(f"initial point: unknown parameter(s) {sorted(extra)}")
        q0 = np.broadcast_to(np.asarray(params.get("q0", 0.0), dtype=float), (n,)).copy()
        return InitialCondition("point", q0, np.zeros(n))
    if fam == "gaussian":
        extra = set(params) - {"mean", "std"}
        if extra:
            raise ConfigError(f"initial gaussian: unknown parameter(s) {sorted(extra)}")
        mean = np.broadcast_to(np.asarray(params.get("mean", 0.0), dtype=float), (n,)).copy()
        std = np.broadcast_to(np.asarray(params.get("std", 1.0), dtype=float), (n,)).copy()
        if np.any(std < 0):
            raise ConfigError("initial gaussian: std must be non-negative")
        return InitialCondition("gaussian", mean, std)
    raise ConfigError(f"unknown initial family {fam!r}; known: ['gaussian', 'point']")


def parse_config(cfg: dict, text: str | None = None) -> SystemSpec:
    """Build a SystemSpec from a parsed configuration mapping (strict)."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        _fail(f"unknown top-level key(s) {sorted(unknown)}", text, key)
    for key in ("dimension", "horizon", "beta", "gamma", "V"):
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    n = cfg["dimension"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        _fail("'dimension' must be a positive integer", text, "dimension")
    horizon = cfg["horizon"]
    if not isinstance(horizon, (int, float)) or isinstance(horizon, bool) or not horizon > 0:
        _fail("'horizon' must be a positive number", text, "horizon")
    B0 = cfg.get("uniform_B0")
    if B0 is not None and (not isinstance(B0, (int, float)) or isinstance(B0, bool)):
        _fail("'uniform_B0' must be a number or null", text, "uniform_B0")

    def build(kind, key, default):
        try:
            return make_field(kind, n, cfg.get(key, default))
        except FieldError as exc:
            _fail(f"{key}: {exc}", text, key)

    beta = build(SCALAR, "beta", None)
    gamma = build(MATRIX, "gamma", None)
    V = build(SCALAR, "V", None)
    F_ext = build(VECTOR, "F_ext", {"family": "constant", "params": {"value": 0.0}})
    if "psi" in cfg:
        psi = build(VECTOR, "psi", None)
    elif B0 is not None:
        psi = build(VECTOR, "psi", {"family": "uniform_B", "params": {"B0": B0}})
    else:
        psi = build(VECTOR, "psi", {"family": "constant", "params": {"value": 0.0}})
    initial = None
    if "initial" in cfg:
        try:
            initial = _parse_initial(cfg["initial"], n)
        except ConfigError as exc:
            _fail(str(exc), text, "initial")
    spec = SystemSpec(
        n=n,
        horizon=float(horizon),
        beta=beta,
        gamma=gamma,
        V=V,
        psi=psi,
        F_ext=F_ext,
        uniform_B0=None if B0 is None else float(B0),
        initial=initial,
        source=cfg,
    )
    if B0 is not None:
        if n != 3:
            _fail("uniform_B0 needs dimension 3", text, "uniform_B0")
        if not isinstance(psi, VectorUniformB) or psi.B0 != float(B0):
            _fail("psi must be the uniform_B potential with the same B0", text, "psi")
    return spec


def load_config(path) -> SystemSpec:
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        raw = lines[exc.lineno - 1].strip() if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}  [{raw}]") from None
    return parse_config(cfg, text)


def with_fields(spec: SystemSpec, **changes) -> SystemSpec:
    return replace(spec, **changes)
