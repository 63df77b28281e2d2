"""Closed-form parametric fields with analytic derivatives.

Every field is evaluated on a batch of points: ``t`` is a scalar and ``q``
has shape ``(N, n)``. Derivative arrays put the batch axis first and the
differentiation axes before the component axes, so for a vector field
``jac[a, i, k]`` is the derivative of component ``k`` along ``q^i``.
"""

from __future__ import annotations

import numpy as np

SCALAR, VECTOR, MATRIX = "scalar", "vector", "matrix"


class FieldError(ValueError):
    pass


def _vec(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise FieldError(f"parameter {name!r} must be a scalar or a length-{n} list")
    if not np.all(np.isfinite(a)):
        raise FieldError(f"parameter {name!r} must be finite")
    return a


def _num(x, name):
    try:
        v = float(x)
    except (TypeError, ValueError):
        raise FieldError(f"parameter {name!r} must be a number") from None
    if not np.isfinite(v):
        raise FieldError(f"parameter {name!r} must be finite")
    return v


def _mat(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = float(a) * np.eye(n)
    if a.shape != (n, n):
        raise FieldError(f"parameter {name!r} must be a scalar or an {n}x{n} matrix")
    if not np.all(np.isfinite(a)):
        raise FieldError(f"parameter {name!r} must be finite")
    return a


class Field:
    kind = None
    family = None
    # names of accepted params and their defaults (None means required)
    params_spec: dict = {}
    time_dependent = True

    def __init__(self, n, params):
        self.n = n
        unknown = set(params) - set(self.params_spec)
        if unknown:
            raise FieldError(f"{self.family}: unknown parameter(s) {sorted(unknown)}")
        full = {}
        for key, default in self.params_spec.items():
            if key in params:
                full[key] = params[key]
            elif default is None:
                raise FieldError(f"{self.family}: missing parameter {key!r}")
            else:
                full[key] = default
        self.params = full
        self._setup(**full)

    def _setup(self, **kw):
        pass

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, params={self.params})"

    def _zeros(self, q, *shape):
        return np.zeros((q.shape[0],) + shape)


# --------------------------------------------------------------------------
# scalar fields: value, dt, grad, hess, dt_grad


class ScalarConstant(Field):
    kind, family = SCALAR, "constant"
    params_spec = {"value": None}
    time_dependent = False

    def _setup(self, value):
        self.c = _num(value, "value")

    def value(self, t, q):
        return np.full(q.shape[0], self.c)

    def dt(self, t, q):
        return self._zeros(q)

    def grad(self, t, q):
        return self._zeros(q, self.n)

    def hess(self, t, q):
        return self._zeros(q, self.n, self.n)

    def dt_grad(self, t, q):
        return self._zeros(q, self.n)


class ScalarTanh(Field):
    """a + b tanh(k.q + w t + c) exp(-sum_i e_i q_i^2 / 2)."""

    kind, family = SCALAR, "tanh"
    params_spec = {"a": 0.0, "b": 1.0, "k": None, "c": 0.0, "w": 0.0, "envelope": 0.0}

    def _setup(self, a, b, k, c, w, envelope):
        self.a, self.b = _num(a, "a"), _num(b, "b")
        self.k = _vec(k, self.n, "k")
        self.c, self.w = _num(c, "c"), _num(w, "w")
        self.e = _vec(envelope, self.n, "envelope")
        if np.any(self.e < 0):
            raise FieldError("tanh: envelope widths must be non-negative")
        self.time_dependent = self.w != 0.0

    def _parts(self, t, q):
        T = np.tanh(q @ self.k + self.w * t + self.c)
        T1 = 1.0 - T * T
        T2 = -2.0 * T * T1
        g = np.exp(-0.5 * (q * q) @ self.e)
        gi = -(self.e * q) * g[:, None]
        return T, T1, T2, g, gi

    def value(self, t, q):
        T, _, _, g, _ = self._parts(t, q)
        return self.a + self.b * T * g

    def dt(self, t, q):
        _, T1, _, g, _ = self._parts(t, q)
        return self.b * self.w * T1 * g

    def grad(self, t, q):
        T, T1, _, g, gi = self._parts(t, q)
        return self.b * ((T1 * g)[:, None] * self.k + T[:, None] * gi)

    def hess(self, t, q):
        T, T1, T2, g, gi = self._parts(t, q)
        eq = self.e * q
        gij = (eq[:, :, None] * eq[:, None, :] - np.diag(self.e)) * g[:, None, None]
        kk = np.outer(self.k, self.k)
        cross = self.k[None, :, None] * gi[:, None, :]
        return self.b * (
            (T2 * g)[:, None, None] * kk
            + T1[:, None, None] * (cross + np.swapaxes(cross, 1, 2))
            + T[:, None, None] * gij
        )

    def dt_grad(self, t, q):
        _, T1, T2, g, gi = self._parts(t, q)
        return self.b * self.w * ((T2 * g)[:, None] * self.k + T1[:, None] * gi)


class ScalarGaussianBump(Field):
    """a + b (1 + w t) exp(-|q - center|^2 / (2 width^2))."""

    kind, family = SCALAR, "gaussian_bump"
    params_spec = {"a": 0.0, "b": 1.0, "center": 0.0, "width": 1.0, "w": 0.0}

    def _setup(self, a, b, center, width, w):
        self.a, self.b, self.w = _num(a, "a"), _num(b, "b"), _num(w, "w")
        self.c = _vec(center, self.n, "center")
        self.s2 = _num(width, "width") ** 2
        if self.s2 <= 0:
            raise FieldError("gaussian_bump: width must be positive")
        self.time_dependent = self.w != 0.0

    def _g(self, q):
        r = q - self.c
        return r, np.exp(-0.5 * np.sum(r * r, axis=1) / self.s2)

    def value(self, t, q):
        return self.a + self.b * (1 + self.w * t) * self._g(q)[1]

    def dt(self, t, q):
        return self.b * self.w * self._g(q)[1]

    def grad(self, t, q):
        r, g = self._g(q)
        return -self.b * (1 + self.w * t) * r * (g / self.s2)[:, None]

    def hess(self, t, q):
        r, g = self._g(q)
        h = (r[:, :, None] * r[:, None, :] / self.s2 - np.eye(self.n)) / self.s2
        return self.b * (1 + self.w * t) * h * g[:, None, None]

    def dt_grad(self, t, q):
        r, g = self._g(q)
        return -self.b * self.w * r * (g / self.s2)[:, None]


class ScalarHarmonic(Field):
    """sum_i k_i (q_i - c_i - v_i t)^2 / 2."""

    kind, family = SCALAR, "harmonic"
    params_spec = {"stiffness": 1.0, "center": 0.0, "velocity": 0.0}

    def _setup(self, stiffness, center, velocity):
        self.k = _vec(stiffness, self.n, "stiffness")
        self.c = _vec(center, self.n, "center")
        self.v = _vec(velocity, self.n, "velocity")
        self.time_dependent = bool(np.any(self.v != 0))

    def value(self, t, q):
        r = q - self.c - self.v * t
        return 0.5 * (r * r) @ self.k

    def dt(self, t, q):
        r = q - self.c - self.v * t
        return -(r @ (self.k * self.v))

    def grad(self, t, q):
        return (q - self.c - self.v * t) * self.k

    def hess(self, t, q):
        return np.broadcast_to(np.diag(self.k), (q.shape[0], self.n, self.n)).copy()

    def dt_grad(self, t, q):
        return np.broadcast_to(-self.k * self.v, q.shape).copy()


class ScalarQuartic(Field):
    """quartic |q|^4 / 4 + quadratic |q|^2 / 2."""

    kind, family = SCALAR, "quartic"
    params_spec = {"quartic": 1.0, "quadratic": 0.0}
    time_dependent = False

    def _setup(self, quartic, quadratic):
        self.a4, self.a2 = _num(quartic, "quartic"), _num(quadratic, "quadratic")

    def value(self, t, q):
        r2 = np.sum(q * q, axis=1)
        return 0.25 * self.a4 * r2 * r2 + 0.5 * self.a2 * r2

    def dt(self, t, q):
        return self._zeros(q)

    def grad(self, t, q):
        r2 = np.sum(q * q, axis=1)
        return (self.a4 * r2 + self.a2)[:, None] * q

    def hess(self, t, q):
        r2 = np.sum(q * q, axis=1)
        eye = np.eye(self.n)
        return (self.a4 * r2 + self.a2)[:, None, None] * eye + 2 * self.a4 * q[:, :, None] * q[:, None, :]

    def dt_grad(self, t, q):
        return self._zeros(q, self.n)


class ScalarAffine(Field):
    """a + g.q + w t (unbounded; mostly useful to exercise validation)."""

    kind, family = SCALAR, "affine"
    params_spec = {"a": 0.0, "g": 0.0, "w": 0.0}

    def _setup(self, a, g, w):
        self.a, self.w = _num(a, "a"), _num(w, "w")
        self.g = _vec(g, self.n, "g")
        self.time_dependent = self.w != 0.0

    def value(self, t, q):
        return self.a + q @ self.g + self.w * t

    def dt(self, t, q):
        return np.full(q.shape[0], self.w)

    def grad(self, t, q):
        return np.broadcast_to(self.g, q.shape).copy()

    def hess(self, t, q):
        return self._zeros(q, self.n, self.n)

    def dt_grad(self, t, q):
        return self._zeros(q, self.n)


# --------------------------------------------------------------------------
# vector fields: value, dt, jac, hess, third, dt_jac
# jac[a,i,k] = d_i f_k, hess[a,i,j,k] = d_i d_j f_k, third[a,i,j,l,k]


class VectorConstant(Field):
    kind, family = VECTOR, "constant"
    params_spec = {"value": 0.0}
    time_dependent = False

    def _setup(self, value):
        self.c = _vec(value, self.n, "value")

    def value(self, t, q):
        return np.broadcast_to(self.c, q.shape).copy()

    def dt(self, t, q):
        return self._zeros(q, self.n)

    def jac(self, t, q):
        return self._zeros(q, self.n, self.n)

    def hess(self, t, q):
        return self._zeros(q, *(self.n,) * 3)

    def third(self, t, q):
        return self._zeros(q, *(self.n,) * 4)

    def dt_jac(self, t, q):
        return self._zeros(q, self.n, self.n)


class VectorLinear(VectorConstant):
    """f(q) = M q + b."""

    family = "linear"
    params_spec = {"matrix": None, "offset": 0.0}

    def _setup(self, matrix, offset):
        self.M = _mat(matrix, self.n, "matrix")
        self.c = _vec(offset, self.n, "offset")

    def value(self, t, q):
        return q @ self.M.T + self.c

    def jac(self, t, q):
        return np.broadcast_to(self.M.T, (q.shape[0], self.n, self.n)).copy()


class VectorUniformB(VectorLinear):
    """Vector potential (B0/2)(-q^2, q^1, 0, ...) of a uniform field along e_3."""

    family = "uniform_B"
    params_spec = {"B0": None}

    def _setup(self, B0):
        if self.n < 2:
            raise FieldError("uniform_B needs dimension >= 2")
        self.B0 = _num(B0, "B0")
        M = np.zeros((self.n, self.n))
        M[0, 1] = -0.5 * self.B0
        M[1, 0] = 0.5 * self.B0
        self.M = M
        self.c = np.zeros(self.n)


class VectorGaussian(Field):
    """amplitude (1 + w t) exp(-|q - center|^2 / (2 width^2))."""

    kind, family = VECTOR, "gaussian"
    params_spec = {"amplitude": None, "center": 0.0, "width": 1.0, "w": 0.0}

    def _setup(self, amplitude, center, width, w):
        self.A = _vec(amplitude, self.n, "amplitude")
        self.c = _vec(center, self.n, "center")
        self.s2 = _num(width, "width") ** 2
        if self.s2 <= 0:
            raise FieldError("gaussian: width must be positive")
        self.w = _num(w, "w")
        self.time_dependent = self.w != 0.0

    def _g(self, q):
        r = (q - self.c) / np.sqrt(self.s2)
        return r, np.exp(-0.5 * np.sum(r * r, axis=1))

    # derivatives of the scalar profile g, with the 1/width factors folded in
    def _dg(self, q, order):
        r, g = self._g(q)
        s = np.sqrt(self.s2)
        eye = np.eye(self.n)
        if order == 0:
            return g
        if order == 1:
            return -r * g[:, None] / s
        if order == 2:
            return (r[:, :, None] * r[:, None, :] - eye) * (g / self.s2)[:, None, None]
        rrr = r[:, :, None, None] * r[:, None, :, None] * r[:, None, None, :]
        d = (
            eye[None, :, :, None] * r[:, None, None, :]
            + eye[None, :, None, :] * r[:, None, :, None]
            + eye[None, None, :, :] * r[:, :, None, None]
        )
        return (d - rrr) * (g / (self.s2 * s))[:, None, None, None]

    def value(self, t, q):
        return (1 + self.w * t) * self._dg(q, 0)[:, None] * self.A

    def dt(self, t, q):
        return self.w * self._dg(q, 0)[:, None] * self.A

    def jac(self, t, q):
        return (1 + self.w * t) * self._dg(q, 1)[..., None] * self.A

    def hess(self, t, q):
        return (1 + self.w * t) * self._dg(q, 2)[..., None] * self.A

    def third(self, t, q):
        return (1 + self.w * t) * self._dg(q, 3)[..., None] * self.A

    def dt_jac(self, t, q):
        return self.w * self._dg(q, 1)[..., None] * self.A


class VectorSum(Field):
    """Sum of vector fields given as a list of {family, params} terms."""

    kind, family = VECTOR, "sum"
    params_spec = {"terms": None}

    def _setup(self, terms):
        if not isinstance(terms, list) or not terms:
            raise FieldError("sum: 'terms' must be a non-empty list")
        self.terms = [make_field(VECTOR, self.n, term) for term in terms]
        self.time_dependent = any(f.time_dependent for f in self.terms)

    def _sum(self, name, t, q):
        return sum(getattr(f, name)(t, q) for f in self.terms)

    def value(self, t, q):
        return self._sum("value", t, q)

    def dt(self, t, q):
        return self._sum("dt", t, q)

    def jac(self, t, q):
        return self._sum("jac", t, q)

    def hess(self, t, q):
        return self._sum("hess", t, q)

    def third(self, t, q):
        return self._sum("third", t, q)

    def dt_jac(self, t, q):
        return self._sum("dt_jac", t, q)


# --------------------------------------------------------------------------
# matrix fields (symmetric): value, grad, hess
# grad[a,i,j,k] = d_i M_jk, hess[a,i,l,j,k] = d_i d_l M_jk


class MatrixConstant(Field):
    kind, family = MATRIX, "constant"
    params_spec = {"value": None}
    time_dependent = False

    def _setup(self, value):
        self.M = _mat(value, self.n, "value")

    @property
    def is_scalar(self):
        return bool(np.allclose(self.M, self.M[0, 0] * np.eye(self.n), rtol=0, atol=0))

    def value(self, t, q):
        return np.broadcast_to(self.M, (q.shape[0], self.n, self.n)).copy()

    def grad(self, t, q):
        return self._zeros(q, *(self.n,) * 3)

    def hess(self, t, q):
        return self._zeros(q, *(self.n,) * 4)


class MatrixScaled(Field):
    """s(t, q) M0 for a scalar field s and a constant matrix M0."""

    kind, family = MATRIX, "scaled"
    params_spec = {"matrix": 1.0, "scalar": None}

    def _setup(self, matrix, scalar):
        self.M = _mat(matrix, self.n, "matrix")
        self.s = make_field(SCALAR, self.n, scalar)
        self.time_dependent = self.s.time_dependent

    def value(self, t, q):
        return self.s.value(t, q)[:, None, None] * self.M

    def grad(self, t, q):
        return self.s.grad(t, q)[:, :, None, None] * self.M

    def hess(self, t, q):
        return self.s.hess(t, q)[..., None, None] * self.M


class MatrixRotation(Field):
    """R(theta) diag(eigenvalues) R(theta)^T with theta = theta0 + k.q.

    R rotates the coordinate plane ``plane`` and fixes the other axes.
    """

    kind, family = MATRIX, "rotation"
    params_spec = {"eigenvalues": None, "k": None, "theta0": 0.0, "plane": [0, 1]}
    time_dependent = False

    def _setup(self, eigenvalues, k, theta0, plane):
        if self.n < 2:
            raise FieldError("rotation needs dimension >= 2")
        self.lam = _vec(eigenvalues, self.n, "eigenvalues")
        self.k = _vec(k, self.n, "k")
        self.theta0 = _num(theta0, "theta0")
        try:
            i, j = (int(x) for x in plane)
        except (TypeError, ValueError):
            raise FieldError("rotation: 'plane' must be two axis indices") from None
        if not (0 <= i < self.n and 0 <= j < self.n and i != j):
            raise FieldError("rotation: invalid 'plane'")
        J = np.zeros((self.n, self.n))
        J[j, i], J[i, j] = 1.0, -1.0
        self.J = J
        self.plane = (i, j)

    def _R(self, q):
        th = self.theta0 + q @ self.k
        c, s = np.cos(th), np.sin(th)
        R = np.broadcast_to(np.eye(self.n), (q.shape[0], self.n, self.n)).copy()
        i, j = self.plane
        R[:, i, i], R[:, j, j] = c, c
        R[:, j, i], R[:, i, j] = s, -s
        return R

    def value(self, t, q):
        R = self._R(q)
        return (R * self.lam) @ np.swapaxes(R, 1, 2)

    def _comm(self, M):
        return self.J @ M - M @ self.J

    def grad(self, t, q):
        return self.k[None, :, None, None] * self._comm(self.value(t, q))[:, None]

    def hess(self, t, q):
        cc = self._comm(self._comm(self.value(t, q)))
        return np.einsum("i,l,ajk->ailjk", self.k, self.k, cc)


REGISTRY = {
    SCALAR: {
        c.family: c
        for c in (ScalarConstant, ScalarTanh, ScalarGaussianBump, ScalarHarmonic, ScalarQuartic, ScalarAffine)
    },
    VECTOR: {c.family: c for c in (VectorConstant, VectorLinear, VectorUniformB, VectorGaussian, VectorSum)},
    MATRIX: {c.family: c for c in (MatrixConstant, MatrixScaled, MatrixRotation)},
}


def make_field(kind, n, spec):
    """Build a field from a ``{"family": ..., "params": {...}}`` mapping."""
    if not isinstance(spec, dict):
        raise FieldError(f"{kind} field must be an object with 'family' and 'params'")
    extra = set(spec) - {"family", "params"}
    if extra:
        raise FieldError(f"unknown field key(s) {sorted(extra)}")
    family = spec.get("family")
    if family not in REGISTRY[kind]:
        raise FieldError(f"unknown {kind} family {family!r}; known: {sorted(REGISTRY[kind])}")
    params = spec.get("params", {})
    if not isinstance(params, dict):
        raise FieldError("'params' must be an object")
    return REGISTRY[kind][family](n, params)
