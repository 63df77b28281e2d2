"""Time stepping for the underdamped and overdamped systems and ensemble execution.

The underdamped integrator advances (q, z) with z = u / sqrt(m). Each step
drifts q by half a step, evolves z exactly as an Ornstein-Uhlenbeck process
with the coefficients frozen at the half-drift point, then drifts q again.

Randomness is organized per path: path i owns ``RngStream(seed, i)`` and draws
its initial position, its initial scaled velocity and then its step noise in
that order. Paths are processed in fixed-size chunks, so results do not
depend on how chunks are distributed over worker processes.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .system import SystemSpec, validate_assumptions

CHUNK_PATHS = 4096
NOISE_SEGMENT = 256
DIVERGENCE_BOUND = 1e8


class DivergenceError(RuntimeError):
    def __init__(self, path, t):
        super().__init__(f"path {path} diverged after t={t:.6g}")
        self.path, self.t = path, t


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """Independent Gaussian stream for one path, reproducible bit for bit.

    ``level`` > 0 selects the auxiliary stream used to refine the step noise
    of level ``level - 1`` by Brownian bridging.
    """

    def __init__(self, seed, path_index, stream=0, level=0):
        self.seed, self.path_index, self.stream, self.level = int(seed), int(path_index), int(stream), int(level)
        key = (self.stream, self.path_index) if self.level == 0 else (self.stream, self.path_index, self.level)
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.counter = 0

    def normal(self, shape):
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out


def bridge_split(xi, eta):
    """Split standard normals of one step into two half-step normals with the same sum.

    The pair (xi + eta, xi - eta) / sqrt 2 is i.i.d. standard normal and the
    two half-step Brownian increments add up to the full-step increment.
    """
    out = np.empty((2 * xi.shape[0],) + xi.shape[1:])
    out[0::2] = (xi + eta) / math.sqrt(2.0)
    out[1::2] = (xi - eta) / math.sqrt(2.0)
    return out


class PathNoise:
    """Step noise for one path at refinement level L (2**L steps per base step)."""

    def __init__(self, seed, path_index, stream=0, refine=0):
        self.base = RngStream(seed, path_index, stream)
        self.aux = [RngStream(seed, path_index, stream, level) for level in range(1, refine + 1)]

    def steps(self, base_steps, n):
        xi = self.base.normal((base_steps, n))
        for g in self.aux:
            xi = bridge_split(xi, g.normal(xi.shape))
        return xi


# --------------------------------------------------------------------------
# statistics


@dataclass
class PathEnsembleStats:
    """Count, mean and centered second moment per observable; mergeable."""

    count: int = 0
    mean: dict = field(default_factory=dict)
    M2: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: dict):
        counts = {len(v) for v in values.values()}
        if len(counts) > 1:
            raise ValueError("observables have different sample counts")
        count = counts.pop() if counts else 0
        mean, M2 = {}, {}
        for k, v in values.items():
            v = np.asarray(v, dtype=float)
            mu = float(np.mean(v)) if count else 0.0
            mean[k] = mu
            M2[k] = float(np.sum((v - mu) ** 2)) if count else 0.0
        return cls(count, mean, M2)

    def merge(self, other: "PathEnsembleStats") -> "PathEnsembleStats":
        if self.count == 0:
            return PathEnsembleStats(other.count, dict(other.mean), dict(other.M2))
        if other.count == 0:
            return PathEnsembleStats(self.count, dict(self.mean), dict(self.M2))
        if set(self.mean) != set(other.mean):
            raise ValueError("cannot merge stats over different observables")
        na, nb = self.count, other.count
        n = na + nb
        mean, M2 = {}, {}
        for k in self.mean:
            d = other.mean[k] - self.mean[k]
            mean[k] = self.mean[k] + d * nb / n
            M2[k] = self.M2[k] + other.M2[k] + d * d * na * nb / n
        return PathEnsembleStats(n, mean, M2)

    def variance(self, key):
        return self.M2[key] / (self.count - 1) if self.count > 1 else float("nan")

    def stderr(self, key):
        return math.sqrt(self.variance(key) / self.count) if self.count > 1 else float("nan")


# --------------------------------------------------------------------------
# regimes and grids


@dataclass(frozen=True)
class Underdamped:
    m: float
    scheme: str = "splitting"

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if self.scheme not in ("splitting", "euler"):
            raise ValueError(f"unknown underdamped scheme {self.scheme!r}")


@dataclass(frozen=True)
class Overdamped:
    convention: str = "ito"

    def __post_init__(self):
        if self.convention not in ("ito", "stratonovich"):
            raise ValueError(f"unknown convention {self.convention!r}")


def gamma_eig_max(spec: SystemSpec, box=3.0):
    return validate_assumptions(spec, box=box, count=200, times=5).gamma_eig_max


def default_dt(spec: SystemSpec, regime, c1=20.0, c2=4096.0):
    if isinstance(regime, Underdamped):
        return regime.m / (c1 * gamma_eig_max(spec))
    return spec.horizon / c2


def time_grid(horizon, dt_target, marks=(), multiple=1):
    """Step count K >= horizon / dt_target with every mark on the grid and K % multiple == 0."""
    if not (horizon > 0 and dt_target > 0):
        raise ValueError("horizon and dt must be positive")
    K = max(1, math.ceil(horizon / dt_target - 1e-9))
    for _ in range(1_000_000):
        if K % multiple == 0 and all(abs(mk / horizon * K - round(mk / horizon * K)) < 1e-9 for mk in marks):
            return K
        K += 1
    raise ValueError("cannot place the requested marks on a uniform grid")


@dataclass
class PathGrid:
    """Positions of a batch of paths recorded on a uniform coarse time grid."""

    times: np.ndarray
    q: np.ndarray  # (N, len(times), n)

    def index(self, t):
        k = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
        if k < 0 or k >= len(self.times) or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the recorded grid")
        return k

    def window(self, s, t):
        a, b = self.index(s), self.index(t)
        return PathGrid(self.times[a : b + 1], self.q[:, a : b + 1])


# --------------------------------------------------------------------------
# single steps


class _OUCache:
    """exp(-gt dt / m) and friends, reused while gamma_tilde is constant."""

    def __init__(self):
        self.key = None
        self.value = None

    def get(self, gt, dt, m):
        key = (gt.tobytes(), dt, m)
        if key != self.key:
            self.key, self.value = key, ou_matrices(gt, dt, m)
        return self.value


def _chol_psd(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        lam, U = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
        return (U * np.sqrt(np.clip(lam, 0.0, None))[..., None, :]) @ np.swapaxes(U, -1, -2)


def ou_matrices(gt, dt, m):
    """(E, Phi, L) for dz = (-gt z / m + F / sqrt m) dt + sigma dW / sqrt m over one step.

    E = exp(-gt dt / m), Phi = sqrt(m) (I - E) gt^-1 is the response to a force
    held constant over the step, and L L^T = I - E E^T is the transition
    covariance times beta (the fluctuation-dissipation relation makes the
    Lyapunov integral collapse to this form).
    """
    gt = np.asarray(gt, dtype=float)
    n = gt.shape[-1]
    I = np.eye(n)
    E = scipy.linalg.expm(-gt * (dt / m))
    Phi = math.sqrt(m) * np.linalg.solve(np.swapaxes(gt, -1, -2), np.swapaxes(I - E, -1, -2))
    Phi = np.swapaxes(Phi, -1, -2)
    L = _chol_psd(I - E @ np.swapaxes(E, -1, -2))
    return E, Phi, L


@dataclass
class UnderdampedState:
    t: float
    q: np.ndarray
    z: np.ndarray


@dataclass
class OverdampedState:
    t: float
    q: np.ndarray


def _underdamped_update(spec, t, q, z, m, dt, xi, kern, cache=None, scheme="splitting"):
    """Advance a batch one step; returns (q1, z1, midpoint bundle)."""
    sm = math.sqrt(m)
    if scheme == "euler":
        b = spec.bundle(t, q)
        drift = -np.einsum("aik,ak->ai", b.gt, z) / m + b.F / sm
        noise = np.einsum("aik,ak->ai", b.sigma, xi) * math.sqrt(dt) / sm
        return q + z * (dt / sm), z + drift * dt + noise, b
    q_half = q + z * (0.5 * dt / sm)
    b = spec.bundle(t + 0.5 * dt, q_half)
    scale = 1.0 / np.sqrt(b.beta)
    if spec.gamma_tilde_uniform:
        E, Phi, L = (cache or _OUCache()).get(np.ascontiguousarray(b.gt[0]), dt, m)
        z1 = kern.ou_update(z, E, Phi, b.F, L, xi, scale)
    else:
        E, Phi, L = ou_matrices(b.gt, dt, m)
        z1 = kern.ou_update(z, E, Phi, b.F, L * scale[:, None, None], xi, None)
    q1 = q_half + z1 * (0.5 * dt / sm)
    return q1, z1, b


def _overdamped_update(spec, t, q, dt, dW, convention, b0=None):
    """Advance a batch one step given Brownian increments dW; returns (q1, bundle at start)."""
    b0 = b0 if b0 is not None else spec.bundle(t, q)
    if convention == "ito":
        return q + (b0.drift_force + b0.S_ito) * dt + np.einsum("aik,ak->ai", b0.gti_sigma, dW), b0
    f0 = b0.drift_force + b0.S_strat
    g0 = np.einsum("aik,ak->ai", b0.gti_sigma, dW)
    qp = q + f0 * dt + g0
    bp = spec.bundle(t + dt, qp)
    f1 = bp.drift_force + bp.S_strat
    g1 = np.einsum("aik,ak->ai", bp.gti_sigma, dW)
    return q + 0.5 * (f0 + f1) * dt + 0.5 * (g0 + g1), b0


def step_underdamped(spec: SystemSpec, state: UnderdampedState, m, dt, rng: RngStream, scheme="splitting"):
    if not (dt > 0 and m > 0):
        raise ValueError("dt and m must be positive")
    xi = rng.normal(spec.n)[None, :]
    q1, z1, _ = _underdamped_update(
        spec, state.t, state.q[None, :], state.z[None, :], m, dt, xi, _kernels.kernels, scheme=scheme
    )
    if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(z1))):
        raise DivergenceError(rng.path_index, state.t)
    return UnderdampedState(state.t + dt, q1[0], z1[0])


def step_overdamped(spec: SystemSpec, state: OverdampedState, dt, rng: RngStream, convention="ito"):
    if not dt > 0:
        raise ValueError("dt must be positive")
    dW = rng.normal(spec.n)[None, :] * math.sqrt(dt)
    q1, _ = _overdamped_update(spec, state.t, state.q[None, :], dt, dW, convention)
    if not np.all(np.isfinite(q1)):
        raise DivergenceError(rng.path_index, state.t)
    return OverdampedState(state.t + dt, q1[0])


# --------------------------------------------------------------------------
# observables


class Observable:
    """Per-path quantity built from a simulated chunk.

    Step observables see every step inside the window through ``on_step`` and
    the window end points through ``on_mark``; grid observables receive the
    recorded coarse path through ``on_grid``. ``result`` returns a dict of
    per-path arrays.
    """

    names: tuple = ()
    regimes: tuple = ("underdamped", "overdamped")
    uses_grid = False

    def start(self, ctx):
        pass

    def on_mark(self, ctx, which, t, q, z, bundle):
        pass

    def on_step(self, ctx, step):
        pass

    def on_grid(self, ctx, grid: PathGrid):
        pass

    def result(self, ctx) -> dict:
        raise NotImplementedError


@dataclass
class StepInfo:
    t0: float
    dt: float
    q0: np.ndarray
    q1: np.ndarray
    z0: np.ndarray | None
    z1: np.ndarray | None
    mid: object = None  # underdamped: bundle at the half-drift point
    b0: object = None  # overdamped: bundle at the start of the step
    b1: object = None  # overdamped: bundle at the end of the step


@dataclass
class ChunkContext:
    spec: SystemSpec
    regime: object
    window: tuple
    N: int
    state: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.regime.m


# --------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    values: dict
    stats: PathEnsembleStats
    excluded: int
    steps: int
    dt: float

    def mean(self, key):
        return self.stats.mean[key]

    def stderr(self, key):
        return self.stats.stderr(key)


@dataclass
class _Job:
    spec: SystemSpec
    regime: object
    N: int
    seed: int
    stream: int
    K: int
    dt: float
    window: tuple
    observables: list
    stride: int
    divergence: str
    refine: int = 0


def _run_chunk(job: _Job, chunk: int):
    spec, regime, n = job.spec, job.regime, job.spec.n
    first = chunk * CHUNK_PATHS
    count = min(CHUNK_PATHS, job.N - first)
    sources = [PathNoise(job.seed, first + i, job.stream, job.refine) for i in range(count)]
    rngs = [src.base for src in sources]
    init = spec.initial_condition()
    q = np.empty((count, n))
    for i, r in enumerate(rngs):
        x = r.normal(n)
        q[i] = init.mean if init.kind == "point" else init.mean + init.std * x
    under = isinstance(regime, Underdamped)
    z = None
    if under:
        beta0 = spec.beta.value(0.0, q)
        z = np.empty((count, n))
        for i, r in enumerate(rngs):
            z[i] = r.normal(n) / math.sqrt(beta0[i])
    ctx = ChunkContext(spec, regime, job.window, count)
    for ob in job.observables:
        ob.start(ctx)
    dt, K = job.dt, job.K
    fine = 2**job.refine
    seg_fine = NOISE_SEGMENT * fine
    ks, kt = (int(round(w / spec.horizon * K)) for w in job.window)
    want_grid = any(ob.uses_grid for ob in job.observables)
    grid_q = None
    if want_grid:
        grid_q = np.empty((count, K // job.stride + 1, n))
        grid_q[:, 0] = q
    alive = np.ones(count, dtype=bool)
    kern = _kernels.kernels
    cache = _OUCache()
    sq_dt = math.sqrt(dt)
    noise = None
    b_next = None
    for k in range(K):
        t = k * dt
        if k % seg_fine == 0:
            base_steps = min(NOISE_SEGMENT, (K - k) // fine)
            noise = np.empty((count, base_steps * fine, n))
            for i, src in enumerate(sources):
                noise[i] = src.steps(base_steps, n)
        xi = noise[:, k % seg_fine]
        in_window = ks <= k < kt
        if k == ks:
            bm = spec.bundle(t, q)
            for ob in job.observables:
                ob.on_mark(ctx, "start", t, q, z, bm)
        if under:
            q1, z1, mid = _underdamped_update(spec, t, q, z, regime.m, dt, xi, kern, cache, regime.scheme)
            step = StepInfo(t, dt, q, q1, z, z1, mid=mid) if in_window else None
        else:
            b0 = b_next if b_next is not None else spec.bundle(t, q)
            q1, b0 = _overdamped_update(spec, t, q, dt, xi * sq_dt, regime.convention, b0)
            z1 = None
            step = None
            b_next = None
            if in_window:
                b_next = spec.bundle(t + dt, q1)
                step = StepInfo(t, dt, q, q1, None, None, b0=b0, b1=b_next)
        bad = ~np.all(np.isfinite(q1) & (np.abs(q1) < DIVERGENCE_BOUND), axis=1)
        if under:
            bad |= ~np.all(np.isfinite(z1) & (np.abs(z1) < DIVERGENCE_BOUND), axis=1)
        if bad.any():
            new = bad & alive
            if job.divergence == "fail" and new.any():
                raise DivergenceError(first + int(np.flatnonzero(new)[0]), t)
            alive &= ~bad
            q1 = np.where(bad[:, None], 0.0, q1)
            if under:
                z1 = np.where(bad[:, None], 0.0, z1)
            b_next = None
            if step is not None:
                step = StepInfo(t, dt, q, q1, z, z1, mid=step.mid, b0=step.b0, b1=spec.bundle(t + dt, q1) if not under else None)
        if step is not None:
            for ob in job.observables:
                ob.on_step(ctx, step)
        q, z = q1, z1
        if want_grid and (k + 1) % job.stride == 0:
            grid_q[:, (k + 1) // job.stride] = q
        if k + 1 == kt:
            bm = b_next if b_next is not None else spec.bundle((k + 1) * dt, q)
            for ob in job.observables:
                ob.on_mark(ctx, "end", (k + 1) * dt, q, z, bm)
    if want_grid:
        grid = PathGrid(np.arange(K // job.stride + 1) * (job.stride * dt), grid_q)
        for ob in job.observables:
            if ob.uses_grid:
                ob.on_grid(ctx, grid)
    out = {}
    for ob in job.observables:
        for key, v in ob.result(ctx).items():
            out[key] = np.asarray(v, dtype=float)
    bad = ~alive
    for v in out.values():
        bad |= ~np.isfinite(v)
    return {key: v[~bad] for key, v in out.items()}, int(bad.sum())


_WORKER_JOB = None


def _worker_init(job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _worker_run(chunk):
    return _run_chunk(_WORKER_JOB, chunk)


def simulate_ensemble(
    spec: SystemSpec,
    regime,
    N,
    observables,
    seed,
    window=None,
    dt=None,
    c1=20.0,
    c2=4096.0,
    stream=0,
    stride=16,
    workers=1,
    divergence="fail",
    refine=0,
):
    """Run N paths and evaluate the observables on each.

    ``window`` = (s, t) selects where step and grid observables integrate and
    where the start/end marks fall; it defaults to (0, horizon). Per-path
    values are returned in path order, so the output does not depend on
    ``workers``.

    ``refine`` = L splits every step of the grid chosen from ``dt`` (or c1, c2)
    into 2**L steps driven by the same Brownian path, so runs that differ
    only in L are coupled. The recorded coarse grid is unchanged.
    """
    if N < 1:
        raise ValueError("need at least one path")
    if divergence not in ("fail", "record"):
        raise ValueError("divergence policy is 'fail' or 'record'")
    T = spec.horizon
    window = (0.0, T) if window is None else (float(window[0]), float(window[1]))
    if not (0 <= window[0] < window[1] <= T + 1e-12):
        raise ValueError("window must satisfy 0 <= s < t <= horizon")
    kind = "underdamped" if isinstance(regime, Underdamped) else "overdamped"
    for ob in observables:
        if kind not in ob.regimes:
            raise ValueError(f"{type(ob).__name__} does not apply to the {kind} regime")
    uses_grid = any(ob.uses_grid for ob in observables)
    dt_target = dt if dt is not None else default_dt(spec, regime, c1, c2)
    if refine < 0:
        raise ValueError("refine must be non-negative")
    if uses_grid:
        K = stride * time_grid(T, dt_target * stride, marks=window)
    else:
        K = time_grid(T, dt_target, marks=window)
    K *= 2**refine
    step = T / K
    job = _Job(spec, regime, N, seed, stream, K, step, window, list(observables), stride * 2**refine, divergence, refine)
    chunks = range((N + CHUNK_PATHS - 1) // CHUNK_PATHS)
    if workers > 1 and len(chunks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_worker_init, initargs=(job,)) as ex:
            parts = list(ex.map(_worker_run, chunks))
    else:
        parts = [_run_chunk(job, c) for c in chunks]
    stats = PathEnsembleStats()
    values = {}
    excluded = 0
    for vals, bad in parts:
        stats = stats.merge(PathEnsembleStats.from_values(vals))
        excluded += bad
        for k, v in vals.items():
            values.setdefault(k, []).append(v)
    values = {k: np.concatenate(v) for k, v in values.items()}
    return EnsembleResult(values, stats, excluded, K, step)
