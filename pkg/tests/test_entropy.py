import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CONFIG_DIR
from lkentropy import entropy as E
from lkentropy.experiments import random_system, random_uniform_b_system
from lkentropy.simulate import ChunkContext, Overdamped, PathGrid, StepInfo, Underdamped, simulate_ensemble
from lkentropy.system import load_config, parse_config

seeds = st.integers(0, 2**32 - 1)


def spec_1d(beta, V=None, gamma=None, **extra):
    cfg = {
        "dimension": 1,
        "horizon": 2.0,
        "beta": beta,
        "gamma": gamma or {"family": "constant", "params": {"value": 1.0}},
        "V": V or {"family": "harmonic", "params": {"stiffness": 1.0}},
    }
    cfg.update(extra)
    return parse_config(cfg)


CONST = {"family": "constant", "params": {"value": 2.0}}
TANH = {"family": "tanh", "params": {"a": 2.0, "b": 1.0, "k": [1.0]}}


def random_grid(rng, n, N=5, R=9, T=2.0):
    return PathGrid(np.linspace(0, T, R), rng.normal(size=(N, R, n)))


# --- anomaly integrands


def test_scalar_anomaly_hand_value():
    # beta = 2 + tanh(q): beta(0) = 2, beta'(0) = 1, so (3/6)(1/8) = 1/16
    spec = spec_1d(TANH)
    for v in ("general", "psi0", "psi0_eigen", "scalar"):
        assert E.anomaly_integrand(spec, 0.0, np.zeros((1, 1)), v)[0] == pytest.approx(1 / 16, rel=1e-13)


def test_scalar_anomaly_closed_form():
    spec = load_config(CONFIG_DIR / "uniform_b0_3d.json")
    q = np.random.default_rng(0).normal(size=(20, 3))
    b = spec.bundle(0.3, q)
    expect = (3 + 2) / 6 * np.sum(b.beta_grad**2, axis=1) / b.beta**3
    np.testing.assert_allclose(E.anomaly_integrand(spec, 0.3, q, "scalar"), expect, rtol=1e-13)


def test_constant_beta_has_no_anomaly():
    spec = spec_1d(CONST)
    q = np.linspace(-2, 2, 7)[:, None]
    for v in E.applicable_variants(spec):
        assert np.all(E.anomaly_integrand(spec, 0.0, q, v) == 0.0)


def test_uniform_b_zero_field_equals_scalar():
    spec = load_config(CONFIG_DIR / "uniform_b0_3d.json")
    assert "uniformB" in E.applicable_variants(spec)
    q = np.random.default_rng(1).normal(size=(50, 3))
    np.testing.assert_allclose(
        E.anomaly_integrand(spec, 0.0, q, "uniformB"), E.anomaly_integrand(spec, 0.0, q, "scalar"), rtol=1e-14
    )


def test_uniform_b_unit_field_kernel():
    spec = load_config(CONFIG_DIR / "uniform_b1_symmetric_3d.json")
    q = np.random.default_rng(2).normal(size=(50, 3))
    b = spec.bundle(0.0, q)
    K = 2.5 * np.diag([3 / 10, 3 / 10, 1 / 3])
    expect = np.einsum("ai,ij,aj->a", b.beta_grad, K, b.beta_grad) / b.beta**3
    np.testing.assert_allclose(E.anomaly_integrand(spec, 0.0, q, "uniformB"), expect, rtol=1e-13)
    np.testing.assert_allclose(E.anomaly_integrand(spec, 0.0, q, "general"), expect, rtol=1e-10)
    assert np.all(expect >= 0)


def test_variant_requirements():
    with pytest.raises(E.VariantError):
        E.require_variant(load_config(CONFIG_DIR / "uniform_b1_symmetric_3d.json"), "scalar")
    with pytest.raises(E.VariantError):
        E.require_variant(spec_1d(TANH), "cubic")
    with pytest.raises(E.VariantError):
        E.require_variant(random_system(np.random.default_rng(0), 2), "uniformB")


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 4))
def test_eigen_form_is_nonnegative(seed, n):
    spec = random_system(np.random.default_rng(seed), n, psi=False)
    q = np.random.default_rng(seed + 1).normal(size=(30, n)) * 2
    vals = E.anomaly_integrand(spec, 0.5, q, "psi0_eigen")
    assert np.all(vals >= 0)
    np.testing.assert_allclose(vals, E.anomaly_integrand(spec, 0.5, q, "psi0"), rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(vals, E.anomaly_integrand(spec, 0.5, q, "general"), rtol=1e-9, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.0, 3.0))
def test_uniform_b_form_is_nonnegative(seed, B0):
    spec = random_uniform_b_system(np.random.default_rng(seed), B0)
    q = np.random.default_rng(seed + 1).normal(size=(30, 3)) * 2
    vals = E.anomaly_integrand(spec, 0.0, q, "uniformB")
    assert np.all(vals >= 0)
    np.testing.assert_allclose(vals, E.anomaly_integrand(spec, 0.0, q, "general"), rtol=1e-9, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 4))
def test_bridge_identity(seed, n):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    g = Q @ np.diag(rng.uniform(0.2, 5, n)) @ Q.T
    assert E.anomaly_bridge_residual(g) <= 1e-10


def test_anomaly_report_cross_checks():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    rep = E.anomaly_report({"a": x, "b": x.copy(), "c": x + 1.0})
    assert rep.cross_checks[("a", "b")]["pass"]
    assert not rep.cross_checks[("a", "c")]["pass"]
    assert not rep.consistent


# --- Y forms


@settings(max_examples=12, deadline=None)
@given(seeds, st.integers(1, 3), st.booleans())
def test_y_forms_agree(seed, n, psi):
    spec = random_system(np.random.default_rng(seed), n, psi=psi)
    b = spec.bundle(0.7, np.random.default_rng(seed + 1).normal(size=(3, n)))
    np.testing.assert_allclose(E.y1_raw(b), E.y1_simplified(b), rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(E.y2_raw(b), E.y2_simplified(b), rtol=1e-9, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seeds, st.floats(0.0, 3.0))
def test_uniform_b_y1_reduction(seed, B0):
    spec = random_uniform_b_system(np.random.default_rng(seed), B0)
    b = spec.bundle(0.0, np.random.default_rng(seed + 1).normal(size=(5, 3)))
    np.testing.assert_allclose(E.y1_uniform_b(b), E.y1_simplified(b), rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 4))
def test_g_contractions(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    gt = A @ A.T + 0.3 * np.eye(n) + (A - A.T)
    assert max(E.g_contraction_identities(gt).values()) <= 1e-10


# --- limit formula


def test_limit_formula_constant_beta_is_boundary_only():
    spec = spec_1d(CONST)
    grid = random_grid(np.random.default_rng(0), 1)
    got = E.limit_formula(spec, grid, 0.0, 2.0)
    V = 0.5 * grid.q[:, :, 0] ** 2
    # every integrand vanishes with constant beta, psi = 0 and no external force
    np.testing.assert_allclose(got, 2.0 * (V[:, 0] - V[:, -1]), atol=1e-14)


def test_limit_formula_routes_agree():
    spec = random_system(np.random.default_rng(3), 2, psi=False)
    grid = random_grid(np.random.default_rng(4), 2)
    assert np.all(E.limit_path_disagreement(spec, grid, 0.0, 2.0) <= 1e-9)
    a = E.limit_formula(spec, grid, 0.0, 2.0)
    b = E.limit_formula(spec, grid, 0.0, 2.0, check=False)
    assert np.array_equal(a, b)


def test_limit_formula_splits_into_overdamped_and_anomaly():
    spec = random_system(np.random.default_rng(5), 2, psi=True)
    grid = random_grid(np.random.default_rng(6), 2)
    total = E.limit_formula(spec, grid, 0.5, 2.0)
    parts = E.expected_overdamped_entropy(spec, grid, 0.5, 2.0) + E.anomaly(spec, grid, 0.5, 2.0)
    g = grid.window(0.5, 2.0)
    beta = lambda r: spec.beta.value(g.times[r], g.q[:, r])  # noqa: E731
    np.testing.assert_allclose(total, parts + spec.n / 2 * np.log(beta(-1) / beta(0)), rtol=1e-12, atol=1e-12)


def test_limit_formula_needs_grid():
    with pytest.raises(ValueError):
        E.limit_formula(spec_1d(CONST), None, 0.0, 1.0)


# --- ledgers


def _ctx(spec, m=None, N=1):
    return ChunkContext(spec, Underdamped(m) if m else Overdamped(), (0.0, 1.0), N)


def test_underdamped_ledger_single_deterministic_step():
    spec = spec_1d(CONST, V={"family": "harmonic", "params": {"stiffness": 0.0}})
    ob = E.UnderdampedEntropy()
    ctx = _ctx(spec, 0.5)
    q = np.zeros((1, 1))
    z0, z1 = np.array([[1.3]]), np.array([[0.9]])
    ob.start(ctx)
    ob.on_mark(ctx, "start", 0.0, q, z0, spec.bundle(0.0, q))
    ob.on_step(ctx, StepInfo(0.0, 0.1, q, q, z0, z1, mid=spec.bundle(0.05, q)))
    ob.on_mark(ctx, "end", 0.1, q, z1, spec.bundle(0.1, q))
    assert ob.result(ctx)["S_env_m"][0] == pytest.approx(-2.0 * (0.9**2 - 1.3**2) / 2, rel=1e-14)


def test_overdamped_ledger_psi_zero_has_no_minus_part():
    spec = random_system(np.random.default_rng(7), 3, psi=False)
    b = spec.bundle(0.1, np.random.default_rng(8).normal(size=(10, 3)))
    b_minus, div, _ = E._minus_part(b)
    assert np.abs(b_minus).max() <= 1e-14 and np.abs(div).max() <= 1e-14


class BoundaryEnergy:
    names = ("betaH_s", "betaH_t")
    regimes = ("underdamped",)
    uses_grid = False

    def start(self, ctx):
        pass

    def on_mark(self, ctx, which, t, q, z, b):
        ctx.state[("bH", which)] = b.beta * (0.5 * np.sum(z * z, axis=1) + b.V)

    def on_step(self, ctx, step):
        pass

    def on_grid(self, ctx, grid):
        pass

    def result(self, ctx):
        return {"betaH_s": ctx.state[("bH", "start")], "betaH_t": ctx.state[("bH", "end")]}


def test_underdamped_ledger_is_boundary_only_for_constant_coefficients():
    spec = load_config(CONFIG_DIR / "constant_beta_1d.json")
    r = simulate_ensemble(spec, Underdamped(0.1), 50, [E.UnderdampedEntropy(), BoundaryEnergy()], seed=0)
    v = r.values
    np.testing.assert_allclose(v["S_env_m"], v["betaH_s"] - v["betaH_t"], atol=1e-12)


def test_overdamped_ledger_is_boundary_only_for_constant_coefficients():
    spec = load_config(CONFIG_DIR / "constant_beta_1d.json")
    r = simulate_ensemble(spec, Overdamped(), 50, [E.OverdampedEntropy(), E.TerminalMoments(1)], seed=0, c2=256)
    # q_0 = 0, so S = beta (V(q_0) - V(q_T)) = -q_T^2
    np.testing.assert_allclose(r.values["S_env_0"], -r.values["q_norm2"], atol=1e-12)


def test_ledgers_add_over_subintervals():
    spec = load_config(CONFIG_DIR / "reference_1d.json")
    for regime in (Underdamped(0.1), Overdamped()):
        ob = E.UnderdampedEntropy() if isinstance(regime, Underdamped) else E.OverdampedEntropy()
        key = ob.names[0]
        parts = [
            simulate_ensemble(spec, regime, 40, [ob], seed=2, dt=1e-3, window=w).values[key]
            for w in ((0.0, 0.8), (0.8, 2.0), (0.0, 2.0))
        ]
        np.testing.assert_allclose(parts[0] + parts[1], parts[2], rtol=1e-11, atol=1e-11)


def test_equilibrium_entropy_vanishes_on_average():
    spec = parse_config(
        {
            **load_config(CONFIG_DIR / "constant_beta_1d.json").source,
            "initial": {"family": "gaussian", "params": {"mean": 0.0, "std": math.sqrt(0.5)}},
        }
    )
    od = simulate_ensemble(spec, Overdamped(), 3000, [E.OverdampedEntropy()], seed=3, c2=256)
    ud = simulate_ensemble(spec, Underdamped(0.1), 3000, [E.UnderdampedEntropy()], seed=3)
    assert abs(od.mean("S_env_0")) <= 3 * od.stderr("S_env_0")
    assert abs(ud.mean("S_env_m")) <= 3 * ud.stderr("S_env_m")


def test_overdamped_ledger_matches_closed_form():
    spec = load_config(CONFIG_DIR / "reference_1d.json")
    obs = [E.OverdampedEntropy(), E.LogBetaRatio(), E.LimitTerms(spec)]
    r = simulate_ensemble(spec, Overdamped(), 3000, obs, seed=4, c2=1024, window=(0.5, 2.0))
    v = r.values
    d = v["S_env_0"] - v["S_env_0_formula"]
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / math.sqrt(len(d))
    d = v["log_beta_ratio"] - v["log_beta_ratio_ito"]
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / math.sqrt(len(d))
    assert np.all(v["limit_path_gap"] <= 1e-9)


def test_observable_regimes_are_enforced():
    spec = load_config(CONFIG_DIR / "reference_1d.json")
    with pytest.raises(ValueError):
        simulate_ensemble(spec, Overdamped(), 2, [E.UnderdampedEntropy()], 0)
    with pytest.raises(ValueError):
        simulate_ensemble(spec, Underdamped(0.1), 2, [E.OverdampedEntropy()], 0)


# --- homogenization observables


def test_rank_two_identity_limit_is_n_over_beta():
    spec = load_config(CONFIG_DIR / "uniform_b0_3d.json")
    q = np.random.default_rng(0).normal(size=(10, 3))
    field = E.TensorField(np.eye(3))
    np.testing.assert_allclose(
        E.homogenization_limit_integrand(spec, field, 0.0, q), 3 / spec.beta.value(0.0, q), rtol=1e-14
    )


def test_odd_rank_limit_vanishes_without_forces():
    spec = spec_1d(CONST, V={"family": "harmonic", "params": {"stiffness": 0.0}})
    field = E.TensorField(np.ones((1, 1, 1)))
    q = np.linspace(-1, 1, 5)[:, None]
    for fast in (True, False):
        assert np.abs(E.homogenization_limit_integrand(spec, field, 0.0, q, fast=fast)).max() <= 1e-14


@pytest.mark.parametrize("name", ["reference_1d.json", "uniform_b1_symmetric_3d.json"])
def test_rank_one_limit_is_projected_drift(name):
    # m^-1/2 int b.z dr = b.(q_t - q_s), whose small-mass mean has integrand b.(Ito drift)
    spec = load_config(CONFIG_DIR / name)
    n = spec.n
    rng = np.random.default_rng(1)
    bvec = rng.normal(size=n)
    q = rng.normal(size=(6, n))
    bd = spec.bundle(0.2, q)
    expect = (bd.drift_force + bd.S_ito) @ bvec
    for fast in (True, False):
        got = E.homogenization_limit_integrand(spec, E.TensorField(bvec), 0.2, q, fast=fast)
        np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-12)


def test_rank_three_fast_and_looped_routes_agree():
    spec = load_config(CONFIG_DIR / "uniform_b1_symmetric_3d.json")
    B = np.random.default_rng(2).normal(size=(3, 3, 3))
    q = np.random.default_rng(3).normal(size=(4, 3))
    field = E.TensorField(B)
    np.testing.assert_allclose(
        E.homogenization_limit_integrand(spec, field, 0.0, q, fast=True),
        E.homogenization_limit_integrand(spec, field, 0.0, q, fast=False),
        rtol=1e-9,
        atol=1e-12,
    )


def test_homogenization_integral_matches_limit_at_small_mass():
    spec = load_config(CONFIG_DIR / "reference_1d.json")
    field = E.TensorField(np.eye(1))
    u = simulate_ensemble(spec, Underdamped(0.01), 1500, [E.HomogenizationIntegral(field)], seed=5)
    o = simulate_ensemble(spec, Overdamped(), 1500, [E.HomogenizationLimit(field)], seed=6, c2=512)
    se = math.hypot(u.stderr("J"), o.stderr("J_limit"))
    # the bias at m = 0.01 is a few 1e-3 on this system
    assert abs(u.mean("J") - o.mean("J_limit")) <= 4 * se + 0.01
