import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowmarch.checkpoint import load_trajectory, save_trajectory
from shadowmarch.dynamics import KuramotoSivashinsky, LinearSystem, Lorenz63, linear_objective, lorenz_objective
from shadowmarch.exceptions import DimensionError, IntegrationDivergedError, ShadowingError
from shadowmarch.integrators import (
    RALSTON3,
    RK4,
    TABLEAUX,
    ButcherTableau,
    Trajectory,
    adjoint_step,
    advance,
    integrate_adjoint_bundle,
    integrate_primal,
    primal_step,
    simpson,
    simpson_weights,
    tangent_step,
)
from shadowmarch.shadowing import conventional_adjoint

LORENZ = Lorenz63()
KS = KuramotoSivashinsky()
ON_ATTRACTOR = np.array([-4.86, -7.69, 17.9])


def lorenz_state():
    return advance(RK4, LORENZ, ON_ATTRACTOR, 0.01, 200)


@pytest.mark.parametrize("tab", TABLEAUX.values(), ids=TABLEAUX.keys())
def test_tableau_invariants(tab):
    assert np.all(np.triu(tab.a) == 0)
    assert tab.b.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(tab.c, tab.a.sum(axis=1))


def test_tableau_rejects_implicit():
    with pytest.raises(ValueError):
        ButcherTableau(a=[[0.5]], b=[1.0], order=1)
    with pytest.raises(ValueError):
        ButcherTableau(a=[[0.0]], b=[0.9], order=1)


def test_zero_rhs_leaves_state_unchanged():
    sys0 = LinearSystem(np.zeros((2, 2)))
    u = np.array([0.3, -1.2])
    assert np.array_equal(primal_step(RK4, sys0, u, 0.1), u)


def test_rk4_on_linear_scalar_matches_series():
    h = 0.1
    out = primal_step(RK4, LinearSystem([[-1.0]]), np.array([1.0]), h)
    assert abs(out[0] - (1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24)) <= 1e-15


@pytest.mark.parametrize("tab", [RK4, RALSTON3], ids=["rk4", "ralston3"])
def test_observed_order_on_exponential(tab):
    lam = -1.0
    errs = []
    for n in (10, 20, 40, 80):
        u = advance(tab, LinearSystem([[lam]]), np.array([1.0]), 1.0 / n, n)
        errs.append(abs(u[0] - np.exp(lam)))
    slope = np.polyfit(np.log([1 / 10, 1 / 20, 1 / 40, 1 / 80]), np.log(errs), 1)[0]
    assert abs(slope - tab.order) < 0.2


@pytest.mark.parametrize("tab", [RK4, RALSTON3], ids=["rk4", "ralston3"])
def test_lorenz_self_convergence_order(tab):
    u0 = lorenz_state()
    hs = [0.02, 0.01, 0.005, 0.0025, 0.00125]
    ends = [advance(tab, LORENZ, u0, h, int(round(1.0 / h))) for h in hs]
    diffs = [np.linalg.norm(ends[k] - ends[k + 1]) for k in range(len(hs) - 1)]
    slope = np.polyfit(np.log(hs[:-1]), np.log(diffs), 1)[0]
    assert abs(slope - tab.order) < 0.2


def test_primal_step_requires_positive_dt():
    with pytest.raises(ValueError):
        primal_step(RK4, LORENZ, ON_ATTRACTOR, 0.0)


def test_divergence_reports_step():
    blowup = LinearSystem([[50.0]])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(IntegrationDivergedError) as info:
            integrate_primal(RK4, blowup, np.array([1.0]), 1.0, 1000)
    assert 0 < info.value.step < 1000
    assert isinstance(info.value, ShadowingError)


def test_integrate_primal_zero_steps():
    traj = integrate_primal(RK4, LORENZ, ON_ATTRACTOR, 0.01, 0)
    assert traj.n_steps == 0
    assert np.array_equal(traj.states[0], ON_ATTRACTOR)


def test_spinup_lands_on_attractor(rng):
    u = advance(RK4, LORENZ, LORENZ.sample_initial(rng, 4), 0.01, 5000)
    traj = integrate_primal(RK4, LORENZ, u, 0.01, 5000)
    zbar = simpson(traj.states[..., 2], 0.01) / 50.0
    assert np.all((zbar > 20) & (zbar < 26))


def test_trajectory_times():
    traj = Trajectory(2.0, 0.5, np.zeros((4, 3)))
    np.testing.assert_array_equal(traj.times, [2.0, 2.5, 3.0, 3.5])


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    traj = integrate_primal(RK4, LORENZ, ON_ATTRACTOR, 0.01, 50, start=1.25, store=tmp_path / "t.shmt")
    back = load_trajectory(tmp_path / "t.shmt")
    assert back.start == 1.25 and back.dt == 0.01
    assert np.array_equal(back.states, traj.states)
    raw = (tmp_path / "t.shmt").read_bytes()
    assert raw[:4] == b"SHMT"


def test_checkpoint_rejects_corrupt_files(tmp_path):
    p = tmp_path / "bad.shmt"
    p.write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(ValueError):
        load_trajectory(p)
    traj = integrate_primal(RK4, LORENZ, ON_ATTRACTOR, 0.01, 4)
    save_trajectory(p, traj)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_trajectory(p)


def test_adjoint_step_trivial():
    sys0 = LinearSystem(np.zeros((3, 3)))
    psi = np.array([1.0, -2.0, 0.5])
    out = adjoint_step(RK4, sys0, np.zeros(3), psi, 0.1, objective=linear_objective(np.zeros(3)))
    assert np.array_equal(out, psi)


@pytest.mark.parametrize("tab", [RK4, RALSTON3], ids=["rk4", "ralston3"])
def test_scalar_adjoint_is_stability_polynomial(tab):
    lam, h = -0.7, 0.05
    z = lam * h
    if tab is RK4:
        R = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    else:
        R = 1 + z + z**2 / 2 + z**3 / 6  # every explicit 3-stage order-3 method
    out = adjoint_step(tab, LinearSystem([[lam]]), np.array([0.4]), np.array([1.3]), h)
    assert abs(out[0] - R * 1.3) <= 1e-15


@pytest.mark.parametrize("tab", [RK4, RALSTON3], ids=["rk4", "ralston3"])
@pytest.mark.parametrize("system", [LORENZ, KS], ids=["lorenz", "ks"])
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_discrete_dual_identity(tab, system, seed):
    r = np.random.default_rng(seed)
    u = r.standard_normal(system.n) + (ON_ATTRACTOR if system.n == 3 else 0)
    v, w = r.standard_normal(system.n), r.standard_normal(system.n)
    tv = tangent_step(tab, system, u, v, 0.01)
    aw = adjoint_step(tab, system, u, w, 0.01)
    assert abs(tv @ w - v @ aw) <= 1e-12 * np.linalg.norm(tv) * np.linalg.norm(w)


@pytest.mark.parametrize("tab", [RK4, RALSTON3], ids=["rk4", "ralston3"])
def test_adjoint_convergence_order(tab):
    u0 = lorenz_state()
    obj = lorenz_objective()
    hs = [0.02, 0.01, 0.005, 0.0025, 0.00125]
    psi0 = []
    for h in hs:
        n = int(round(0.5 / h))
        traj = integrate_primal(tab, LORENZ, u0, h, n)
        psi0.append(conventional_adjoint(LORENZ, obj, traj, n, tab))
    diffs = [np.linalg.norm(psi0[k] - psi0[k + 1]) for k in range(len(hs) - 1)]
    slope = np.polyfit(np.log(hs[:-1]), np.log(diffs), 1)[0]
    assert abs(slope - tab.order) < 0.3


def _short_lorenz(n=20):
    return integrate_primal(RK4, LORENZ, lorenz_state(), 0.01, n)


def test_bundle_columns_bitwise_independent(rng):
    traj = _short_lorenz()
    Y = rng.standard_normal((3, 3))
    v = rng.standard_normal(3)
    obj = lorenz_objective()
    full = integrate_adjoint_bundle(RK4, LORENZ, traj, 20, 0, Y, v, obj, project_f=True)
    for k in range(3):
        one = integrate_adjoint_bundle(RK4, LORENZ, traj, 20, 0, Y[:, k : k + 1], v, obj, project_f=True)
        assert np.array_equal(full.Y[:, k], one.Y[:, 0])
        assert np.array_equal(full.d[k], one.d[0])
        assert np.array_equal(full.Yf[:, k], one.Yf[:, 0])
        assert np.array_equal(full.v, one.v) and full.h == one.h


def test_ensemble_members_bitwise_independent(rng):
    U0 = advance(RK4, LORENZ, LORENZ.sample_initial(rng, 3), 0.01, 300)
    batch = integrate_primal(RK4, LORENZ, U0, 0.01, 20)
    Y = rng.standard_normal((3, 3, 2))
    v = rng.standard_normal((3, 3))
    obj = lorenz_objective()
    full = integrate_adjoint_bundle(RK4, LORENZ, batch, 20, 0, Y, v, obj)
    for j in range(3):
        single = integrate_primal(RK4, LORENZ, U0[j], 0.01, 20)
        assert np.array_equal(single.states, batch.states[:, j])
        one = integrate_adjoint_bundle(RK4, LORENZ, single, 20, 0, Y[j], v[j], obj)
        assert np.array_equal(full.Y[j], one.Y) and np.array_equal(full.d[j], one.d)
        assert np.array_equal(full.v[j], one.v) and full.h[j] == one.h


def test_bundle_trivial_no_modes_no_source():
    sysl = LinearSystem([[-1.0, 2.0], [0.0, -3.0]], c=[1.0, 0.5])
    traj = integrate_primal(RK4, sysl, np.array([1.0, 1.0]), 0.1, 10)
    res = integrate_adjoint_bundle(
        RK4, sysl, traj, 10, 0, np.zeros((2, 0)), np.zeros(2), linear_objective(np.zeros(2))
    )
    assert res.Y.shape == (2, 0) and not np.any(res.v) and res.h == 0.0


def test_bundle_zero_parameter_derivative(rng):
    sysl = LinearSystem([[-1.0, 2.0], [0.0, -3.0]])
    traj = integrate_primal(RK4, sysl, np.array([1.0, 1.0]), 0.1, 10)
    res = integrate_adjoint_bundle(
        RK4, sysl, traj, 10, 0, rng.standard_normal((2, 2)), rng.standard_normal(2), linear_objective([1.0, 0.0])
    )
    assert not np.any(res.d) and res.h == 0.0


def test_bundle_quadrature_matches_recomputation(rng):
    traj = _short_lorenz(20)  # one segment of length 0.2
    Y = rng.standard_normal((3, 2))
    res = integrate_adjoint_bundle(RK4, LORENZ, traj, 20, 0, Y, quadrature=True)
    W = Y.copy()
    samples = [W.T @ LORENZ.dfds(traj.states[20])]
    for k in range(19, -1, -1):
        W = adjoint_step(RK4, LORENZ, traj.states[k], W, 0.01)
        samples.append(W.T @ LORENZ.dfds(traj.states[k]))
    expected = simpson(np.array(samples[::-1]), 0.01)
    np.testing.assert_allclose(res.d, expected, rtol=1e-12)
    np.testing.assert_allclose(res.Y, W, rtol=1e-12)


def test_bundle_window_checks():
    traj = _short_lorenz(10)
    with pytest.raises(DimensionError):
        integrate_adjoint_bundle(RK4, LORENZ, traj, 5, 5, np.eye(3))
    with pytest.raises(DimensionError):
        integrate_adjoint_bundle(RK4, LORENZ, traj, 12, 0, np.eye(3))
    with pytest.raises(DimensionError):
        integrate_adjoint_bundle(RK4, LORENZ, traj, 10, 0, np.eye(4))


def test_simpson_weights():
    with pytest.raises(ValueError):
        simpson_weights(3, 0.1)
    x = np.linspace(0, 2, 11)
    assert simpson(x**3 - x, 0.2) == pytest.approx(2.0, rel=1e-14)
    assert simpson_weights(4, 3.0).tolist() == [1.0, 4.0, 2.0, 4.0, 1.0]
