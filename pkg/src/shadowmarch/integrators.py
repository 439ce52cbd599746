"""Explicit Runge-Kutta stepping and its discretely consistent adjoint.

The adjoint of one step ``u_{n+1} = u_n + dt * sum_i b_i f(Y_i)`` is::

    psi_n    = psi_{n+1} + sum_k lam_k
    lam_k    = dt * f_u(Y_k)^T (b_k psi_{n+1} + sum_j a_jk lam_j) + dt * b_k J_u(Y_k)

For an explicit tableau ``a_jk`` couples only ``j > k``, so the stage
adjoints are resolved from the last stage down.  Stage states ``Y_k`` are
replayed from the stored ``u_n`` with exactly the arithmetic of the primal
step, so the homogeneous adjoint step is the exact transpose of the tangent
step on the same primal step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, IntegrationDivergedError


@dataclass(frozen=True)
class ButcherTableau:
    a: np.ndarray
    b: np.ndarray
    order: int
    name: str = ""
    c: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape != (a.shape[0],):
            raise ValueError("tableau needs square a and matching b")
        if np.any(np.triu(a) != 0):
            raise ValueError("only explicit (strictly lower-triangular) tableaux are supported")
        if abs(b.sum() - 1.0) > 1e-14:
            raise ValueError("weights must sum to one")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", a.sum(axis=1))

    @property
    def stages(self):
        return len(self.b)


RK4 = ButcherTableau(
    a=[[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1, 0]],
    b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
    order=4,
    name="rk4",
)

# Ralston's third-order method (minimum local error bound)
RALSTON3 = ButcherTableau(
    a=[[0, 0, 0], [0.5, 0, 0], [0, 0.75, 0]],
    b=[2 / 9, 1 / 3, 4 / 9],
    order=3,
    name="ralston3",
)

TABLEAUX = {"rk4": RK4, "ralston3": RALSTON3}


def stage_states(tableau, system, u, dt):
    """Stage states Y_i and their rhs values f(Y_i) for one step from ``u``."""
    a = tableau.a
    Y, F = [], []
    for i in range(tableau.stages):
        y = u
        for j in range(i):
            if a[i, j] != 0.0:
                y = y + (dt * a[i, j]) * F[j]
        Y.append(y)
        F.append(system.rhs(y))
    return Y, F


def _combine(tableau, u, F, dt):
    out = u
    for i in range(tableau.stages):
        if tableau.b[i] != 0.0:
            out = out + (dt * tableau.b[i]) * F[i]
    return out


def primal_step(tableau, system, u, dt, step=0):
    """One explicit RK step.  ``step`` only labels a divergence error."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    # overflow is reported as a divergence below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        _, F = stage_states(tableau, system, u, dt)
        out = _combine(tableau, u, F, dt)
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergedError(step)
    return out


def tangent_step(tableau, system, u, v, dt):
    """Linearisation of :func:`primal_step` at ``u`` applied to ``v``."""
    Y, _ = stage_states(tableau, system, u, dt)
    a = tableau.a
    G = []
    for i in range(tableau.stages):
        V = v
        for j in range(i):
            if a[i, j] != 0.0:
                V = V + (dt * a[i, j]) * G[j]
        G.append(system.jacobian_apply(Y[i], V))
    return _combine(tableau, v, G, dt)


def _adjoint_from_stages(tableau, system, Y, psi, dt, source=None, step=0):
    """Adjoint step given replayed stage states.

    ``source`` is a list of J_u(Y_k), added to the last column of ``psi`` when
    ``psi`` is a column bundle, or to ``psi`` itself otherwise.
    """
    a, b = tableau.a, tableau.b
    ns = tableau.stages
    cols = psi.ndim == Y[0].ndim + 1
    lam = [None] * ns
    for k in range(ns - 1, -1, -1):
        mu = b[k] * psi
        for j in range(k + 1, ns):
            if a[j, k] != 0.0:
                mu = mu + a[j, k] * lam[j]
        lk = dt * system.jacobian_transpose_apply(Y[k], mu)
        if source is not None and b[k] != 0.0:
            if cols:
                lk[..., -1] += (dt * b[k]) * source[k]
            else:
                lk = lk + (dt * b[k]) * source[k]
        lam[k] = lk
    out = psi
    for k in range(ns):
        out = out + lam[k]
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergedError(step, what="adjoint")
    return out


def adjoint_step(tableau, system, u, psi_next, dt, objective=None, step=0):
    """Discrete adjoint of one primal step taken from ``u``.

    Without ``objective`` the homogeneous equation is stepped; with it the
    source term J_u of the objective evaluated at the stage states is included.
    """
    Y, _ = stage_states(tableau, system, u, dt)
    source = None if objective is None else [objective.grad(y) for y in Y]
    return _adjoint_from_stages(tableau, system, Y, np.asarray(psi_next, dtype=float), dt, source, step)


@dataclass
class Trajectory:
    """Primal states ``states[i]`` at ``t_i = start + i * dt``, time-major.

    ``states`` has shape ``(N + 1, ..., n)``; extra axes between time and
    state hold independent ensemble members.
    """

    start: float
    dt: float
    states: np.ndarray

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def times(self):
        return self.start + self.dt * np.arange(self.n_steps + 1)

    def member(self, index):
        """Single-member view of an ensemble trajectory."""
        return Trajectory(self.start, self.dt, self.states[:, index])


def advance(tableau, system, u0, dt, n_steps, first_step=0):
    """Integrate ``n_steps`` without storing intermediate states."""
    u = system.check_state(u0)
    for k in range(n_steps):
        u = primal_step(tableau, system, u, dt, step=first_step + k)
    return u


def integrate_primal(tableau, system, u0, dt, n_steps, start=0.0, store=None):
    """Integrate and keep every state.  ``store`` optionally names a checkpoint file."""
    u = system.check_state(u0)
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    states = np.empty((n_steps + 1,) + u.shape)
    states[0] = u
    for k in range(n_steps):
        u = primal_step(tableau, system, u, dt, step=k)
        states[k + 1] = u
    traj = Trajectory(start, dt, states)
    if store is not None:
        from .checkpoint import save_trajectory

        save_trajectory(store, traj)
    return traj


def simpson_weights(n_intervals, dt):
    """Composite Simpson weights on ``n_intervals + 1`` equispaced nodes."""
    if n_intervals < 2 or n_intervals % 2:
        raise ValueError(f"composite Simpson needs an even number of intervals, got {n_intervals}")
    w = np.full(n_intervals + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * (dt / 3.0)


def simpson(values, dt, axis=0):
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    w = simpson_weights(values.shape[0] - 1, dt)
    return np.tensordot(w, values, axes=(0, 0))


@dataclass
class BundleResult:
    Y: np.ndarray
    v: np.ndarray
    d: np.ndarray
    h: np.ndarray
    # psi^T f projections at every step of the window, index 0 = t_lo
    Yf: np.ndarray | None = None
    vf: np.ndarray | None = None
    # full paths, index 0 = t_lo (only when requested)
    Y_path: np.ndarray | None = None
    v_path: np.ndarray | None = None


def column_dot(W, vec):
    """``W^T vec`` per column, reducing each column over a contiguous axis.

    Keeps every column's summation order independent of the bundle width.
    """
    prod = np.ascontiguousarray(np.swapaxes(W, -1, -2) * vec[..., None, :])
    return prod.sum(axis=-1)


def _window(trajectory, step_lo, step_hi):
    if not (0 <= step_lo < step_hi <= trajectory.n_steps):
        raise DimensionError(
            f"adjoint window [{step_lo}, {step_hi}] outside trajectory of {trajectory.n_steps} steps"
        )


def integrate_adjoint_bundle(
    tableau,
    system,
    trajectory,
    step_hi,
    step_lo,
    Y_terminal,
    v_terminal=None,
    objective=None,
    quadrature=True,
    project_f=False,
    keep_path=False,
):
    """Step a homogeneous bundle and one inhomogeneous solution backward.

    Integrates from trajectory step ``step_hi`` down to ``step_lo``.  The
    columns of ``Y_terminal`` (``(..., n, m)``) follow the homogeneous adjoint
    equation; ``v_terminal`` follows the equation with the source J_u of
    ``objective``.  With ``quadrature`` the integrals ``d = int Y^T f_s dt``
    and ``h = int v^T f_s dt`` are accumulated by composite Simpson at the
    integrator steps.
    """
    _window(trajectory, step_lo, step_hi)
    dt = trajectory.dt
    n_steps = step_hi - step_lo
    U = trajectory.states
    Y = np.asarray(Y_terminal, dtype=float)
    batch = U.shape[1:-1]
    n = U.shape[-1]
    if Y.shape[:-1] != batch + (n,):
        raise DimensionError(f"bundle of shape {Y.shape} does not match states {U.shape[1:]}")
    m = Y.shape[-1]
    has_v = v_terminal is not None
    if has_v:
        v = np.asarray(v_terminal, dtype=float)
        W = np.concatenate([Y, v[..., None]], axis=-1)
    else:
        W = Y.copy()
    if quadrature:
        w = simpson_weights(n_steps, dt)
    acc = np.zeros(batch + (W.shape[-1],))
    proj = np.empty((n_steps + 1,) + batch + (W.shape[-1],)) if project_f else None
    path = np.empty((n_steps + 1,) + W.shape) if keep_path else None

    def record(idx, W, u):
        nonlocal acc
        if quadrature:
            acc = acc + w[idx] * column_dot(W, system.dfds(u))
        if project_f:
            proj[idx] = column_dot(W, system.rhs(u))
        if keep_path:
            path[idx] = W

    record(n_steps, W, U[step_hi])
    for k in range(step_hi - 1, step_lo - 1, -1):
        Ys, _ = stage_states(tableau, system, U[k], dt)
        source = [objective.grad(y) for y in Ys] if (has_v and objective is not None) else None
        W = _adjoint_from_stages(tableau, system, Ys, W, dt, source, step=k)
        record(k - step_lo, W, U[k])

    res = BundleResult(
        Y=W[..., :m] if has_v else W,
        v=W[..., m] if has_v else None,
        d=acc[..., :m] if quadrature else None,
        h=acc[..., m] if (quadrature and has_v) else None,
    )
    if project_f:
        res.Yf = proj[..., :m]
        res.vf = proj[..., m] if has_v else None
    if keep_path:
        res.Y_path = path[..., :m]
        res.v_path = path[..., m] if has_v else None
    return res
