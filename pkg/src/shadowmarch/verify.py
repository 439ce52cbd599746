"""Independent oracles and convergence studies for the march."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, SingularSystemError
from .integrators import RK4, advance, integrate_primal, simpson
from .shadowing import (
    MarchSolution,
    assemble_sensitivity,
    classify_unstable,
    diagnostics,
    run_march,
    spectrum_of,
)

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
CLAMP = 1e-16


def dense_coefficients(R, b, n_unstable=None):
    """Solve the stacked continuity equations as one dense system.

    Rows are ``R_{i-1} a_i - a_{i-1} = b_{i-1}`` for i = 1..K.  With
    ``n_unstable=None`` the closure is a_0 = 0; otherwise it is a_0^u = 0 and
    a_K^s = 0 for the trailing ``m - n_unstable`` components.
    """
    R = np.asarray(R, dtype=float)
    b = np.asarray(b, dtype=float)
    K, m = b.shape
    if K * m > DENSE_LIMIT:
        raise ConfigError(f"dense oracle limited to K*m <= {DENSE_LIMIT}, got {K * m}")
    p = m if n_unstable is None else int(n_unstable)
    # unknowns: a_0[p:], a_1 .. a_{K-1}, a_K[:p]
    offsets = {0: 0}
    pos = m - p
    for i in range(1, K):
        offsets[i] = pos
        pos += m
    offsets[K] = pos
    size = pos + p
    assert size == K * m

    def cols(i):
        if i == 0:
            return np.arange(p, m), np.arange(offsets[0], offsets[0] + m - p)
        if i == K:
            return np.arange(p), np.arange(offsets[K], offsets[K] + p)
        return np.arange(m), np.arange(offsets[i], offsets[i] + m)

    A = np.zeros((size, size))
    for i in range(1, K + 1):
        rows = slice((i - 1) * m, i * m)
        local, glob = cols(i)
        A[rows, glob] += np.triu(R[i - 1])[:, local]
        local, glob = cols(i - 1)
        A[rows, glob] -= np.eye(m)[:, local]
    try:
        x = np.linalg.solve(A, b.reshape(-1))
    except np.linalg.LinAlgError:
        raise SingularSystemError(-1) from None
    a = np.zeros((K + 1, m))
    for i in range(K + 1):
        local, glob = cols(i)
        a[i, local] = x[glob]
    return a


def dense_march_oracle(sweep, n_unstable=None):
    """Dense reference solution for one single-trajectory sweep."""
    coef = dense_coefficients(sweep.R, sweep.b, n_unstable)
    sens = assemble_sensitivity(coef, sweep.d, sweep.h, float(sweep.integral_js), sweep.T)
    neutral, level, norms = diagnostics(sweep, coef)
    m = sweep.n_modes
    return MarchSolution(
        coef=coef,
        sensitivity=sens,
        mean_objective=float(sweep.mean_objective),
        n_unstable=m if n_unstable is None else int(n_unstable),
        algorithm="dense",
        neutral_defect=neutral,
        level_defect=level,
        max_adjoint_norm=float(norms.max()),
        boundary_norms=norms,
        spectrum=spectrum_of(sweep),
    )


@dataclass
class FDEstimate:
    value: float
    stderr: float
    samples: np.ndarray
    delta_s: float


def _window_average(tableau, system, objective, u0, dt, n_steps):
    traj = integrate_primal(tableau, system, u0, dt, n_steps)
    J = objective.value(traj.states)
    return simpson(J, dt) / (n_steps * dt)


def fd_sensitivity_oracle(
    system,
    objective,
    delta_s,
    T_window,
    n_ensemble,
    dt,
    seed=None,
    spinup=0.0,
    tableau=RK4,
    initial_states=None,
):
    """Central-difference ensemble estimate of dJbar/ds.

    Each member starts from a random state, is spun up at the nominal
    parameter, then spun up again and averaged over ``T_window`` at
    ``s + delta_s`` and ``s - delta_s`` from the same state.
    """
    if delta_s <= 0:
        raise ConfigError("delta_s must be positive")
    n_steps = int(round(T_window / dt))
    if n_steps < 2 or n_steps % 2 or abs(n_steps * dt - T_window) > 1e-9 * T_window:
        raise ConfigError("T_window/dt must be an even integer")
    n_spin = int(round(spinup / dt))
    if initial_states is None:
        rng = np.random.default_rng(seed)
        initial_states = system.sample_initial(rng, n_ensemble)
    u = advance(tableau, system, initial_states, dt, n_spin)
    avg = {}
    for sign in (1, -1):
        perturbed = system.with_param(system.s + sign * delta_s)
        v = advance(tableau, perturbed, u, dt, n_spin)
        avg[sign] = _window_average(tableau, perturbed, objective, v, dt, n_steps)
    samples = (avg[1] - avg[-1]) / (2 * delta_s)
    samples = np.atleast_1d(samples)
    stderr = samples.std(ddof=1) / np.sqrt(samples.size) if samples.size > 1 else np.nan
    return FDEstimate(float(samples.mean()), float(stderr), samples, float(delta_s))


@dataclass
class ConvergenceStudy:
    """Errors against a monotone abscissa, with a fitted log-log slope."""

    abscissae: np.ndarray
    ordinates: np.ndarray
    label: str = "x"
    slope: float = np.nan
    halfwidth: float = np.nan
    columns: dict = field(default_factory=dict)

    MIN_POINTS = 3

    def __post_init__(self):
        x = np.asarray(self.abscissae, dtype=float)
        y = np.asarray(self.ordinates, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ConfigError("abscissae and ordinates must be 1-d of equal length")
        if x.size < self.MIN_POINTS:
            raise ConfigError(f"a convergence study needs at least {self.MIN_POINTS} points, got {x.size}")
        dx = np.diff(x)
        if not (np.all(dx > 0) or np.all(dx < 0)):
            raise ConfigError("abscissae must be strictly monotone")
        self.abscissae, self.ordinates = x, y

    def fit(self):
        self.slope, self.halfwidth = slope_fit(self)
        return self

    def rows(self):
        out = []
        for k, (x, y) in enumerate(zip(self.abscissae, self.ordinates)):
            row = {self.label: x, "error": y}
            row.update({name: col[k] for name, col in self.columns.items()})
            out.append(row)
        return out


def slope_fit(study):
    """Least-squares slope of log(error) against log(abscissa).

    Returns ``(slope, halfwidth)``; the half-width is two standard errors of
    the slope estimated from the residuals (zero for an exact power law).
    """
    x = np.log(np.asarray(study.abscissae, dtype=float))
    y = np.asarray(study.ordinates, dtype=float)
    if np.any(y <= 0):
        warnings.warn(f"non-positive errors clamped to {CLAMP:g} before the log fit", RuntimeWarning, stacklevel=2)
        y = np.maximum(y, CLAMP)
    y = np.log(y)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = x.size - 2
    if dof > 0:
        s2 = resid @ resid / dof
        se = np.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    else:
        se = 0.0
    return float(coef[0]), float(2 * se)


def _spun_up(system, initial_states, dt, spinup, tableau):
    return advance(tableau, system, initial_states, dt, int(round(spinup / dt)))


def neutral_defect_study(system, objective, config, dts, initial_states, tableau=RK4, algorithm="auto"):
    """Mean neutral defect for each step size, on common spun-up states.

    The initial spin-up is done once at the finest step so every step size
    starts from the same points on the attractor.
    """
    dts = [float(h) for h in dts]
    u = _spun_up(system, initial_states, min(dts), config.spinup_initial, tableau)
    means, stderrs, levels = [], [], []
    for dt in dts:
        cfg = replace(config, dt=dt, spinup_initial=0.0)
        run = run_march(system, objective, u, cfg, tableau, algorithm)
        nd = np.array([s.neutral_defect for s in run.solutions])
        means.append(nd.mean())
        stderrs.append(nd.std(ddof=1) / np.sqrt(nd.size) if nd.size > 1 else np.nan)
        levels.append(np.mean([s.level_defect for s in run.solutions]))
        log.info("dt=%g neutral defect %.3e", dt, means[-1])
    study = ConvergenceStudy(
        np.array(dts),
        np.array(means),
        label="dt",
        columns={"stderr": np.array(stderrs), "level_defect": np.array(levels)},
    )
    return study.fit()


def error_vs_T_study(system, objective, config, Ts, initial_states, reference, tableau=RK4, algorithm="auto"):
    """Mean absolute sensitivity error against integration time.

    Every T uses the same initial states.  The ordinate is the error of the
    ensemble-mean sensitivity, ``|mean(dJ/ds) - reference|``; the mean of the
    per-trajectory errors is kept as an extra column.
    """
    means, sens, stderrs, abs_err = [], [], [], []
    for T in Ts:
        cfg = replace(config, T=float(T))
        run = run_march(system, objective, initial_states, cfg, tableau, algorithm)
        s = run.sensitivities
        means.append(abs(s.mean() - reference))
        abs_err.append(np.mean(np.abs(s - reference)))
        sens.append(s.mean())
        stderrs.append(s.std(ddof=1) / np.sqrt(s.size) if s.size > 1 else np.nan)
        log.info("T=%g mean sensitivity %.4f", T, sens[-1])
    study = ConvergenceStudy(
        np.asarray(Ts, dtype=float),
        np.array(means),
        label="T",
        columns={
            "mean_sensitivity": np.array(sens),
            "stderr": np.array(stderrs),
            "mean_abs_error": np.array(abs_err),
        },
    )
    return study.fit()


def synthetic_study(exponent=-0.5, points=5, noise=0.0, seed=None):
    """Power-law self-test data ``x**exponent`` with optional log-normal noise."""
    x = 2.0 ** np.arange(points)
    y = x**exponent
    if noise:
        y = y * np.exp(noise * np.random.default_rng(seed).standard_normal(points))
    return ConvergenceStudy(x, y, label="x").fit()


def split_consistency(sweep, n_unstable=None):
    """Split march and its dense oracle on one sweep (for reports)."""
    from .shadowing import march_split

    if n_unstable is None:
        n_unstable = classify_unstable(spectrum_of(sweep), sweep.config.tol_neutral)
    a = march_split(sweep.R, sweep.b, n_unstable)
    ref = dense_coefficients(sweep.R, sweep.b, n_unstable)
    return a, ref
