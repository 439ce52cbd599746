"""Adjoint shadowing by the stabilized march.

The adjoint on [0, T] is split into K segments.  On segment i it is written
as ``psi(t) = Y_i(t) a_i + v_i(t)`` where the columns of ``Y_i`` solve the
homogeneous adjoint equation from ``Y_i(t_i) = Q_i`` and ``v_i`` solves the
inhomogeneous one from ``v_i(t_i) = gamma_i``.  Re-orthonormalising at every
boundary, ``Y_i(t_{i-1}) = Q_{i-1} R_{i-1}``, and projecting ``v_i`` off
``Q_{i-1}`` turns continuity into the triangular recursion

    R_{i-1} a_i = a_{i-1} + b_{i-1},      b_{i-1} = -Q_{i-1}^T v_i(t_{i-1}).

The terminal particular solution is chosen so that ``psi(T)^T f(T)`` equals
``Jbar - J(T)``, which pins the neutral (flow-direction) component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ConfigError,
    NearEquilibriumError,
    RankDeficientError,
    SubspaceOverflowError,
)
from .integrators import RK4, integrate_adjoint_bundle, simpson, simpson_weights
from .linalg import TriangularSolveCounter, back_substitute, thin_qr

log = logging.getLogger(__name__)

F_FLOOR = 1e-8


def _int_ratio(num, den, what):
    r = num / den
    k = int(round(r))
    if k < 0 or abs(r - k) > 1e-9 * max(1.0, abs(r)):
        raise ConfigError(f"{what} must be an integer, got {r!r}")
    return k


@dataclass
class MarchConfig:
    """Time-window and bundle settings of one march.

    T / segment_length must be an integer K and segment_length / dt an even
    integer (composite Simpson inside every segment).
    """

    T: float
    segment_length: float
    dt: float
    n_modes: int = 1
    spinup_initial: float = 0.0
    spinup_final: float = 0.0
    tol_neutral: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self, n=None):
        if not (self.dt > 0 and self.segment_length > 0 and self.T > 0):
            raise ConfigError("T, segment_length and dt must be positive")
        if self.spinup_initial < 0 or self.spinup_final < 0:
            raise ConfigError("spin-up times must be non-negative")
        sps = _int_ratio(self.segment_length, self.dt, "segment_length/dt")
        if sps == 0 or sps % 2:
            raise ConfigError(f"segment_length/dt must be an even positive integer, got {sps}")
        if _int_ratio(self.T, self.segment_length, "T/segment_length") < 1:
            raise ConfigError("T must contain at least one segment")
        _int_ratio(self.spinup_final, self.dt, "spinup_final/dt")
        _int_ratio(self.spinup_initial, self.dt, "spinup_initial/dt")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ConfigError(f"n_modes must be a positive integer, got {self.n_modes}")
        if n is not None and self.n_modes > n:
            raise ConfigError(f"n_modes={self.n_modes} exceeds system dimension {n}")
        return self

    @property
    def steps_per_segment(self):
        return _int_ratio(self.segment_length, self.dt, "segment_length/dt")

    @property
    def n_segments(self):
        return _int_ratio(self.T, self.segment_length, "T/segment_length")

    @property
    def n_steps(self):
        return self.n_segments * self.steps_per_segment

    @property
    def n_spinup_final(self):
        return _int_ratio(self.spinup_final, self.dt, "spinup_final/dt")

    @property
    def n_spinup_initial(self):
        return _int_ratio(self.spinup_initial, self.dt, "spinup_initial/dt")

    def derived(self):
        return {
            "K": self.n_segments,
            "steps_per_segment": self.steps_per_segment,
            "N": self.n_steps,
            "spinup_initial_steps": self.n_spinup_initial,
            "spinup_final_steps": self.n_spinup_final,
            "stored_states": self.n_steps + self.n_spinup_final + 1,
        }


@dataclass
class SegmentRecord:
    index: int
    Q: np.ndarray
    R_prev: np.ndarray
    b_prev: np.ndarray
    gamma: np.ndarray
    d: np.ndarray
    h: float


@dataclass
class SweepResult:
    """Everything the backward sweep produces for one trajectory (or a batch).

    Index conventions, with K segments:

    * ``Q[i]``, ``gamma[i]`` for boundaries i = 0..K
    * ``R[i]``, ``b[i]`` for i = 0..K-1 (``R_{i}`` relates a_{i+1} to a_i)
    * ``d[i-1]``, ``h[i-1]``, ``Yf[i-1]``, ``vf[i-1]`` for segment i = 1..K
    """

    config: MarchConfig
    Q: np.ndarray
    R: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    d: np.ndarray
    h: np.ndarray
    mean_objective: np.ndarray
    integral_js: np.ndarray
    objective_values: np.ndarray
    Yf: np.ndarray
    vf: np.ndarray
    f_terminal: np.ndarray

    @property
    def n_segments(self):
        return self.R.shape[0]

    @property
    def n_modes(self):
        return self.R.shape[-1]

    @property
    def T(self):
        return self.config.T

    @property
    def batch_shape(self):
        return self.R.shape[1:-2]

    def member(self, j):
        """Single-trajectory slice of a batched sweep."""
        if not self.batch_shape:
            raise IndexError("sweep is not batched")

        def take(x, axis):
            return np.take(x, j, axis=axis)

        return SweepResult(
            config=self.config,
            Q=take(self.Q, 1),
            R=take(self.R, 1),
            b=take(self.b, 1),
            gamma=take(self.gamma, 1),
            d=take(self.d, 1),
            h=take(self.h, 1),
            mean_objective=take(self.mean_objective, 0),
            integral_js=take(self.integral_js, 0),
            objective_values=take(self.objective_values, 1),
            Yf=take(self.Yf, 2),
            vf=take(self.vf, 2),
            f_terminal=take(self.f_terminal, 0),
        )

    def members(self):
        if not self.batch_shape:
            return [self]
        return [self.member(j) for j in range(self.batch_shape[0])]

    def segment(self, i):
        """Record of segment ``i`` (1..K)."""
        if not 1 <= i <= self.n_segments:
            raise IndexError(i)
        return SegmentRecord(
            index=i,
            Q=self.Q[i],
            R_prev=self.R[i - 1],
            b_prev=self.b[i - 1],
            gamma=self.gamma[i],
            d=self.d[i - 1],
            h=self.h[i - 1],
        )


@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray
    n_segments: int
    T: float

    @property
    def nonincreasing(self):
        return bool(np.all(np.diff(self.exponents) <= 1e-12))


@dataclass
class MarchSolution:
    coef: np.ndarray
    sensitivity: float
    mean_objective: float
    n_unstable: int
    algorithm: str
    neutral_defect: float = np.nan
    level_defect: float = np.nan
    max_adjoint_norm: float = np.nan
    boundary_norms: np.ndarray | None = None
    solves: int = 0
    flops: int = 0
    spectrum: LyapunovSpectrum | None = None
    extras: dict = field(default_factory=dict)


def terminal_particular(f_T, mean_objective, J_T, f_floor=F_FLOOR):
    """gamma_K = (Jbar - J(T)) f(T) / |f(T)|^2, so that gamma_K^T f(T) = Jbar - J(T)."""
    f_T = np.asarray(f_T, dtype=float)
    fn2 = np.sum(f_T * f_T, axis=-1)
    if np.any(np.sqrt(fn2) <= f_floor):
        raise NearEquilibriumError(
            f"|f(u_T)| = {np.sqrt(fn2).min():.3e} <= {f_floor:g}; terminal state is near an equilibrium"
        )
    scale = (np.asarray(mean_objective) - np.asarray(J_T)) / fn2
    return scale[..., None] * f_T


def seed_unstable_basis(f_end, m, rng, retries=3):
    """Orthonormal n x m block orthogonal to ``f_end``.

    The first column of the QR factor of ``[f_end, W]`` (W Gaussian) spans
    ``f_end``; the remaining m columns are returned.  With ``m == n`` no
    complement of that size exists and an orthonormal basis of the whole
    space is returned instead (only useful for the Lyapunov spectrum).
    """
    f_end = np.asarray(f_end, dtype=float)
    n = f_end.shape[-1]
    if m > n:
        raise ConfigError(f"need m <= n, got m={m}, n={n}")
    rng = np.random.default_rng(rng)
    for attempt in range(retries + 1):
        W = rng.standard_normal(f_end.shape[:-1] + (n, m))
        try:
            if m == n:
                return thin_qr(W).Q
            Q, _ = thin_qr(np.concatenate([f_end[..., None], W], axis=-1))
        except RankDeficientError:
            if attempt == retries:
                raise
            log.warning("rank-deficient seed basis, redrawing (attempt %d)", attempt + 1)
            continue
        return Q[..., 1:]


def backward_sweep(system, objective, trajectory, config, tableau=RK4, rng=None):
    """Spin-up of the homogeneous bundle, then segment-by-segment backward sweep.

    ``trajectory`` must start at t = 0 and hold at least ``N + N_f`` steps,
    where ``N = T/dt`` and ``N_f = spinup_final/dt``.  Ensemble trajectories
    (``states`` of shape ``(steps, B, n)``) are swept together.
    """
    n = system.n
    config.validate(n)
    if abs(trajectory.dt - config.dt) > 1e-12 * config.dt:
        raise ConfigError(f"trajectory dt {trajectory.dt} differs from config dt {config.dt}")
    K, sps, N, Nf = config.n_segments, config.steps_per_segment, config.n_steps, config.n_spinup_final
    if trajectory.n_steps < N + Nf:
        raise ConfigError(f"trajectory has {trajectory.n_steps} steps, need {N + Nf}")
    m = config.n_modes
    U = trajectory.states
    dt = config.dt
    batch = U.shape[1:-1]
    rng = np.random.default_rng(config.seed if rng is None else rng)

    J = objective.value(U[: N + 1])
    mean_J = simpson(J, dt) / config.T
    integral_js = simpson(objective.dparam(U[: N + 1]), dt)

    # spin-up over [T, T + T0f]: factorise every segment_length, keep only Q
    Qc = seed_unstable_basis(system.rhs(U[N + Nf]), m, rng)
    hi = N + Nf
    while hi > N:
        lo = max(N, hi - sps)
        res = integrate_adjoint_bundle(tableau, system, trajectory, hi, lo, Qc, quadrature=False)
        Qc = thin_qr(res.Y).Q
        hi = lo

    Q = np.empty((K + 1,) + batch + (n, m))
    gamma = np.empty((K + 1,) + batch + (n,))
    R = np.empty((K,) + batch + (m, m))
    b = np.empty((K,) + batch + (m,))
    d = np.empty((K,) + batch + (m,))
    h = np.empty((K,) + batch)
    Yf = np.empty((K, sps + 1) + batch + (m,))
    vf = np.empty((K, sps + 1) + batch)

    f_T = system.rhs(U[N])
    Q[K] = Qc
    gamma[K] = terminal_particular(f_T, mean_J, J[N])
    for i in range(K, 0, -1):
        res = integrate_adjoint_bundle(
            tableau, system, trajectory, i * sps, (i - 1) * sps, Q[i], gamma[i], objective, project_f=True
        )
        Q[i - 1], R[i - 1] = thin_qr(res.Y)
        b[i - 1] = -np.einsum("...ij,...i->...j", Q[i - 1], res.v)
        gamma[i - 1] = res.v + np.einsum("...ij,...j->...i", Q[i - 1], b[i - 1])
        d[i - 1] = res.d
        h[i - 1] = res.h
        Yf[i - 1] = res.Yf
        vf[i - 1] = res.vf

    return SweepResult(
        config=config,
        Q=Q,
        R=R,
        b=b,
        gamma=gamma,
        d=d,
        h=h,
        mean_objective=np.asarray(mean_J),
        integral_js=np.asarray(integral_js),
        objective_values=J,
        Yf=Yf,
        vf=vf,
        f_terminal=f_T,
    )


def lyapunov_exponents(R, T):
    """Finite-time exponents (1/T) sum_i ln |[R_i]_jj| from a stack of R factors."""
    R = np.asarray(R)
    diag = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    if np.any(diag == 0):
        j = int(np.argmax((diag == 0).reshape(-1, diag.shape[-1]).any(axis=0)))
        raise RankDeficientError(j)
    return np.log(diag).sum(axis=0) / T


def spectrum_of(sweep):
    lam = lyapunov_exponents(sweep.R, sweep.T)
    spec = LyapunovSpectrum(lam, sweep.n_segments, sweep.T)
    if lam.ndim == 1 and not spec.nonincreasing:
        log.info("Lyapunov spectrum not ordered: %s", np.array2string(lam, precision=4))
    return spec


def default_tol_neutral(exponents):
    """5% of the leading exponent.

    Scales with the system's own time unit; an absolute floor would swallow
    every unstable mode of a slowly growing system.
    """
    return 0.05 * max(0.0, float(np.max(exponents)))


def classify_unstable(exponents, tol_neutral=None, allow_full=False):
    """Number of leading exponents above ``tol_neutral``.

    Raises :class:`SubspaceOverflowError` when every tracked mode is
    unstable, unless ``allow_full`` (the caller then asserts m = n_u).
    """
    lam = np.asarray(getattr(exponents, "exponents", exponents), dtype=float)
    tol = default_tol_neutral(lam) if tol_neutral is None else float(tol_neutral)
    n_u = 0
    while n_u < lam.size and lam[n_u] > tol:
        n_u += 1
    if n_u == lam.size and not allow_full:
        raise SubspaceOverflowError(
            f"all {lam.size} tracked exponents exceed {tol:g}; increase the number of modes"
        )
    return n_u


def march_exact(R, b, counter=None):
    """Forward march with a_0 = 0: solve R_{i-1} a_i = a_{i-1} + b_{i-1}, i = 1..K."""
    R = np.asarray(R, dtype=float)
    b = np.asarray(b, dtype=float)
    K, m = b.shape
    a = np.zeros((K + 1, m))
    for i in range(1, K + 1):
        a[i] = back_substitute(R[i - 1], a[i - 1] + b[i - 1], counter)
    return a


def march_split(R, b, n_unstable, counter=None):
    """March with m > n_u.

    The stable/neutral block is recursed backward from a_K^s = 0 by
    multiplication only; the unstable block is then marched forward from
    a_0^u = 0 by triangular solves.
    """
    R = np.asarray(R, dtype=float)
    b = np.asarray(b, dtype=float)
    K, m = b.shape
    p = int(n_unstable)
    if not 0 <= p <= m:
        raise ValueError(f"n_unstable={p} outside [0, {m}]")
    a = np.zeros((K + 1, m))
    for i in range(K, 0, -1):
        Rs = R[i - 1, p:, p:]
        a[i - 1, p:] = np.triu(Rs) @ a[i, p:] - b[i - 1, p:]
    if p == 0:
        return a
    for i in range(1, K + 1):
        rhs = b[i - 1, :p] + a[i - 1, :p]
        if p < m:
            rhs = rhs - R[i - 1, :p, p:] @ a[i, p:]
        a[i, :p] = back_substitute(R[i - 1, :p, :p], rhs, counter)
    return a


def assemble_sensitivity(coef, d, h, integral_js, T):
    """(1/T) (sum_i (a_i^T d_i + h_i) + int J_s dt)."""
    total = np.einsum("ij,ij->", coef[1:], d) + np.sum(h) + integral_js
    return float(total / T)


def adjoint_f_projection(sweep, coef):
    """psi^T f at every step, per segment: shape (K, steps_per_segment + 1)."""
    return np.einsum("kti,ki->kt", sweep.Yf, coef[1:]) + sweep.vf


def diagnostics(sweep, coef):
    """Neutral defect, level-set defect and boundary adjoint norms."""
    cfg = sweep.config
    sps = cfg.steps_per_segment
    pf = adjoint_f_projection(sweep, coef)
    w = simpson_weights(sps, cfg.dt)
    neutral = abs(float(np.sum(pf @ w))) / cfg.T
    # psi^T f + J - Jbar at every step (segment start values duplicate the previous end)
    J = sweep.objective_values
    K = sweep.n_segments
    Jseg = np.stack([J[(i - 1) * sps : i * sps + 1] for i in range(1, K + 1)])
    level = float(np.max(np.abs(pf + Jseg - sweep.mean_objective)))
    psi_b = np.einsum("kij,kj->ki", sweep.Q, coef) + sweep.gamma
    norms = np.linalg.norm(psi_b, axis=-1)
    return neutral, level, norms


def solve(sweep, algorithm="auto", tol_neutral=None, n_unstable=None):
    """Run the triangular march(es) on one sweep and assemble the sensitivity.

    ``algorithm`` is ``"exact"`` (m = n_u assumed), ``"split"`` or ``"auto"``
    (split when the classified n_u is below m).
    """
    if sweep.batch_shape:
        raise ValueError("solve() takes a single-trajectory sweep; use sweep.members()")
    spec = spectrum_of(sweep)
    m = sweep.n_modes
    tol = tol_neutral if tol_neutral is not None else sweep.config.tol_neutral
    if n_unstable is None:
        n_unstable = classify_unstable(spec, tol, allow_full=algorithm in ("auto", "exact"))
    if algorithm == "auto":
        algorithm = "split" if n_unstable < m else "exact"
    counter = TriangularSolveCounter()
    if algorithm == "exact":
        if n_unstable != m:
            log.warning("exact march with m=%d but %d exponents classified unstable", m, n_unstable)
        coef = march_exact(sweep.R, sweep.b, counter)
    elif algorithm == "split":
        if n_unstable == m:
            raise SubspaceOverflowError(f"all {m} tracked modes unstable; split march needs m > n_u")
        coef = march_split(sweep.R, sweep.b, n_unstable, counter)
    else:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    sens = assemble_sensitivity(coef, sweep.d, sweep.h, float(sweep.integral_js), sweep.T)
    neutral, level, norms = diagnostics(sweep, coef)
    return MarchSolution(
        coef=coef,
        sensitivity=sens,
        mean_objective=float(sweep.mean_objective),
        n_unstable=int(n_unstable),
        algorithm=algorithm,
        neutral_defect=neutral,
        level_defect=level,
        max_adjoint_norm=float(norms.max()),
        boundary_norms=norms,
        solves=counter.solves,
        # m^2 per back substitution plus m additions for the right-hand side
        flops=counter.flops + counter.solves * (n_unstable if algorithm == "split" else m),
        spectrum=spec,
    )


@dataclass
class AdjointSamples:
    steps: np.ndarray
    times: np.ndarray
    psi: np.ndarray
    # psi(t_{i-1}) from segment i minus the same point from segment i-1, i = 2..K
    boundary_jumps: np.ndarray
    boundary_values: np.ndarray


def reconstruct_adjoint(system, trajectory, sweep, coef, tableau=RK4, steps=None, objective=None):
    """Rebuild psi = Y_i a_i + v_i by re-running each segment's bundle.

    ``steps`` selects trajectory step indices in [0, N] (default: all).
    """
    if objective is None:
        raise ValueError("objective is required to replay the particular solutions")
    cfg = sweep.config
    sps, K, N = cfg.steps_per_segment, sweep.n_segments, cfg.n_steps
    psi = np.empty((N + 1, system.n))
    left = np.empty((K + 1, system.n))
    for i in range(K, 0, -1):
        res = integrate_adjoint_bundle(
            tableau,
            system,
            trajectory,
            i * sps,
            (i - 1) * sps,
            sweep.Q[i],
            sweep.gamma[i],
            objective,
            quadrature=False,
            keep_path=True,
        )
        seg = np.einsum("tij,j->ti", res.Y_path, coef[i]) + res.v_path
        psi[(i - 1) * sps : i * sps + 1] = seg
        left[i - 1] = seg[0]
    # representation of psi(t_i) from the segment ending there
    right = np.einsum("kij,kj->ki", sweep.Q, coef) + sweep.gamma
    jumps = left[1:K] - right[1:K]
    idx = np.arange(N + 1) if steps is None else np.asarray(steps, dtype=int)
    return AdjointSamples(
        steps=idx,
        times=idx * cfg.dt,
        psi=psi[idx],
        boundary_jumps=jumps,
        boundary_values=right,
    )


def conventional_adjoint(system, objective, trajectory, n_steps, tableau=RK4):
    """Conventional adjoint with psi(T) = 0 integrated back to t = 0; returns psi(0)."""
    U = trajectory.states
    empty = np.zeros(U.shape[1:] + (0,))
    res = integrate_adjoint_bundle(
        tableau, system, trajectory, n_steps, 0, empty, np.zeros(U.shape[1:]), objective, quadrature=False
    )
    return res.v


@dataclass
class EnsembleRun:
    """Primal trajectories, their sweep and one march solution per member."""

    config: MarchConfig
    initial_states: np.ndarray
    trajectory: object
    sweep: SweepResult
    solutions: list

    @property
    def sensitivities(self):
        return np.array([s.sensitivity for s in self.solutions])

    @property
    def exponents(self):
        return np.stack([s.spectrum.exponents for s in self.solutions])

    @property
    def n_unstable(self):
        return np.array([s.n_unstable for s in self.solutions])


def run_march(system, objective, u0, config, tableau=RK4, algorithm="auto", spectrum_only=False):
    """Spin up, integrate, sweep and march every row of ``u0`` (``(B, n)``).

    All members are advanced together as one batch.  With ``spectrum_only``
    the marches are skipped and ``solutions`` carry only the spectrum.
    """
    from .integrators import advance, integrate_primal

    u0 = np.atleast_2d(system.check_state(u0))
    if u0.ndim != 2:
        raise ValueError(f"initial states must have shape (B, n), got {u0.shape}")
    config.validate(system.n)
    u = advance(tableau, system, u0, config.dt, config.n_spinup_initial)
    traj = integrate_primal(tableau, system, u, config.dt, config.n_steps + config.n_spinup_final)
    sweep = backward_sweep(system, objective, traj, config, tableau=tableau)
    sols = []
    for member in sweep.members():
        if spectrum_only:
            spec = spectrum_of(member)
            sols.append(MarchSolution(None, np.nan, float(member.mean_objective), -1, "none", spectrum=spec))
        else:
            sols.append(solve(member, algorithm, config.tol_neutral))
    return EnsembleRun(config, u0, traj, sweep, sols)
