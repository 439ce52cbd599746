"""Scikit-learn style front end to the march.

``X`` is always an ensemble of initial conditions, one row per trajectory.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .dynamics import default_objective, make_system
from .integrators import TABLEAUX
from .shadowing import MarchConfig, run_march
from .validation import check_choice, check_count, check_initial_states, check_positive


class _MarchParams(BaseEstimator):
    def __init__(
        self,
        system="lorenz63",
        system_params=None,
        T=20.0,
        segment_length=0.2,
        dt=0.01,
        n_modes=1,
        spinup_initial=50.0,
        spinup_final=20.0,
        tol_neutral=None,
        integrator="rk4",
        algorithm="auto",
        n_trajectories=1,
        random_state=None,
    ):
        self.system = system
        self.system_params = system_params
        self.T = T
        self.segment_length = segment_length
        self.dt = dt
        self.n_modes = n_modes
        self.spinup_initial = spinup_initial
        self.spinup_final = spinup_final
        self.tol_neutral = tol_neutral
        self.integrator = integrator
        self.algorithm = algorithm
        self.n_trajectories = n_trajectories
        self.random_state = random_state

    def _setup(self):
        check_choice(self.integrator, "integrator", TABLEAUX)
        check_choice(self.algorithm, "algorithm", {"auto", "exact", "split"})
        for name in ("T", "segment_length", "dt"):
            check_positive(getattr(self, name), name)
        for name in ("spinup_initial", "spinup_final"):
            check_positive(getattr(self, name), name, allow_zero=True)
        check_count(self.n_modes, "n_modes")
        if self.tol_neutral is not None:
            check_positive(self.tol_neutral, "tol_neutral", allow_zero=True)
        system = make_system(self.system, **(self.system_params or {}))
        rng = check_random_state(self.random_state)
        config = MarchConfig(
            T=self.T,
            segment_length=self.segment_length,
            dt=self.dt,
            n_modes=self.n_modes,
            spinup_initial=self.spinup_initial,
            spinup_final=self.spinup_final,
            tol_neutral=self.tol_neutral,
            seed=int(rng.randint(2**31 - 1)),
        ).validate(system.n)
        return system, config, rng

    def _initial_states(self, X, system, rng):
        if X is None:
            check_count(self.n_trajectories, "n_trajectories")
            return system.sample_initial(np.random.default_rng(rng.randint(2**31 - 1)), self.n_trajectories)
        return check_initial_states(X, system.n)


class StabilizedMarch(_MarchParams):
    """Ensemble sensitivity dJbar/ds by adjoint shadowing.

    ``fit(X)`` runs one trajectory per row of ``X`` (or ``n_trajectories``
    random ones when ``X`` is None) and stores the ensemble statistics.

    Fitted attributes
    -----------------
    sensitivities_ : per-trajectory dJbar/ds
    sensitivity_, sensitivity_stderr_ : ensemble mean and its standard error
    mean_objective_ : per-trajectory Jbar
    lyapunov_exponents_ : ``(n_samples, n_modes)``
    n_unstable_ : per-trajectory unstable dimension
    neutral_defect_, level_defect_, adjoint_norm_max_ : diagnostics
    coef_ : list of ``(K + 1, n_modes)`` coefficient arrays
    """

    def fit(self, X=None, y=None):
        system, config, rng = self._setup()
        U0 = self._initial_states(X, system, rng)
        run = run_march(
            system, default_objective(system), U0, config, TABLEAUX[self.integrator], self.algorithm
        )
        sols = run.solutions
        self.system_ = system
        self.config_ = config
        self.run_ = run
        self.n_features_in_ = system.n
        self.sensitivities_ = run.sensitivities
        self.sensitivity_ = float(self.sensitivities_.mean())
        k = self.sensitivities_.size
        self.sensitivity_stderr_ = float(self.sensitivities_.std(ddof=1) / np.sqrt(k)) if k > 1 else np.nan
        self.mean_objective_ = np.array([s.mean_objective for s in sols])
        self.lyapunov_exponents_ = run.exponents
        self.n_unstable_ = run.n_unstable
        self.neutral_defect_ = np.array([s.neutral_defect for s in sols])
        self.level_defect_ = np.array([s.level_defect for s in sols])
        self.adjoint_norm_max_ = np.array([s.max_adjoint_norm for s in sols])
        self.coef_ = [s.coef for s in sols]
        return self

    def predict(self, X):
        """Per-trajectory sensitivities for new initial conditions."""
        check_is_fitted(self, "sensitivities_")
        X = check_initial_states(X, self.n_features_in_)
        objective = default_objective(self.system_)
        run = run_march(self.system_, objective, X, self.config_, TABLEAUX[self.integrator], self.algorithm)
        return run.sensitivities


class LyapunovTransformer(TransformerMixin, _MarchParams):
    """Maps initial conditions to finite-time Lyapunov exponents of the adjoint."""

    def fit(self, X=None, y=None):
        system, config, _ = self._setup()
        self.system_ = system
        self.config_ = config
        self.n_features_in_ = system.n
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_initial_states(X, self.n_features_in_)
        run = run_march(
            self.system_,
            default_objective(self.system_),
            X,
            self.config_,
            TABLEAUX[self.integrator],
            spectrum_only=True,
        )
        return run.exponents
