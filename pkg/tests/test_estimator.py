import numpy as np
import pytest
from sklearn.base import clone

from shadowmarch.estimator import LyapunovTransformer, StabilizedMarch
from shadowmarch.exceptions import ConfigError, DimensionError

SMALL = dict(T=4.0, segment_length=0.2, dt=0.01, spinup_initial=10.0, spinup_final=4.0)


def test_params_roundtrip_and_clone():
    est = StabilizedMarch(n_modes=2, random_state=3, **SMALL)
    params = est.get_params()
    assert params["n_modes"] == 2 and params["system"] == "lorenz63"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "sensitivities_")


def test_fit_predict():
    est = StabilizedMarch(n_trajectories=3, random_state=0, **SMALL).fit()
    assert est.sensitivities_.shape == (3,)
    assert est.n_features_in_ == 3
    assert np.isfinite(est.sensitivity_) and est.sensitivity_stderr_ > 0
    assert len(est.coef_) == 3 and est.coef_[0].shape == (est.config_.n_segments + 1, 1)
    X = np.random.default_rng(1).uniform(-1, 1, (2, 3)) + [0, 0, 25]
    assert est.predict(X).shape == (2,)


def test_fit_is_deterministic():
    a = StabilizedMarch(n_trajectories=2, random_state=5, **SMALL).fit().sensitivities_
    b = StabilizedMarch(n_trajectories=2, random_state=5, **SMALL).fit().sensitivities_
    assert np.array_equal(a, b)


def test_transformer_returns_exponents():
    X = np.array([[1.0, 1.0, 20.0], [-2.0, 0.5, 25.0]])
    Z = LyapunovTransformer(n_modes=3, **SMALL).fit_transform(X)
    assert Z.shape == (2, 3)
    assert np.all(Z[:, 0] > Z[:, 2])


@pytest.mark.parametrize(
    "kwargs",
    [dict(dt=-0.01), dict(n_modes=0), dict(integrator="euler"), dict(algorithm="fast"), dict(system="pendulum")],
)
def test_invalid_params(kwargs):
    with pytest.raises(ConfigError):
        StabilizedMarch(**{**SMALL, **kwargs}).fit()


def test_wrong_feature_count():
    with pytest.raises(DimensionError):
        StabilizedMarch(**SMALL).fit(np.ones((2, 4)))
