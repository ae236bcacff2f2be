from __future__ import annotations

import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from svoacc.calibration import GridSpec
from svoacc.core import CALIBRATED_PARAMS, ConfigurationError
from svoacc.estimators import IDMCalibrator, SocialACCController
from svoacc.ingest import reference_scenario


@pytest.fixture(scope="module")
def scenario():
    return reference_scenario(duration=6.0)


def test_calibrator_params_round_trip():
    est = IDMCalibrator(n_jobs=2, top_k=3)
    params = est.get_params()
    assert params["n_jobs"] == 2 and params["top_k"] == 3
    twin = clone(est).set_params(top_k=1)
    assert twin.top_k == 1 and est.top_k == 3


def test_calibrator_fit_predict(scenario):
    series = scenario.series()
    truth = CALIBRATED_PARAMS[5]
    grid = GridSpec(a_max=(1.19, 1.7), b=(0.5, 3.0), delta=(2.81, 5.0))
    est = IDMCalibrator(grid=grid).fit(series[3], series[4])
    assert est.best_params_ == truth
    assert est.rmse_ <= 1e-6
    pred = est.predict(series[3], (series[4].speeds[0], series[4].spacings[0]))
    np.testing.assert_allclose(pred, series[4].spacings, atol=1e-6)
    assert est.score(series[3], series[4]) == pytest.approx(0.0, abs=1e-6)


def test_calibrator_unfitted(scenario):
    with pytest.raises(NotFittedError):
        IDMCalibrator().predict(scenario.series()[0], (1.0, 10.0))
    with pytest.raises(TypeError):
        IDMCalibrator().fit(np.zeros(3), np.zeros(3))


def test_controller_fit_predict(scenario):
    est = SocialACCController(hidden_dim=4, seq_len=3, epochs=2, beta=1.0)
    assert est.get_params()["beta"] == 1.0
    est.fit(scenario)
    assert len(est.history_) == 2
    X = np.random.default_rng(0).normal(size=(5, 3, 3))
    a0 = est.predict(X, phi=0.0)
    a1 = est.predict(X, phi=math.pi / 2)
    assert a0.shape == (5,)
    assert np.all(np.abs(a0) < 3.0) and np.all(np.abs(a1) < 3.0)
    assert est.predict(X[0], 0.0)[0] == a0[0]
    with pytest.raises(ConfigurationError):
        est.predict(np.zeros((2, 4, 3)))
    r = est.rollout(math.pi / 4)
    assert r.n_vehicles == 5


def test_controller_unfitted():
    with pytest.raises(NotFittedError):
        SocialACCController().predict(np.zeros((1, 10, 3)))
