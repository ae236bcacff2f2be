"""scikit-learn style wrappers around calibration and controller training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .calibration import GridSpec, grid_search_calibrate, simulate_follower
from .controller import ObservationWindow, predict_accel
from .core import DEFAULT_DT, DEFAULT_MIN_SPACING, DEFAULT_VEHICLE_LENGTH, ConfigurationError, SimConfig, TrajectorySeries
from .training import DEFAULT_PHI_SET, LossWeights, TrainConfig, rollout_controller, train


class IDMCalibrator(BaseEstimator):
    """Grid-search IDM fit of one follower to its recorded spacing.

    ``fit(lead, follower)`` takes two time-aligned :class:`TrajectorySeries`;
    ``predict(lead, initial_state)`` simulates the fitted follower.
    """

    def __init__(self, grid=None, dt=DEFAULT_DT, vehicle_length=DEFAULT_VEHICLE_LENGTH,
                 min_spacing_floor=DEFAULT_MIN_SPACING, n_jobs=1, top_k=5):
        self.grid = grid
        self.dt = dt
        self.vehicle_length = vehicle_length
        self.min_spacing_floor = min_spacing_floor
        self.n_jobs = n_jobs
        self.top_k = top_k

    def _sim_config(self):
        return SimConfig(dt=self.dt, vehicle_length=self.vehicle_length,
                         min_spacing_floor=self.min_spacing_floor)

    def fit(self, lead: TrajectorySeries, follower: TrajectorySeries):
        if not isinstance(lead, TrajectorySeries) or not isinstance(follower, TrajectorySeries):
            raise TypeError("fit expects two TrajectorySeries")
        grid = self.grid if self.grid is not None else GridSpec()
        self.report_ = grid_search_calibrate(grid, lead, follower, self._sim_config(),
                                             n_jobs=self.n_jobs, top_k=self.top_k)
        self.best_params_ = self.report_.best_params
        self.rmse_ = self.report_.rmse
        return self

    def predict(self, lead: TrajectorySeries, initial_state) -> np.ndarray:
        check_is_fitted(self, "best_params_")
        return simulate_follower(self.best_params_, lead, initial_state, self._sim_config())

    def score(self, lead: TrajectorySeries, follower: TrajectorySeries) -> float:
        """Negative spacing RMSE (higher is better)."""
        pred = self.predict(lead, (follower.speeds[0], follower.spacings[0]))
        return -float(np.sqrt(np.mean((pred - np.asarray(follower.spacings)) ** 2)))


class SocialACCController(BaseEstimator):
    """SVO-conditioned acceleration policy trained on a platoon scenario.

    ``fit(scenario)`` trains jointly over ``phi_set``. ``predict(X, phi)``
    maps observation windows of shape ``(n, seq_len, 3)`` to accelerations.
    """

    def __init__(self, hidden_dim=32, seq_len=10, a_lim=3.0, epochs=200, lr=0.02, seed=0,
                 alpha=None, beta=None, gamma=None, phi_set=DEFAULT_PHI_SET, optimizer="adam",
                 trend_mode="hinge"):
        self.hidden_dim = hidden_dim
        self.seq_len = seq_len
        self.a_lim = a_lim
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.phi_set = phi_set
        self.optimizer = optimizer
        self.trend_mode = trend_mode

    def _weights(self):
        d = LossWeights()
        return LossWeights(d.alpha if self.alpha is None else self.alpha,
                           d.beta if self.beta is None else self.beta,
                           d.gamma if self.gamma is None else self.gamma)

    def fit(self, scenario, y=None):
        cfg = TrainConfig(scenario, epochs=self.epochs, lr=self.lr, seed=self.seed,
                          phi_set=tuple(self.phi_set), hidden_dim=self.hidden_dim,
                          seq_len=self.seq_len, a_lim=self.a_lim, optimizer=self.optimizer,
                          trend_mode=self.trend_mode)
        self.params_, self.history_ = train(cfg, self._weights())
        self.scenario_ = scenario
        return self

    def predict(self, X, phi=0.0) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, ensure_2d=False)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != (self.params_.seq_len, 3):
            raise ConfigurationError(f"expected windows of shape (n, {self.params_.seq_len}, 3), got {X.shape}")
        return np.array([predict_accel(self.params_, ObservationWindow(w), phi) for w in X])

    def rollout(self, phi, scenario=None):
        check_is_fitted(self, "params_")
        return rollout_controller(self.params_, scenario if scenario is not None else self.scenario_, phi)
