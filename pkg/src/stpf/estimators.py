"""Estimator-style wrappers around the functional filters.

``fit(Y)`` runs the filter over the observation matrix ``Y`` (one row per
time step) and stores the trace; ``transform(Y)`` returns the filtered means
``E[X_n | Y_{1:n}]`` row by row; ``score(Y)`` is the log normalizing-constant
(marginal likelihood) estimate.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from stpf.baselines import block_pf_run, bootstrap_pf_run
from stpf.core import FilterConfig, run
from stpf.marginal import MutationConfig, run_marginal
from stpf.models import StateSpaceModel


class _FilterEstimator(TransformerMixin, BaseEstimator):
    def _check_model(self):
        if not isinstance(self.model, StateSpaceModel):
            raise TypeError(f"model must be a StateSpaceModel, got {type(self.model).__name__}")
        return self.model

    def _check_obs(self, Y, model):
        Y = check_array(Y, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=1)
        if Y.shape[1] != model.obs_dim:
            raise ValueError(f"Y has {Y.shape[1]} columns, model expects {model.obs_dim}")
        return Y

    def _config(self, N, M):
        return FilterConfig(
            n_islands=N,
            n_local=M,
            ess_threshold=self.ess_threshold,
            variant=getattr(self, "variant", "double_average"),
            coordinate=self.coordinate,
        )

    def _run(self, Y):
        raise NotImplementedError

    def fit(self, Y, y=None):
        model = self._check_model()
        Y = self._check_obs(Y, model)
        self.trace_ = self._run(model, Y)
        self.log_nc_ = float(self.trace_.log_nc[-1])
        self.filter_means_ = self.trace_.means
        self.n_features_in_ = Y.shape[1]
        return self

    def transform(self, Y):
        check_is_fitted(self, "trace_")
        model = self._check_model()
        return self._run(model, self._check_obs(Y, model)).means

    def fit_transform(self, Y, y=None):
        return self.fit(Y).filter_means_

    def score(self, Y, y=None):
        check_is_fitted(self, "trace_")
        model = self._check_model()
        return float(self._run(model, self._check_obs(Y, model)).log_nc[-1])


class SpaceTimeParticleFilter(_FilterEstimator):
    """Island filter with ``n_islands`` systems of ``n_local`` particles."""

    def __init__(self, model=None, n_islands=100, n_local=20, ess_threshold=0.5, variant="double_average",
                 coordinate=0, random_state=0):
        self.model = model
        self.n_islands = n_islands
        self.n_local = n_local
        self.ess_threshold = ess_threshold
        self.variant = variant
        self.coordinate = coordinate
        self.random_state = random_state

    def _run(self, model, Y):
        return run(model, Y, self._config(self.n_islands, self.n_local), self.random_state)


class MarginalSpaceTimeParticleFilter(SpaceTimeParticleFilter):
    """Space-time filter with random-walk Metropolis mutations of partial paths."""

    def __init__(self, model=None, n_islands=1, n_local=100, ess_threshold=0.5, variant="double_average",
                 coordinate=0, random_state=0, scale=0.5, sweeps=1, mode="coordinate"):
        super().__init__(model, n_islands, n_local, ess_threshold, variant, coordinate, random_state)
        self.scale = scale
        self.sweeps = sweeps
        self.mode = mode

    def _run(self, model, Y):
        mcfg = MutationConfig(scale=self.scale, sweeps=self.sweeps, mode=self.mode)
        return run_marginal(model, Y, self._config(self.n_islands, self.n_local), self.random_state, mcfg)

    def fit(self, Y, y=None):
        super().fit(Y)
        self.acceptance_rate_ = self.trace_.acceptance_by_space
        return self


class BootstrapParticleFilter(_FilterEstimator):
    def __init__(self, model=None, n_particles=2000, ess_threshold=0.5, coordinate=0, random_state=0):
        self.model = model
        self.n_particles = n_particles
        self.ess_threshold = ess_threshold
        self.coordinate = coordinate
        self.random_state = random_state

    def _run(self, model, Y):
        return bootstrap_pf_run(model, Y, self.n_particles, self._config(1, 1), self.random_state)


class BlockParticleFilter(_FilterEstimator):
    """Block filter on a lattice model with square ``block_size`` blocks."""

    def __init__(self, model=None, n_particles=900, block_size=2, ess_threshold=0.5, coordinate=0, random_state=0):
        self.model = model
        self.n_particles = n_particles
        self.block_size = block_size
        self.ess_threshold = ess_threshold
        self.coordinate = coordinate
        self.random_state = random_state

    def _run(self, model, Y):
        return block_pf_run(model, Y, self.n_particles, self.block_size, self._config(1, 1), self.random_state)
