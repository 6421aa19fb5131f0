"""scikit-learn style wrapper around a trained flow stack."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .flow import log_density, stack_forward, stack_inverse
from .training.config import TrainConfig
from .training.datasets import Dataset
from .training.loop import build_stack, train

__all__ = ["CPFlowDensity"]


class CPFlowDensity(TransformerMixin, BaseEstimator):
    """Density estimator backed by a stack of convex potential flows.

    ``transform`` maps data to the standard-normal base space and
    ``inverse_transform`` maps back. ``score_samples`` returns per-sample
    log-densities in nats.

    Parameters
    ----------
    n_flows, n_hidden_layers, n_hidden_units : int
        Stack depth and size of each input-convex potential.
    augmented : bool
        Give half of each hidden layer a direct path from the input.
    activation_first, activation_rest : str
        Activation specs such as ``"gaussian+symmetrized@gain=1"``.
    actnorm : bool
        Insert a data-initialized affine normalization before each block.
    learning_rate, batch_size, epochs, lr_schedule
        Adam settings.
    cg_atol : float
        Conjugate-gradient tolerance of the log-det gradient estimator.
    logdet : {"exact", "slq"}
        Log-determinant used by ``score_samples``.
    random_state : int
        Seed for initialization, shuffling and probes.

    Attributes
    ----------
    stack_ : FlowStack
    history_ : History
    n_features_in_ : int
    """

    def __init__(
        self,
        n_flows=3,
        n_hidden_layers=3,
        n_hidden_units=32,
        augmented=True,
        activation_first="gaussian+symmetrized@gain=1",
        activation_rest="gaussian+plain@gain=1",
        actnorm=True,
        learning_rate=0.005,
        batch_size=128,
        epochs=50,
        lr_schedule="constant",
        cg_atol=1e-3,
        logdet="exact",
        random_state=0,
    ):
        self.n_flows = n_flows
        self.n_hidden_layers = n_hidden_layers
        self.n_hidden_units = n_hidden_units
        self.augmented = augmented
        self.activation_first = activation_first
        self.activation_rest = activation_rest
        self.actnorm = actnorm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_schedule = lr_schedule
        self.cg_atol = cg_atol
        self.logdet = logdet
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_flows=self.n_flows,
            n_hidden_layers=self.n_hidden_layers,
            n_hidden_units=self.n_hidden_units,
            augmented=self.augmented,
            activation_first=self.activation_first,
            activation_rest=self.activation_rest,
            actnorm=self.actnorm,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_schedule=self.lr_schedule,
            cg_atol=self.cg_atol,
            seed=int(self.random_state),
            log_every=10**9,
            val_max=1000,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if self.logdet not in ("exact", "slq"):
            raise ValueError(f"logdet must be 'exact' or 'slq', got {self.logdet!r}")
        config = self._train_config()
        dataset = Dataset("array", X, splits=(1.0, 0.0, 0.0), seed=config.seed)
        stack = build_stack(config, X.shape[1])
        self.stack_, self.history_, _ = train(stack, dataset, config)
        self.n_features_in_ = X.shape[1]
        return self

    def _validate(self, X):
        check_is_fitted(self, "stack_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but the model was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._validate(X)
        return stack_forward(self.stack_, X)

    def inverse_transform(self, X):
        X = self._validate(X)
        return stack_inverse(self.stack_, X)[0]

    def score_samples(self, X):
        X = self._validate(X)
        return log_density(self.stack_, X, mode=self.logdet, seed=int(self.random_state)).logp

    def score(self, X, y=None):
        """Mean log-likelihood of ``X``."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "stack_")
        rng = np.random.default_rng(random_state)
        z = rng.standard_normal((n_samples, self.n_features_in_))
        if n_samples == 0:
            return z
        return stack_inverse(self.stack_, z)[0]
