"""Scikit-learn style front end for the interaction-graph classifier.

`BehaviorClassifier` follows the usual estimator conventions: constructor
arguments are hyperparameters stored verbatim (so `get_params`,
`set_params`, and `clone` work), `fit` consumes a list of `Scenario`
values, and fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError
from .model import ModelConfig, ModelParams, TrainConfig, forward, train
from .scenario import Scenario


def check_scenario_list(X) -> list[Scenario]:
    """Validate a scenario collection: nonempty, all scenarios, one width."""
    scenarios = list(X)
    if not scenarios:
        raise ConfigError("expected at least one scenario")
    for i, s in enumerate(scenarios):
        if not isinstance(s, Scenario):
            raise ConfigError(f"X[{i}] is {type(s).__name__}, expected Scenario")
    widths = {s.feature_dim for s in scenarios}
    if len(widths) > 1:
        raise ConfigError(f"scenarios disagree on feature width: {sorted(widths)}")
    return scenarios


def infer_class_names(labels) -> tuple[str, ...]:
    """Go/Stop keeps the fixed `(Go, Stop)` index convention; anything else
    is ordered lexicographically."""
    unique = set(labels)
    if unique == {"Go", "Stop"}:
        return ("Go", "Stop")
    if len(unique) < 2:
        raise ConfigError(f"need at least two classes to train, got labels {sorted(unique)}")
    return tuple(sorted(unique))


class BehaviorClassifier(BaseEstimator, ClassifierMixin):
    """Driving-behavior classifier over egocentric interaction graphs.

    Parameters mirror the model and optimizer configuration; see
    `ModelConfig` and `TrainConfig` for semantics. `fit` takes a list of
    scenarios and optionally a label list overriding the stored labels.
    """

    def __init__(
        self,
        hidden_dim: int = 16,
        num_layers: int = 3,
        tau: int = 3,
        embed_dim: int = 256,
        pos_dim: int = 5,
        fourier_dim: int = 30,
        sigma: float = 10.0,
        mu: float = 3.0,
        normalization: str = "batch",
        learning_rate: float = 0.001,
        epochs: int = 50,
        batch_size: int = 8,
        seed: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.tau = tau
        self.embed_dim = embed_dim
        self.pos_dim = pos_dim
        self.fourier_dim = fourier_dim
        self.sigma = sigma
        self.mu = mu
        self.normalization = normalization
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        scenarios = check_scenario_list(X)
        if y is not None:
            labels = [str(label) for label in y]
            if len(labels) != len(scenarios):
                raise ConfigError(f"got {len(scenarios)} scenarios but {len(labels)} labels")
            scenarios = [replace(s, label=label) for s, label in zip(scenarios, labels)]
        else:
            labels = [s.label for s in scenarios]
        class_names = infer_class_names(labels)
        model_config = ModelConfig(
            num_classes=len(class_names),
            class_names=class_names,
            feature_dim=scenarios[0].feature_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            tau=self.tau,
            embed_dim=self.embed_dim,
            pos_dim=self.pos_dim,
            fourier_dim=self.fourier_dim,
            sigma=self.sigma,
            mu=self.mu,
            normalization=self.normalization,
        )
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        self.model_, _, self.history_ = train(scenarios, model_config, train_config)
        self.classes_ = np.asarray(class_names)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        scenarios = check_scenario_list(X)
        return np.stack([forward(s, self.model_, mode="eval") for s in scenarios])

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    @property
    def params_(self) -> ModelParams:
        check_is_fitted(self, "model_")
        return self.model_
