"""scikit-learn style wrapper around a Euclidean flow map.

>>> import numpy as np
>>> from idflow.estimator import IDFlowGenerator
>>> X = np.random.default_rng(0).normal(size=(200, 2)) + 3.0
>>> gen = IDFlowGenerator(steps=50, random_state=0).fit(X)
>>> gen.sample(5).shape
(5, 2)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidArgumentError
from .flow import PathConfig, TrainConfig, cfm_loss, sample_path, train
from .nn import FlowModel, NetConfig
from .sampler import SampleConfig, predictor_refiner_sample


class IDFlowGenerator(BaseEstimator):
    """Generative model of tabular data trained with idempotent flow matching.

    Parameters
    ----------
    hidden_dims : tuple of int
        Hidden layer widths of the flow-map network.
    activation : {"silu", "tanh"}
    time_embed_dim : int
        Even number of sinusoidal time features.
    k_max : int
        Largest refinement count drawn during training.
    refine_branch_prob : float
        Probability that a step minimizes the refinement loss. ``0`` trains a
        plain flow-matching baseline.
    steps, batch_size, lr, lr_schedule
        Optimizer settings (Adam).
    sigma, sigma_mode
        Noise of the conditional path.
    sample_steps : int
        Euler grid size ``T`` used by :meth:`transform` and :meth:`sample`.
    refinements : int
        Refinements per step at sampling time.
    final_completion : bool
        Jump to the last prediction after the final Euler update.
    standardize : bool
        Fit on z-scored features and map samples back.
    random_state : int, RandomState or None

    Attributes
    ----------
    model_ : FlowModel
    history_ : TrainHistory
    n_features_in_ : int
    mean_, scale_ : ndarray
        Feature standardization (zeros and ones when ``standardize=False``).
    """

    def __init__(
        self,
        hidden_dims=(64, 64),
        activation="silu",
        time_embed_dim=8,
        k_max=2,
        refine_branch_prob=0.5,
        steps=1000,
        batch_size=64,
        lr=1e-3,
        lr_schedule="constant",
        sigma=0.5,
        sigma_mode="constant",
        sample_steps=20,
        refinements=1,
        final_completion=True,
        standardize=False,
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.time_embed_dim = time_embed_dim
        self.k_max = k_max
        self.refine_branch_prob = refine_branch_prob
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.sigma = sigma
        self.sigma_mode = sigma_mode
        self.sample_steps = sample_steps
        self.refinements = refinements
        self.final_completion = final_completion
        self.standardize = standardize
        self.random_state = random_state

    # -- configuration ---------------------------------------------------------

    def _seed(self) -> int:
        return int(check_random_state(self.random_state).randint(2**31 - 1))

    def _configs(self, n_features: int):
        net = NetConfig(
            head="euclidean",
            dim=n_features,
            hidden_dims=tuple(self.hidden_dims),
            time_embed_dim=self.time_embed_dim,
            activation=self.activation,
        )
        seed = self._seed()
        train_cfg = TrainConfig(
            k_max=self.k_max,
            refine_branch_prob=self.refine_branch_prob,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            seed=seed,
        )
        return net, train_cfg, PathConfig(sigma_mode=self.sigma_mode, sigma=self.sigma), seed

    def _sample_config(self) -> SampleConfig:
        return SampleConfig(steps=self.sample_steps, refinements=self.refinements, final_completion=self.final_completion)

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"X has {X.shape[1]} features, the generator was fitted on {self.n_features_in_}")
        return X

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y=None):
        """Train on the rows of ``X`` (minibatches drawn with replacement)."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        Z = (X - self.mean_) / self.scale_
        net, train_cfg, path_cfg, seed = self._configs(X.shape[1])
        self._sample_config()  # validate sampler settings before training
        model = FlowModel(net, seed=seed)
        d = X.shape[1]
        self.model_, self.history_ = train(
            model,
            lambda rng, b: rng.standard_normal((b, d)),
            lambda rng, b: Z[rng.integers(0, len(Z), size=b)],
            train_cfg,
            path_cfg,
        )
        self.seed_ = seed
        return self

    def transform(self, X0):
        """Push source points ``X0`` (standard-normal space) through the sampler."""
        check_is_fitted(self, "model_")
        X0 = self._check_X(X0)
        Z, _ = predictor_refiner_sample(self.model_, X0, self._sample_config())
        return Z * self.scale_ + self.mean_

    def sample(self, n_samples: int = 1, random_state=None):
        """Draw ``n_samples`` new points; ``random_state`` picks the source draws."""
        check_is_fitted(self, "model_")
        if int(n_samples) < 1:
            raise InvalidArgumentError("n_samples must be >= 1")
        rng = np.random.default_rng([self.seed_, 1] if random_state is None else random_state)
        return self.transform(rng.standard_normal((int(n_samples), self.n_features_in_)))

    def score(self, X, y=None) -> float:
        """Negative flow-matching loss on ``X`` with seeded source draws and times."""
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        Z = (X - self.mean_) / self.scale_
        rng = np.random.default_rng([self.seed_, 4])
        x0 = rng.standard_normal(Z.shape)
        batch = sample_path(x0, Z, rng.uniform(size=len(Z)), PathConfig(sigma_mode=self.sigma_mode, sigma=self.sigma), rng)
        return -cfm_loss(self.model_, batch)
