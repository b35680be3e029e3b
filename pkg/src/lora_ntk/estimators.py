"""scikit-learn style wrappers around the factored trainer and the convex solver.

The "X" argument is a :class:`LinearizedDataset` (or a path to an LNTK1
file); labels live inside it, so ``y`` is ignored.  ``score`` returns the
negative regularized risk so that larger is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import LoraFactors, predictions, regularized_risk
from .optim import TrainConfig, train
from .prox import ProxConfig, _initial_step, prox_gradient
from .validation import check_dataset, check_positive

__all__ = ["LoRAEstimator", "NuclearNormEstimator"]


class _UpdateMixin:
    def predict(self, X) -> np.ndarray:
        """Linearized outputs ``f0 + <G, delta>`` as an ``(N, K)`` array."""
        check_is_fitted(self, "delta_")
        return predictions(check_dataset(X), self.delta_)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "delta_")
        return -regularized_risk(self.delta_, check_dataset(X), self.lam)


class LoRAEstimator(_UpdateMixin, BaseEstimator):
    def __init__(
        self,
        rank=2,
        lam=0.01,
        step_size=1e-3,
        epochs=1000,
        batch_size=None,
        init="lora",
        sigma_init=1e-2,
        noise_std=0.0,
        perturb_eps=0.0,
        tol_grad=1e-6,
        seed=0,
    ):
        self.rank = rank
        self.lam = lam
        self.step_size = step_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.init = init
        self.sigma_init = sigma_init
        self.noise_std = noise_std
        self.perturb_eps = perturb_eps
        self.tol_grad = tol_grad
        self.seed = seed

    def fit(self, X, y=None, init: LoraFactors | None = None):
        data = check_dataset(X)
        check_positive("step_size", self.step_size)
        cfg = TrainConfig(**self.get_params())
        self.trace_ = train(data, cfg, init=init)
        self.factors_ = self.trace_.factors
        self.delta_ = self.factors_.delta
        self.perturbation_ = self.trace_.perturbation
        self.n_iter_ = self.trace_.final.epoch
        self.converged_ = self.trace_.converged
        return self


class NuclearNormEstimator(_UpdateMixin, BaseEstimator):
    """Convex fit by proximal gradient; ``step_size=None`` uses ``1 / L``."""

    def __init__(self, lam=0.01, step_size=None, max_iter=50_000, tol=1e-10):
        self.lam = lam
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        data = check_dataset(X)
        alpha = _initial_step(data) if self.step_size is None else check_positive("step_size", self.step_size)
        res = prox_gradient(data, ProxConfig(lam=self.lam, step_size=alpha, max_iter=self.max_iter, tol=self.tol))
        self.result_ = res
        self.delta_ = res.delta
        self.objective_ = res.objective
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self
