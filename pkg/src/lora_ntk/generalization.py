"""Excess-risk bound for the nuclear-norm regularized linearized model, and a
Monte-Carlo harness that checks it on synthetic tasks with a planted update.

Notation: ``K`` outputs, features bounded by ``|G^(j)(X)|_F <= R``, ``N``
training samples, confidence ``1 - eta``, slack ``eps > 0`` and a loss that
is ``G_loss``-Lipschitz in the outputs (``sqrt(2)`` for cross-entropy).  The
regularization weight and the bound are

    lam   = (2 + eps) sqrt(2K) G_loss R / sqrt(N) * (2 + sqrt(log(1/eta)))
    bound = (2 + eps) lam |delta_true|_*

which for cross-entropy reduces to ``lam = 2 (2 + eps) sqrt(K) R / sqrt(N) * (...)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import BlockShape, LinearizedDataset, LossKind, nuclear_norm, predictions, loss_values
from .optim import TrainConfig, rank_threshold, train
from .prox import solve_global

__all__ = [
    "CE_LIPSCHITZ",
    "BoundSpec",
    "SyntheticTask",
    "lambda_from_bound",
    "excess_risk_bound",
    "perturbation_budget",
    "squared_error_lipschitz",
    "ce_gradient_norms",
    "TrialResult",
    "GapReport",
    "monte_carlo_gap",
    "population_risk",
    "loglog_slope",
]

logger = logging.getLogger(__name__)

CE_LIPSCHITZ = math.sqrt(2.0)


@dataclass(frozen=True)
class BoundSpec:
    K: int
    R: float
    N: int
    eta: float
    eps: float
    nuc_true: float = 1.0
    nuc_lambda: float | None = None
    lipschitz: float = CE_LIPSCHITZ

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ValueError("K and N must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.R <= 0 or self.lipschitz <= 0:
            raise ValueError("R and the Lipschitz constant must be positive")
        if self.eps < 0 or self.nuc_true < 0:
            raise ValueError("eps and nuc_true must be non-negative")

    @property
    def confidence_factor(self) -> float:
        return 2.0 + math.sqrt(math.log(1.0 / self.eta))


def lambda_from_bound(spec: BoundSpec) -> float:
    """Regularization weight that makes the excess-risk bound hold with probability ``1 - eta``."""
    return (
        (2 + spec.eps) * math.sqrt(2 * spec.K) * spec.lipschitz * spec.R / math.sqrt(spec.N) * spec.confidence_factor
    )


def excess_risk_bound(spec: BoundSpec) -> float:
    """Upper bound on ``L(u v^T) - L(delta_true)``: ``(2 + eps) * lam * |delta_true|_*``."""
    return (2 + spec.eps) * lambda_from_bound(spec) * spec.nuc_true


def perturbation_budget(spec: BoundSpec, lam: float | None = None) -> float:
    """Frobenius radius allowed for ``P``: ``eps lam |delta_true|_* / (2 |delta_lam|_*)``.

    Returns ``inf`` when the convex solution is zero (any ``P`` is allowed).
    """
    if lam is None:
        lam = lambda_from_bound(spec)
    if spec.nuc_lambda is None:
        raise ValueError("perturbation_budget needs nuc_lambda (solve the convex problem first)")
    if spec.eps == 0:
        return 0.0
    if spec.nuc_lambda == 0:
        return math.inf
    return spec.eps * lam * spec.nuc_true / (2 * spec.nuc_lambda)


def squared_error_lipschitz(K: int, R: float, radius: float, nuc_true: float, noise_bound: float) -> float:
    """Sup of ``|2 (y_hat - Y)|_2`` over predictors with ``|delta|_* <= radius``.

    Each output coordinate moves by at most ``R |delta - delta_true|_*``, so
    the residual is bounded by ``sqrt(K) (R (radius + nuc_true) + noise_bound)``.
    """
    return 2.0 * math.sqrt(K) * (R * (radius + nuc_true) + noise_bound)


def ce_gradient_norms(logits, labels) -> np.ndarray:
    """``|softmax(z) - onehot(y)|_2`` per row; bounded by ``sqrt(2)``."""
    from scipy.special import softmax

    g = softmax(np.asarray(logits, dtype=float), axis=1)
    g[np.arange(g.shape[0]), labels] -= 1.0
    return np.linalg.norm(g, axis=1)


@dataclass(frozen=True)
class SyntheticTask:
    """Distribution with a planted update ``delta_true``.

    Every feature matrix ``G^(j)(X)`` is a Gaussian block-diagonal matrix
    rescaled to Frobenius norm exactly ``R``.  ``f0 = 0``.  Cross-entropy
    labels are drawn from ``softmax(<G, delta_true>)``; squared-error labels
    are ``<G, delta_true>`` plus Gaussian noise of std ``sigma_y`` clipped at
    ``noise_clip * sigma_y`` (so the loss is Lipschitz on bounded classes).
    In both cases ``delta_true`` minimizes the population risk.
    """

    shape: BlockShape
    K: int
    R: float = 1.0
    nuc_true: float = 1.0
    true_rank: int = 1
    loss: LossKind = LossKind.CROSS_ENTROPY
    sigma_y: float = 0.1
    noise_clip: float = 4.0
    n_pop: int = 10_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if not isinstance(self.shape, BlockShape):
            object.__setattr__(self, "shape", BlockShape(tuple(tuple(b) for b in self.shape)))
        if self.nuc_true <= 0:
            raise ValueError("the planted update must be nonzero")
        if self.loss is LossKind.CROSS_ENTROPY and self.K < 2:
            raise ValueError("cross-entropy needs K >= 2")
        if self.n_pop < 1:
            raise ValueError("n_pop must be positive")

    def _rngs(self):
        s_truth, s_pop, s_train = np.random.SeedSequence(self.seed).spawn(3)
        return s_truth, s_pop, s_train

    @property
    def delta_true(self) -> np.ndarray:
        rng = np.random.default_rng(self._rngs()[0])
        m, n = self.shape.m, self.shape.n
        k = min(self.true_rank, m, n)
        a = np.linalg.qr(rng.standard_normal((m, k)))[0]
        b = np.linalg.qr(rng.standard_normal((n, k)))[0]
        s = rng.uniform(0.5, 1.0, size=k)
        s *= self.nuc_true / s.sum()
        return (a * s) @ b.T

    @property
    def noise_bound(self) -> float:
        return 0.0 if self.loss is LossKind.CROSS_ENTROPY else self.noise_clip * self.sigma_y

    def lipschitz(self, radius: float) -> float:
        if self.loss is LossKind.CROSS_ENTROPY:
            return CE_LIPSCHITZ
        return squared_error_lipschitz(self.K, self.R, radius, self.nuc_true, self.noise_bound)

    def sample(self, n: int, rng) -> LinearizedDataset:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        K = self.K
        feats = [rng.standard_normal((n, K, a, b)) for a, b in self.shape.blocks]
        norms = np.sqrt(sum(np.sum(f**2, axis=(2, 3)) for f in feats))
        feats = [self.R * f / norms[:, :, None, None] for f in feats]
        f0 = np.zeros((n, K))
        clean = LinearizedDataset(self.shape, tuple(feats), f0, self._dummy_labels(n), self.loss)
        z = predictions(clean, self.delta_true)
        if self.loss is LossKind.CROSS_ENTROPY:
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            u = rng.uniform(size=(n, 1))
            labels = np.minimum((u > np.cumsum(p, axis=1)).sum(axis=1), K - 1)
        else:
            noise = np.clip(rng.standard_normal((n, K)), -self.noise_clip, self.noise_clip)
            labels = z + self.sigma_y * noise
        return LinearizedDataset(self.shape, tuple(feats), f0, labels, self.loss)

    def _dummy_labels(self, n):
        if self.loss is LossKind.CROSS_ENTROPY:
            return np.zeros(n, dtype=np.int64)
        return np.zeros((n, self.K))

    def population_set(self) -> LinearizedDataset:
        return self.sample(self.n_pop, np.random.default_rng(self._rngs()[1]))

    def train_rng(self) -> np.random.SeedSequence:
        return self._rngs()[2]


def population_risk(delta, pop: LinearizedDataset) -> tuple:
    """Mean loss and its standard error on a holdout set."""
    vals = loss_values(predictions(pop, delta), pop.labels, pop.loss)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


@dataclass
class TrialResult:
    N: int
    trial: int
    lam: float
    bound: float
    excess: float
    excess_se: float
    nuc_lambda: float
    perturb_eps: float
    converged: bool

    @property
    def violated(self) -> bool:
        return self.excess > self.bound


@dataclass
class GapReport:
    trials: list
    eta: float
    eps: float
    sizes: tuple
    slope: float = float("nan")
    intercept: float = float("nan")
    r_squared: float = float("nan")
    extras: dict = field(default_factory=dict)

    def used(self, N=None) -> list:
        return [t for t in self.trials if t.converged and (N is None or t.N == N)]

    @property
    def excluded(self) -> int:
        return sum(not t.converged for t in self.trials)

    @property
    def violation_rate(self) -> float:
        used = self.used()
        return float(np.mean([t.violated for t in used])) if used else float("nan")

    def violation_threshold(self) -> float:
        n = max(len(self.used(self.sizes[0])), 1)
        return self.eta + 3 * math.sqrt(self.eta * (1 - self.eta) / n)

    def mean_excess(self) -> dict:
        return {N: float(np.mean([t.excess for t in self.used(N)])) for N in self.sizes if self.used(N)}

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "eps": self.eps,
            "sizes": list(self.sizes),
            "violation_rate": self.violation_rate,
            "violation_threshold": self.violation_threshold(),
            "excluded": self.excluded,
            "mean_excess": {str(k): v for k, v in self.mean_excess().items()},
            "slope": self.slope,
            "r_squared": self.r_squared,
            "trials": [t.__dict__ | {"violated": t.violated} for t in self.trials],
            **self.extras,
        }


def loglog_slope(sizes, values) -> tuple:
    """Least-squares fit ``log y = a + b log N``; returns ``(b, a, R^2)``."""
    from scipy.stats import linregress

    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    fit = linregress(x, y)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def _run_trial(task, pop, ref_risk, N, trial, seed_seq, eta, eps, budget_cap, train_template):
    rng = np.random.default_rng(seed_seq)
    data = task.sample(N, rng)
    D = (2 + eps) * task.nuc_true
    spec = BoundSpec(task.K, task.R, N, eta, eps, task.nuc_true, lipschitz=task.lipschitz(D))
    lam = lambda_from_bound(spec)
    ref = solve_global(data, lam)
    spec = replace(spec, nuc_lambda=nuclear_norm(ref.delta))
    budget = min(perturbation_budget(spec, lam), budget_cap)
    m, n = task.shape.m, task.shape.n
    rank = min(rank_threshold(task.K, N), m + n)
    cfg = replace(
        train_template,
        rank=rank,
        lam=lam,
        perturb_eps=budget,
        seed=int(rng.integers(2**31)),
    )
    tr = train(data, cfg)
    excess_vals = loss_values(predictions(pop, tr.factors.delta), pop.labels, pop.loss) - ref_risk
    return TrialResult(
        N=N,
        trial=trial,
        lam=lam,
        bound=excess_risk_bound(spec),
        excess=float(excess_vals.mean()),
        excess_se=float(excess_vals.std(ddof=1) / math.sqrt(len(excess_vals))),
        nuc_lambda=spec.nuc_lambda,
        perturb_eps=budget,
        converged=tr.converged,
    )


def monte_carlo_gap(
    task: SyntheticTask,
    sizes=(25, 100, 400),
    trials: int = 100,
    eta: float = 0.1,
    eps: float = 0.1,
    budget_cap: float = 1e-3,
    train_config: TrainConfig | None = None,
    n_jobs: int = 1,
) -> GapReport:
    """Draw ``trials`` training sets per size, fit at the prescribed ``lam`` and record excess risk.

    Each trial solves the convex problem to get ``|delta_lam|_*``, samples
    ``P`` within the perturbation budget (capped at ``budget_cap``), trains the
    factored model with ``r = rank_threshold(K, N)`` (at most ``m + n``) and
    evaluates ``L(u v^T) - L(delta_true)`` on the task's fixed holdout
    (paired estimate).  Runs that do not converge are excluded and counted.
    """
    if trials < 20:
        raise ValueError("monte_carlo_gap needs at least 20 trials")
    pop = task.population_set()
    ref_vals = loss_values(predictions(pop, task.delta_true), pop.labels, pop.loss)
    template = train_config or TrainConfig(step_size=0.5, epochs=20_000, tol_grad=1e-8)
    seeds = task.train_rng().spawn(len(sizes) * trials)
    jobs = [(N, t, seeds[i * trials + t]) for i, N in enumerate(sizes) for t in range(trials)]
    args = (eta, eps, budget_cap, template)
    if n_jobs == 1:
        results = [_run_trial(task, pop, ref_vals, N, t, s, *args) for N, t, s in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_run_trial)(task, pop, ref_vals, N, t, s, *args) for N, t, s in jobs)
    report = GapReport(results, eta, eps, tuple(sizes))
    if report.excluded:
        logger.warning("%d Monte-Carlo trials did not converge and were excluded", report.excluded)
    means = report.mean_excess()
    if len(means) >= 2 and all(v > 0 for v in means.values()):
        report.slope, report.intercept, report.r_squared = loglog_slope(list(means), list(means.values()))
    return report
