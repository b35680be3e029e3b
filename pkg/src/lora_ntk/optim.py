"""(S)GD training of LoRA factors on the perturbed factored objective."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    FactoredObjective,
    LinearizedDataset,
    LoraFactors,
    PsdPerturbation,
    grad_factored,
    nuclear_norm,
)

__all__ = [
    "InitScheme",
    "TrainConfig",
    "EpochRecord",
    "TrainTrace",
    "sample_psd_perturbation",
    "init_factors",
    "train",
    "rank_threshold",
]

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
_ROUND = 64 * np.finfo(float).eps


class InitScheme(str, enum.Enum):
    # u = 0, v Gaussian: the adapter starts at delta = 0
    LORA = "lora"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :func:`train`.

    ``batch_size=None`` means full batch.  With ``backtrack`` (full batch, no
    gradient noise) a step that would increase the objective is retried with
    half the step size, and the reduced step size is kept.  Increases within
    rounding error of the objective (relative ``64 * machine eps``) are
    accepted.
    """

    rank: int = 2
    lam: float = 0.01
    step_size: float = 1e-3
    epochs: int = 1000
    batch_size: int | None = None
    init: InitScheme = InitScheme.LORA
    sigma_init: float = 1e-2
    noise_std: float = 0.0
    seed: int = 0
    perturb_eps: float = 0.0
    tol_grad: float = 1e-6
    backtrack: bool = True

    def __post_init__(self):
        object.__setattr__(self, "init", InitScheme(self.init))
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sigma_init < 0 or self.noise_std < 0 or self.perturb_eps < 0:
            raise ValueError("sigma_init, noise_std and perturb_eps must be non-negative")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    factored_risk: float
    regularized_risk: float
    grad_norm: float


@dataclass
class TrainTrace:
    records: list
    factors: LoraFactors
    perturbation: PsdPerturbation
    seed: int
    status: str
    step_size: float
    config: TrainConfig = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def as_array(self) -> np.ndarray:
        return np.array(
            [(r.epoch, r.factored_risk, r.regularized_risk, r.grad_norm) for r in self.records]
        )


def _streams(seed: int):
    """Independent generators for the perturbation, the init and the batches/noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def sample_psd_perturbation(dim: int, eps: float, seed=None) -> PsdPerturbation:
    """Random PSD ``P`` with ``|P|_F = eps * theta < eps``, ``theta ~ U(0, 1)``.

    The direction is ``A A^T / |A A^T|_F`` with ``A`` a square standard
    Gaussian matrix (almost surely full rank); together with the continuous
    radius the law has a density on the PSD cone.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    P0 = A @ A.T
    theta = rng.uniform()
    while theta == 0.0:
        theta = rng.uniform()
    P = (eps * theta / np.linalg.norm(P0)) * P0
    P = 0.5 * (P + P.T)
    return PsdPerturbation(P, eps)


def init_factors(config: TrainConfig, shape, seed=None) -> LoraFactors:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        config.seed if seed is None else seed
    )
    m, n, r = shape.m, shape.n, config.rank
    v = config.sigma_init * rng.standard_normal((n, r))
    if config.init is InitScheme.LORA:
        u = np.zeros((m, r))
    else:
        u = config.sigma_init * rng.standard_normal((m, r))
    return LoraFactors(u, v)


def rank_threshold(K: int, N: int) -> int:
    """Smallest integer ``r`` with ``r (r + 1) / 2 > K N``."""
    if K < 1 or N < 1:
        raise ValueError("K and N must be positive")
    kn = K * N
    r = max(1, math.isqrt(2 * kn) - 1)
    while r * (r + 1) // 2 <= kn:
        r += 1
    return r


def _grad_norm(gu, gv) -> float:
    return float(np.sqrt(np.sum(gu**2) + np.sum(gv**2)))


def train(
    data: LinearizedDataset,
    config: TrainConfig,
    perturbation: PsdPerturbation | None = None,
    init: LoraFactors | None = None,
) -> TrainTrace:
    """Run (S)GD on the factored objective and record one entry per epoch.

    The perturbation is sampled from ``config.seed`` when
    ``config.perturb_eps > 0`` unless one is passed explicitly.  Stops early
    once the full-batch gradient norm drops below ``config.tol_grad``.
    Divergence (non-finite or huge risk) ends the run with status
    ``"diverged"`` instead of raising.
    """
    N = data.n_samples
    batch = N if config.batch_size is None else min(config.batch_size, N)
    full_batch = batch == N
    dim = data.shape.m + data.shape.n
    rng_p, rng_init, rng_run = _streams(config.seed)

    if perturbation is None:
        if config.perturb_eps > 0:
            perturbation = sample_psd_perturbation(dim, config.perturb_eps, rng_p)
        else:
            perturbation = PsdPerturbation.zero(dim)
    P = perturbation
    lam = config.lam
    f = init if init is not None else init_factors(config, data.shape, rng_init)
    if f.rank != config.rank:
        raise ValueError(f"initial factors have rank {f.rank}, config says {config.rank}")
    m = data.shape.m
    Q = f.Q
    alpha = config.step_size
    can_backtrack = config.backtrack and full_batch and config.noise_std == 0

    obj = FactoredObjective(data, lam, P)

    def record(epoch, fval, gnorm):
        # obj.last_risk is the empirical risk at the current Q
        reg = obj.last_risk + (lam * nuclear_norm(Q[:m] @ Q[m:].T) if lam else 0.0)
        return EpochRecord(epoch, fval, reg, gnorm)

    fval, g = obj.value_and_grad(Q)
    gnorm = float(np.linalg.norm(g))
    records = [record(0, fval, gnorm)]
    status = "max_epochs"
    if gnorm < config.tol_grad:
        status = "converged"

    epoch = 0
    # overflow is detected below and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        while status == "max_epochs" and epoch < config.epochs:
            epoch += 1
            try:
                if full_batch:
                    step = g
                    if config.noise_std > 0:
                        step = step + config.noise_std * rng_run.standard_normal(Q.shape)
                    Q_new = Q - alpha * step
                    f_new, g_new = obj.value_and_grad(Q_new)
                    if can_backtrack:
                        halvings = 0
                        # increases below rounding level of f do not trigger a halving
                        while not f_new <= fval + _ROUND * abs(fval) and halvings < 60:
                            alpha *= 0.5
                            halvings += 1
                            Q_new = Q - alpha * step
                            f_new, g_new = obj.value_and_grad(Q_new)
                    Q, fval, g = Q_new, f_new, g_new
                else:
                    order = rng_run.permutation(N)
                    for start in range(0, N, batch):
                        sub = data.subset(np.sort(order[start : start + batch]))
                        gu, gv = grad_factored(LoraFactors.from_stacked(Q, m), sub, lam, P)
                        step = np.vstack([gu, gv])
                        if config.noise_std > 0:
                            step = step + config.noise_std * rng_run.standard_normal(Q.shape)
                        Q = Q - alpha * step
                    fval, g = obj.value_and_grad(Q)
            except FloatingPointError:
                status = "diverged"
                break
            gnorm = float(np.linalg.norm(g))
            if not (np.isfinite(fval) and np.isfinite(gnorm)) or abs(fval) > DIVERGENCE_LIMIT:
                # the trace keeps only finite records; the last one is the pre-divergence state
                status = "diverged"
                break
            records.append(record(epoch, fval, gnorm))
            if gnorm < config.tol_grad:
                status = "converged"

    if status == "diverged":
        logger.warning("training diverged at epoch %d (seed %d)", epoch, config.seed)
    return TrainTrace(
        records=records,
        factors=LoraFactors.from_stacked(Q, m),
        perturbation=P,
        seed=config.seed,
        status=status,
        step_size=alpha,
        config=config,
    )
