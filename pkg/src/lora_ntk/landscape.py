"""Second-order certificates, multistart statistics and the 2 x 2 toy problems."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    LinearizedDataset,
    LoraFactors,
    PsdPerturbation,
    grad_factored,
    hessian_factored,
    nuclear_norm,
    regularized_risk,
)
from .optim import TrainConfig, train
from .prox import solve_global

__all__ = [
    "Verdict",
    "SospCertificate",
    "RunSummary",
    "MultistartReport",
    "sosp_certificate",
    "rank_of_factors",
    "multistart",
    "toy_instance",
    "toy_closed_form",
    "toy_rank1_floor",
    "TOL_GRAD",
    "TOL_HESS",
]

TOL_GRAD = 1e-6
TOL_HESS = 1e-6
FACTOR_RANK_TOL = 1e-6


class Verdict(str, enum.Enum):
    SOSP = "sosp"
    FIRST_ORDER_ONLY = "first_order_only"
    NOT_STATIONARY = "not_stationary"


@dataclass
class SospCertificate:
    grad_norm: float
    hessian_min_eig: float
    rank: int
    tol_grad: float
    tol_hess: float
    rank_tol: float
    verdict: Verdict
    witness: np.ndarray | None = None  # unit direction of negative curvature, row-major Q coordinates

    @property
    def is_sosp(self) -> bool:
        return self.verdict is Verdict.SOSP

    def to_dict(self) -> dict:
        return {
            "grad_norm": self.grad_norm,
            "hessian_min_eig": self.hessian_min_eig,
            "rank": self.rank,
            "tol_grad": self.tol_grad,
            "tol_hess": self.tol_hess,
            "rank_tol": self.rank_tol,
            "verdict": self.verdict.value,
        }


def rank_of_factors(f: LoraFactors, tol: float = FACTOR_RANK_TOL) -> int:
    """Numerical rank of ``Q = [u; v]``: singular values above ``tol * sigma_max``."""
    s = np.linalg.svd(f.Q, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def sosp_certificate(
    f: LoraFactors,
    data: LinearizedDataset,
    lam: float,
    P: PsdPerturbation | None = None,
    tol_grad: float = TOL_GRAD,
    tol_hess: float = TOL_HESS,
    rank_tol: float = FACTOR_RANK_TOL,
) -> SospCertificate:
    gu, gv = grad_factored(f, data, lam, P)
    gnorm = float(np.sqrt(np.sum(gu**2) + np.sum(gv**2)))
    H = hessian_factored(f, data, lam, P)
    w, V = np.linalg.eigh(H)
    rank = rank_of_factors(f, rank_tol)
    witness = None
    if gnorm > tol_grad:
        verdict = Verdict.NOT_STATIONARY
    elif w[0] >= -tol_hess:
        verdict = Verdict.SOSP
    else:
        verdict = Verdict.FIRST_ORDER_ONLY
        witness = V[:, 0]
    return SospCertificate(gnorm, float(w[0]), rank, tol_grad, tol_hess, rank_tol, verdict, witness)


@dataclass
class RunSummary:
    seed: int
    status: str
    factored_risk: float
    regularized_risk: float
    epochs: int
    certificate: SospCertificate | None
    within_bound: bool | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "status": self.status,
            "factored_risk": self.factored_risk,
            "regularized_risk": self.regularized_risk,
            "epochs": self.epochs,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "within_bound": self.within_bound,
        }


@dataclass
class MultistartReport:
    runs: list
    spread: float
    global_value: float
    global_nuclear_norm: float
    perturb_eps: float
    tolerance: float
    bound: float
    traces: list = field(default_factory=list, repr=False)

    @property
    def converged_runs(self) -> list:
        return [r for r in self.runs if r.status == "converged"]

    @property
    def diverged(self) -> int:
        return sum(r.status == "diverged" for r in self.runs)

    @property
    def passed(self) -> bool:
        """Every converged run is an SOSP that satisfies the approximate-optimality bound."""
        conv = self.converged_runs
        return bool(conv) and all(r.certificate.is_sosp and r.within_bound for r in conv)

    def to_dict(self) -> dict:
        return {
            "spread": self.spread,
            "global_value": self.global_value,
            "global_nuclear_norm": self.global_nuclear_norm,
            "perturb_eps": self.perturb_eps,
            "tolerance": self.tolerance,
            "bound": self.bound,
            "passed": self.passed,
            "runs": [r.to_dict() for r in self.runs],
        }


def _one_run(data, config, seed, tol_grad, tol_hess, rank_tol, certify):
    cfg = replace(config, seed=seed)
    trace = train(data, cfg)
    cert = None
    if certify and trace.status != "diverged":
        cert = sosp_certificate(trace.factors, data, cfg.lam, trace.perturbation, tol_grad, tol_hess, rank_tol)
    rec = trace.final
    return trace, RunSummary(seed, trace.status, rec.factored_risk, rec.regularized_risk, rec.epoch, cert)


def multistart(
    data: LinearizedDataset,
    config: TrainConfig,
    runs: int,
    tolerance: float = 1e-5,
    tol_grad: float = TOL_GRAD,
    tol_hess: float = TOL_HESS,
    rank_tol: float = FACTOR_RANK_TOL,
    certify: bool = True,
    n_jobs: int = 1,
    keep_traces: bool = False,
) -> MultistartReport:
    """Train ``runs`` seeds (``config.seed + i``) and compare against the convex optimum.

    Each run's final ``L_lam(u v^T)`` is checked against
    ``min L_lam + 2 eps |delta*_lam|_* + tolerance`` where the minimum and
    ``delta*_lam`` come from the proximal-gradient solver.
    """
    if runs < 2:
        raise ValueError("multistart needs at least two runs")
    ref = solve_global(data, config.lam)
    ref_nuc = nuclear_norm(ref.delta)
    ref_value = regularized_risk(ref.delta, data, config.lam)
    bound = ref_value + 2 * config.perturb_eps * ref_nuc + tolerance
    seeds = [config.seed + i for i in range(runs)]
    args = (tol_grad, tol_hess, rank_tol, certify)
    if n_jobs == 1:
        results = [_one_run(data, config, s, *args) for s in seeds]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_one_run)(data, config, s, *args) for s in seeds)
    summaries = []
    for _, rs in results:
        if rs.status != "diverged":
            rs.within_bound = bool(rs.regularized_risk <= bound)
        summaries.append(rs)
    finals = [r.regularized_risk for r in summaries if r.status != "diverged"]
    spread = float(max(finals) - min(finals)) if finals else float("nan")
    return MultistartReport(
        runs=summaries,
        spread=spread,
        global_value=ref_value,
        global_nuclear_norm=ref_nuc,
        perturb_eps=config.perturb_eps,
        tolerance=tolerance,
        bound=bound,
        traces=[t for t, _ in results] if keep_traces else [],
    )


# --------------------------------------------------------------------------
# 2 x 2 toy problems, delta = [[w, x], [y, z]], squared error, K = 1, lam = 0

_S3 = np.sqrt(3.0)
_TOYS = {
    "a": ([[[0, 1], [1, 0]]], [0.0]),
    "b": ([[[0, 0], [0, 1]], [[0, 1], [1, 0]]], [-4.0, 0.0]),
    "c": ([[[1, 0], [0, 0]], [[0, 0], [0, 1]], [[0, _S3], [_S3, 0]]], [1.0, 4.0, 0.0]),
}


def toy_instance(which: str) -> LinearizedDataset:
    """Toy datasets whose empirical risks are

    * (a) ``(x + y)^2``
    * (b) ``(z + 4)^2 / 2 + (x + y)^2 / 2``
    * (c) ``(w - 1)^2 / 3 + (z - 4)^2 / 3 + (sqrt(3) x + sqrt(3) y)^2 / 3``
    """
    if which not in _TOYS:
        raise ValueError(f"unknown toy instance {which!r}; choose from a, b, c")
    G, Y = _TOYS[which]
    G = np.asarray(G, dtype=float)[:, None]
    n = len(Y)
    return LinearizedDataset.from_dense(G, np.zeros((n, 1)), np.asarray(Y)[:, None], "squared_error")


def toy_closed_form(which: str, delta) -> float:
    (w, x), (y, z) = np.asarray(delta, dtype=float)
    if which == "a":
        return (x + y) ** 2
    if which == "b":
        return 0.5 * (z + 4) ** 2 + 0.5 * (x + y) ** 2
    if which == "c":
        return (w - 1) ** 2 / 3 + (z - 4) ** 2 / 3 + (_S3 * x + _S3 * y) ** 2 / 3
    raise ValueError(f"unknown toy instance {which!r}")


def toy_rank1_floor(which: str, grid: int = 181, rounds: int = 12) -> float:
    """Minimum of a toy risk over rank-1 matrices (the surface ``w z = x y``).

    Rank-1 matrices are ``s a b^T`` with unit ``a = (cos t, sin t)``,
    ``b = (cos p, sin p)``.  For fixed angles the risk is a quadratic in ``s``
    minimized in closed form; the angles are searched on a grid that is
    refined around the best cell ``rounds`` times.
    """
    data = toy_instance(which)
    G = data.dense_features()[:, 0]  # (N, 2, 2)
    y = data.labels[:, 0]

    def best(tt, pp):
        a = np.stack([np.cos(tt), np.sin(tt)], -1)
        b = np.stack([np.cos(pp), np.sin(pp)], -1)
        g = np.einsum("...i,nij,...j->...n", a, G, b)  # measurement of a b^T
        gg = np.sum(g * g, -1)
        s = np.where(gg > 0, np.sum(g * y, -1) / np.where(gg > 0, gg, 1.0), 0.0)
        return np.mean((s[..., None] * g - y) ** 2, -1)

    lo_t, hi_t, lo_p, hi_p = 0.0, np.pi, 0.0, np.pi
    value = np.inf
    for _ in range(rounds):
        tt, pp = np.meshgrid(np.linspace(lo_t, hi_t, grid), np.linspace(lo_p, hi_p, grid), indexing="ij")
        vals = best(tt, pp)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        value = min(value, float(vals[i, j]))
        dt = (hi_t - lo_t) / (grid - 1) * 2
        dp = (hi_p - lo_p) / (grid - 1) * 2
        lo_t, hi_t = tt[i, j] - dt, tt[i, j] + dt
        lo_p, hi_p = pp[i, j] - dp, pp[i, j] + dp
    return value
