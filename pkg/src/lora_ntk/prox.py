"""Proximal gradient on the nuclear-norm regularized linearized risk.

This is the convex reference solver: its output is the global minimum that
the factored (LoRA) runs are compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearizedDataset, assemble_S, loss_gradient, loss_values, nuclear_norm, predictions

__all__ = ["ProxConfig", "ProxResult", "ConvergenceError", "svt", "prox_gradient", "solve_global", "global_min_value"]


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProxConfig:
    lam: float = 0.01
    step_size: float = 1.0
    backtrack_factor: float = 0.5
    max_iter: int = 50_000
    tol: float = 1e-10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass
class ProxResult:
    delta: np.ndarray
    objective: float
    trace: np.ndarray  # objective per iteration
    converged: bool
    iterations: int
    step_size: float
    residual: float  # |delta_{t+1} - delta_t|_F / alpha at the last step


def svt(delta, tau: float) -> np.ndarray:
    """Singular value soft-thresholding ``U max(S - tau, 0) V^T``.

    This is the prox of ``tau * |.|_*``.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return _svt(np.asarray(delta, dtype=float), tau)[0]


def _svt(delta, tau):
    U, s, Vt = np.linalg.svd(delta, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep], s


def _risk(out, data) -> float:
    return float(np.mean(loss_values(out, data.labels, data.loss)))


def prox_gradient(data: LinearizedDataset, config: ProxConfig, delta0=None) -> ProxResult:
    """Proximal gradient with backtracking on the smooth part.

    Each iteration takes ``delta+ = svt(delta - a grad, a lam)`` and halves
    (``backtrack_factor``) the step ``a`` until the usual quadratic upper bound
    on the smooth part holds at ``delta+``.  The objective is then
    non-increasing.  Stops when ``|delta+ - delta|_F / a < tol``.
    """
    lam = config.lam
    delta = np.zeros((data.shape.m, data.shape.n)) if delta0 is None else np.array(delta0, dtype=float)
    alpha = config.step_size
    N = data.n_samples
    out = predictions(data, delta)
    f = _risk(out, data)
    obj = f + lam * nuclear_norm(delta)
    trace = [obj]
    converged = False
    residual = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        # gradient of the smooth part is S assembled from the dual weights
        g = assemble_S(loss_gradient(out, data.labels, data.loss) / N, data)
        while True:
            cand, s_cand = _svt(delta - alpha * g, alpha * lam)
            diff = cand - delta
            out_cand = predictions(data, cand)
            f_cand = _risk(out_cand, data)
            lin = np.sum(g * diff)
            # violations below rounding level of f are not real violations
            slack = 64 * np.finfo(float).eps * (abs(f) + abs(f_cand) + abs(lin))
            if f_cand <= f + lin + np.sum(diff**2) / (2 * alpha) + slack:
                break
            alpha *= config.backtrack_factor
            if alpha < 1e-20:
                raise ConvergenceError("backtracking step size underflow")
        residual = float(np.linalg.norm(diff)) / alpha
        delta, f, out = cand, f_cand, out_cand
        obj = f + lam * float(np.sum(s_cand))
        trace.append(obj)
        if residual < config.tol:
            converged = True
            break
    return ProxResult(delta, float(obj), np.array(trace), converged, it, alpha, residual)


def solve_global(data: LinearizedDataset, lam: float, tol: float = 1e-11, max_iter: int = 200_000, step_size: float | None = None) -> ProxResult:
    """Run :func:`prox_gradient` to a tight tolerance; raise if it does not converge."""
    if step_size is None:
        step_size = _initial_step(data)
    res = prox_gradient(data, ProxConfig(lam=lam, step_size=step_size, max_iter=max_iter, tol=tol))
    if not res.converged:
        raise ConvergenceError(
            f"prox gradient stopped after {res.iterations} iterations with residual {res.residual:.3e}"
        )
    return res


def global_min_value(data: LinearizedDataset, lam: float, tol: float = 1e-11) -> float:
    return solve_global(data, lam, tol=tol).objective


def _initial_step(data: LinearizedDataset) -> float:
    """1/L for the smooth part from the operator norm of the stacked features."""
    A = data.dense_features().reshape(data.n_samples * data.output_dim, -1)
    curvature = 2.0 if data.loss == "squared_error" else 1.0
    L = curvature * np.linalg.norm(A, 2) ** 2 / data.n_samples
    return 1.0 / L if L > 0 else 1.0
