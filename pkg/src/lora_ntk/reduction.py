"""Rank reduction of a global minimizer through its PSD lift.

A minimizer ``delta`` of ``L(delta) + lam |delta|_*`` is lifted to
``Z = [u; v][u; v]^T`` (balanced factors, so ``tr Z = 2 |delta|_*``).  While
some nonzero symmetric ``D`` has range inside ``range(Z)`` and leaves every
feature measurement ``<G^(j)(X_i), D_offdiag>`` unchanged, moving along ``D``
to the PSD boundary keeps the objective and drops the rank.  When no such
``D`` exists the rank ``r`` satisfies ``r (r + 1) / 2 <= K N``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import LinearizedDataset, regularized_risk

__all__ = [
    "RANK_TOL",
    "OptimalityCertificateError",
    "DegenerateDirectionError",
    "PsdLift",
    "FeatureOperator",
    "ReductionResult",
    "lift_to_psd",
    "extract_offdiag",
    "null_direction",
    "boundary_step",
    "rank_reduce",
]

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
NULL_TOL = 1e-8
TRACE_TOL = 1e-8


class OptimalityCertificateError(RuntimeError):
    """A null direction with nonzero trace was found: the input is not a minimizer."""

    def __init__(self, trace_value: float, tol: float):
        super().__init__(
            f"null direction has |tr D| = {trace_value:.3e} > {tol:.1e}; the zero-trace "
            "optimality certificate fails, so the input is not a minimizer of the regularized risk"
        )
        self.trace_value = trace_value
        self.tol = tol


class DegenerateDirectionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PsdLift:
    """``Z = U diag(w) U^T`` with orthonormal ``U`` (the range basis) and ``w > 0``.

    ``m`` is the row count of the tracked update; the update is ``Z[:m, m:]``.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    m: int
    rank_tol: float = RANK_TOL

    @classmethod
    def from_matrix(cls, Z, m: int, rank_tol: float = RANK_TOL) -> "PsdLift":
        Z = np.asarray(Z, dtype=float)
        w, U = np.linalg.eigh(0.5 * (Z + Z.T))
        top = w[-1] if w.size else 0.0
        if top > 0 and w[0] < -rank_tol * top:
            raise ValueError(f"matrix is not PSD (lambda_min = {w[0]:.3e})")
        keep = w > rank_tol * top if top > 0 else np.zeros_like(w, dtype=bool)
        return cls(U[:, keep], w[keep], m, rank_tol)

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    @property
    def side(self) -> int:
        return self.basis.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T

    @property
    def trace(self) -> float:
        return float(np.sum(self.eigenvalues))


@dataclass(frozen=True, eq=False)
class FeatureOperator:
    """The map ``Z -> (<G^(j)(X_i), Z[:m, m:]>)_{ij}`` from symmetric matrices to R^{KN}."""

    data: LinearizedDataset

    @property
    def m(self) -> int:
        return self.data.shape.m

    @property
    def output_size(self) -> int:
        return self.data.n_samples * self.data.output_dim

    def __call__(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return self.data.flat_features @ self.data.pack(Z[: self.m, self.m :])

    def restricted_matrix(self, basis: np.ndarray) -> np.ndarray:
        """Matrix of ``W -> A(basis W basis^T)`` in the orthonormal symmetric basis of side ``r'``.

        Columns follow :func:`_sym_basis_index`: diagonal entries first, then
        pairs ``i < j`` scaled by ``sqrt(2)``.
        """
        m = self.m
        top, bot = basis[:m], basis[m:]
        r = basis.shape[1]
        # C[q] = top^T G_q bot for every measurement q
        G = self.data.dense_features().reshape(self.output_size, m, -1)
        C = np.einsum("ia,qij,jb->qab", top, G, bot)
        iu, ju = np.triu_indices(r, k=1)
        diag = C[:, np.arange(r), np.arange(r)]
        off = (C[:, iu, ju] + C[:, ju, iu]) / np.sqrt(2.0)
        return np.concatenate([diag, off], axis=1)


def _sym_from_coords(coords, r: int) -> np.ndarray:
    W = np.zeros((r, r))
    W[np.arange(r), np.arange(r)] = coords[:r]
    iu, ju = np.triu_indices(r, k=1)
    W[iu, ju] = coords[r:] / np.sqrt(2.0)
    W[ju, iu] = coords[r:] / np.sqrt(2.0)
    return W


def lift_to_psd(delta, rank_tol: float = RANK_TOL) -> PsdLift:
    """Balanced PSD lift of ``delta``.

    With ``delta = U S V^T``, ``u = U sqrt(S)``, ``v = V sqrt(S)`` and
    ``Z = [u; v][u; v]^T``; then ``tr Z = 2 |delta|_*`` and ``rank Z = rank delta``.
    The eigen-decomposition of ``Z`` is explicit: eigenvectors
    ``[U_k; V_k] / sqrt(2)`` with eigenvalues ``2 s_k``.
    """
    delta = np.asarray(delta, dtype=float)
    m = delta.shape[0]
    U, s, Vt = np.linalg.svd(delta, full_matrices=False)
    keep = s > rank_tol * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, dtype=bool)
    basis = np.vstack([U[:, keep], Vt[keep].T]) / np.sqrt(2.0)
    return PsdLift(basis, 2.0 * s[keep], m, rank_tol)


def extract_offdiag(Z: PsdLift) -> np.ndarray:
    """The ``m x n`` upper-right block of ``Z``."""
    top, bot = Z.basis[: Z.m], Z.basis[Z.m :]
    return (top * Z.eigenvalues) @ bot.T


@dataclass
class NullDirection:
    direction: np.ndarray  # D, symmetric (m+n) x (m+n)
    coords: np.ndarray  # W in the range basis, unit Frobenius norm
    nullity: int
    trace: float


def _null_space(B: np.ndarray, tol: float) -> np.ndarray:
    cols = B.shape[1]
    if B.size == 0 or not np.any(B):
        return np.eye(cols)
    _, s, Vt = np.linalg.svd(B)
    rank = int(np.sum(s > tol * s[0]))
    return Vt[rank:].T


def _candidates(Z: PsdLift, op: FeatureOperator, null_tol: float):
    r = Z.rank
    B = op.restricted_matrix(Z.basis)
    return _null_space(B, null_tol), r


def null_direction(Z: PsdLift, op: FeatureOperator, null_tol: float = NULL_TOL, lam: float | None = None):
    """A unit-norm symmetric ``D`` in ``range(Z)`` with ``A(D) = 0``, or ``None``.

    The space of candidates is parametrized by symmetric ``W`` of side
    ``rank(Z)`` (dimension ``r'(r'+1)/2``); the null space of the assembled
    ``KN x r'(r'+1)/2`` matrix is read off its SVD.  Among the basis vectors of
    that null space the one with the largest generalized eigenvalue (the
    shortest step to the boundary) is returned.

    With ``lam > 0`` and a null space of dimension two or more, the returned
    direction is taken inside the trace-free part of the null space; at an
    exact minimizer every null direction is trace-free, so this only removes
    round-off left by an approximate minimizer.
    """
    if Z.rank == 0:
        return None
    N_basis, r = _candidates(Z, op, null_tol)
    nullity = N_basis.shape[1]
    if nullity == 0:
        return None
    traces = N_basis[:r].sum(axis=0)  # tr W for each basis vector
    if lam and nullity >= 2 and np.any(traces):
        # orthonormal basis of {c : traces . c = 0} inside the null space
        t = traces / np.linalg.norm(traces)
        _, _, Vt = np.linalg.svd(t[None, :])
        N_basis = N_basis @ Vt[1:].T
    best = None
    for k in range(N_basis.shape[1]):
        c = N_basis[:, k] / np.linalg.norm(N_basis[:, k])
        W = _sym_from_coords(c, r)
        mu = _largest_generalized_eig(W, Z.eigenvalues)
        if best is None or abs(mu) > best[0]:
            best = (abs(mu), c, W)
    _, c, W = best
    D = Z.basis @ W @ Z.basis.T
    return NullDirection(D, W, nullity, float(np.trace(W)))


def _largest_generalized_eig(W, eigenvalues) -> float:
    R = np.diag(eigenvalues)
    mu = scipy.linalg.eigh(W, R, eigvals_only=True)
    return float(mu[np.argmax(np.abs(mu))])


def boundary_step(Z: PsdLift, D) -> tuple:
    """Move from ``Z`` along ``D`` (with ``range(D)`` inside ``range(Z)``) until the rank drops.

    Solves ``W x = mu R x`` with ``R = U^T Z U`` and ``W = U^T D U``; with
    ``mu_hat`` the eigenvalue of largest magnitude, ``t* = -1 / mu_hat`` and
    ``Z + t* D`` is PSD of strictly lower rank.  Returns ``(t*, new_lift)``.
    """
    D = np.asarray(D, dtype=float)
    U = Z.basis
    W = U.T @ D @ U
    W = 0.5 * (W + W.T)
    if Z.rank == 0:
        raise DegenerateDirectionError("cannot step from Z = 0")
    mu = scipy.linalg.eigh(W, np.diag(Z.eigenvalues), eigvals_only=True)
    mu_hat = mu[np.argmax(np.abs(mu))]
    if abs(mu_hat) <= 1e-14 * max(1.0, np.linalg.norm(W)) / max(Z.eigenvalues.max(), 1e-300):
        raise DegenerateDirectionError("all generalized eigenvalues vanish; D is zero on range(Z)")
    t = -1.0 / mu_hat
    M = np.diag(Z.eigenvalues) + t * W
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    # the step zeroes at least one eigenvalue; drop it and anything at round-off level
    keep = w > Z.rank_tol * w.max()
    new = PsdLift(U @ V[:, keep], w[keep], Z.m, Z.rank_tol)
    if new.rank >= Z.rank:
        raise DegenerateDirectionError("boundary step did not reduce the rank")
    return float(t), new


@dataclass
class ReductionResult:
    delta: np.ndarray
    rank: int
    initial_rank: int
    steps: list = field(default_factory=list)  # (rank before, t*, |tr W|, nullity)
    objective_before: float = float("nan")
    objective_after: float = float("nan")
    max_trace: float = 0.0

    @property
    def drift(self) -> float:
        return abs(self.objective_after - self.objective_before)


def rank_reduce(
    delta,
    data: LinearizedDataset,
    lam: float,
    rank_tol: float = RANK_TOL,
    null_tol: float = NULL_TOL,
    trace_tol: float = TRACE_TOL,
) -> ReductionResult:
    """Reduce a minimizer of the regularized risk to rank ``r`` with ``r (r + 1) / 2 <= K N``.

    Raises :class:`OptimalityCertificateError` when ``lam > 0`` and a null
    direction has ``|tr D| > trace_tol * |D|_F``; the trace of every direction
    used is recorded in the result.  With ``lam == 0`` the trace does not enter
    the objective and is not checked.
    """
    delta = np.asarray(delta, dtype=float)
    op = FeatureOperator(data)
    Z = lift_to_psd(delta, rank_tol)
    result = ReductionResult(delta, Z.rank, Z.rank)
    result.objective_before = regularized_risk(delta, data, lam)
    while True:
        nd = null_direction(Z, op, null_tol, lam=lam)
        if nd is None:
            break
        tr = abs(nd.trace)  # |W|_F = 1 so this is |tr D| / |D|_F
        result.max_trace = max(result.max_trace, tr)
        if lam > 0 and tr > trace_tol:
            raise OptimalityCertificateError(tr, trace_tol)
        t, Z_new = boundary_step(Z, nd.direction)
        result.steps.append((Z.rank, t, tr, nd.nullity))
        logger.debug("rank %d -> %d (t* = %.3e, nullity %d)", Z.rank, Z_new.rank, t, nd.nullity)
        Z = Z_new
    out = extract_offdiag(Z)
    result.delta = out
    s = np.linalg.svd(out, compute_uv=False)
    result.rank = int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0
    result.objective_after = regularized_risk(out, data, lam)
    return result
