"""Linearized fine-tuning model: data types, risks and exact derivatives.

A dataset stores, for every sample ``i`` and output coordinate ``j``, a
block-diagonal feature matrix ``G[i, j]`` of total size ``m x n``.  Only the
diagonal blocks are kept; an update ``delta`` is a dense ``m x n`` array and
the prediction is ``f0[i] + <G[i, :], delta>`` with the inner product taken
block by block.

The factored (LoRA) objective is::

    F(u, v) = L(u v^T) + lam/2 (|u|_F^2 + |v|_F^2) + <P, Q Q^T>,   Q = [u; v]

and its gradient and Hessian are available in closed form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "LossKind",
    "BlockShape",
    "FeatureMap",
    "LinearizedSample",
    "LinearizedDataset",
    "LoraFactors",
    "PsdPerturbation",
    "HESSIAN_SIZE_LIMIT",
    "feature_inner",
    "predictions",
    "predict",
    "loss_values",
    "loss_gradient",
    "empirical_risk",
    "nuclear_norm",
    "regularized_risk",
    "factored_risk",
    "dual_weights",
    "assemble_S",
    "grad_factored",
    "hessian_factored",
    "hessian_vector_product",
    "random_dataset",
    "FactoredObjective",
]

HESSIAN_SIZE_LIMIT = 4096


class LossKind(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BlockShape:
    """Sizes ``(m_i, n_i)`` of the tuned weight matrices, in order."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple((int(a), int(b)) for a, b in self.blocks)
        if not blocks:
            raise ValueError("BlockShape needs at least one block")
        if any(a < 1 or b < 1 for a, b in blocks):
            raise ValueError(f"block sizes must be positive, got {blocks}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return sum(a for a, _ in self.blocks)

    @property
    def n(self) -> int:
        return sum(b for _, b in self.blocks)

    def slices(self) -> Iterator[tuple[slice, slice]]:
        """Yield the (row, column) slices of each diagonal block of an m x n matrix."""
        r0 = c0 = 0
        for a, b in self.blocks:
            yield slice(r0, r0 + a), slice(c0, c0 + b)
            r0 += a
            c0 += b

    def to_dense(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        """Embed per-block arrays ``(..., m_i, n_i)`` into a dense ``(..., m, n)`` array."""
        lead = np.shape(blocks[0])[:-2]
        out = np.zeros(lead + (self.m, self.n))
        for (rs, cs), blk in zip(self.slices(), blocks):
            out[..., rs, cs] = blk
        return out

    def from_dense(self, dense: np.ndarray) -> tuple:
        return tuple(np.asarray(dense)[..., rs, cs] for rs, cs in self.slices())


@dataclass(frozen=True)
class FeatureMap:
    """Features of a single sample: ``K`` block-diagonal ``m x n`` matrices.

    ``blocks[b]`` has shape ``(K, m_b, n_b)``.
    """

    shape: BlockShape
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(_frozen(b) for b in self.blocks)
        if len(blocks) != self.shape.n_blocks:
            raise ValueError("number of feature blocks does not match the shape")
        k = blocks[0].shape[0]
        for blk, (a, b) in zip(blocks, self.shape.blocks):
            if blk.shape != (k, a, b):
                raise ValueError(f"feature block has shape {blk.shape}, expected {(k, a, b)}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def output_dim(self) -> int:
        return self.blocks[0].shape[0]

    def dense(self) -> np.ndarray:
        """Return the ``(K, m, n)`` dense array with zero off-block entries."""
        return self.shape.to_dense(self.blocks)


@dataclass(frozen=True)
class LinearizedSample:
    features: FeatureMap
    base_output: np.ndarray
    label: object


@dataclass(frozen=True, eq=False)
class LinearizedDataset:
    """N linearized samples sharing one block shape and output dimension.

    Storage is columnar: ``features[b]`` has shape ``(N, K, m_b, n_b)``,
    ``base_output`` is ``(N, K)`` and ``labels`` is ``(N,)`` integer class
    indices (cross-entropy, 0-based) or ``(N, K)`` real targets (squared
    error).
    """

    shape: BlockShape
    features: tuple
    base_output: np.ndarray
    labels: np.ndarray
    loss: LossKind = LossKind.SQUARED_ERROR

    def __post_init__(self):
        loss = LossKind(self.loss)
        object.__setattr__(self, "loss", loss)
        feats = tuple(_frozen(f) for f in self.features)
        if len(feats) != self.shape.n_blocks:
            raise ValueError("number of feature blocks does not match the shape")
        if feats[0].ndim != 4:
            raise ValueError("feature blocks must have shape (N, K, m_i, n_i)")
        n_samples, k = feats[0].shape[:2]
        if n_samples < 1:
            raise ValueError("dataset needs at least one sample")
        for f, (a, b) in zip(feats, self.shape.blocks):
            if f.shape != (n_samples, k, a, b):
                raise ValueError(f"feature block has shape {f.shape}, expected {(n_samples, k, a, b)}")
        f0 = _frozen(self.base_output)
        if f0.shape != (n_samples, k):
            raise ValueError(f"base_output has shape {f0.shape}, expected {(n_samples, k)}")
        if not np.all(np.isfinite(f0)):
            raise ValueError("base_output must be finite")
        if loss is LossKind.CROSS_ENTROPY:
            labels = _frozen(self.labels, dtype=np.int64)
            if labels.shape != (n_samples,):
                raise ValueError("cross-entropy labels must be a length-N vector of class indices")
            if k < 2:
                raise ValueError("cross-entropy needs K >= 2")
            if labels.min() < 0 or labels.max() >= k:
                raise ValueError(f"class indices must lie in [0, {k})")
        else:
            labels = _frozen(self.labels)
            if labels.shape != (n_samples, k):
                raise ValueError(f"squared-error labels must have shape {(n_samples, k)}")
            if not np.all(np.isfinite(labels)):
                raise ValueError("labels must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "base_output", f0)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_samples(cls, samples: Sequence[LinearizedSample], loss) -> "LinearizedDataset":
        if not samples:
            raise ValueError("dataset needs at least one sample")
        shape = samples[0].features.shape
        if any(s.features.shape != shape for s in samples):
            raise ValueError("all samples must share one block shape")
        feats = tuple(np.stack([s.features.blocks[b] for s in samples]) for b in range(shape.n_blocks))
        return cls(
            shape=shape,
            features=feats,
            base_output=np.stack([np.asarray(s.base_output, dtype=float) for s in samples]),
            labels=np.stack([np.asarray(s.label) for s in samples]),
            loss=loss,
        )

    @classmethod
    def from_dense(cls, features, base_output, labels, loss, shape=None) -> "LinearizedDataset":
        """Build from a dense ``(N, K, m, n)`` feature array; off-block entries are dropped."""
        features = np.asarray(features, dtype=float)
        if shape is None:
            shape = BlockShape(((features.shape[-2], features.shape[-1]),))
        return cls(shape, shape.from_dense(features), base_output, labels, loss)

    @property
    def n_samples(self) -> int:
        return self.base_output.shape[0]

    @property
    def output_dim(self) -> int:
        return self.base_output.shape[1]

    def __len__(self) -> int:
        return self.n_samples

    def sample(self, i: int) -> LinearizedSample:
        fm = FeatureMap(self.shape, tuple(f[i] for f in self.features))
        return LinearizedSample(fm, self.base_output[i], self.labels[i])

    def __iter__(self) -> Iterator[LinearizedSample]:
        return (self.sample(i) for i in range(self.n_samples))

    def subset(self, idx) -> "LinearizedDataset":
        idx = np.asarray(idx)
        return LinearizedDataset(
            self.shape,
            tuple(f[idx] for f in self.features),
            self.base_output[idx],
            self.labels[idx],
            self.loss,
        )

    @cached_property
    def flat_features(self) -> np.ndarray:
        """Features as one ``(N * K, sum_b m_b n_b)`` matrix acting on :meth:`pack` vectors."""
        n, k = self.n_samples, self.output_dim
        A = np.concatenate([f.reshape(n * k, -1) for f in self.features], axis=1)
        A.setflags(write=False)
        return A

    def pack(self, delta) -> np.ndarray:
        """Concatenate the diagonal blocks of an ``m x n`` update into one vector."""
        return np.concatenate([delta[rs, cs].ravel() for rs, cs in self.shape.slices()])

    def unpack(self, vec) -> np.ndarray:
        """Inverse of :meth:`pack`; off-block entries are zero."""
        out = np.zeros((self.shape.m, self.shape.n))
        pos = 0
        for (rs, cs), (a, b) in zip(self.shape.slices(), self.shape.blocks):
            out[rs, cs] = vec[pos : pos + a * b].reshape(a, b)
            pos += a * b
        return out

    def dense_features(self) -> np.ndarray:
        return self.shape.to_dense(self.features)

    def feature_norm_bound(self) -> float:
        """Largest ``|G^(j)(X_i)|_F`` over samples and coordinates."""
        sq = sum(np.sum(f**2, axis=(2, 3)) for f in self.features)
        return float(np.sqrt(sq.max()))


@dataclass(frozen=True, eq=False)
class LoraFactors:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1] or u.shape[1] < 1:
            raise ValueError(f"incompatible factor shapes {u.shape} and {v.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_stacked(cls, Q, m: int) -> "LoraFactors":
        Q = np.asarray(Q, dtype=float)
        return cls(Q[:m], Q[m:])

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return np.vstack([self.u, self.v])

    @property
    def delta(self) -> np.ndarray:
        return self.u @ self.v.T

    def ravel(self) -> np.ndarray:
        """Flattened coordinates: row-major ``Q``, i.e. ``u`` then ``v``."""
        return self.Q.ravel()


@dataclass(frozen=True, eq=False)
class PsdPerturbation:
    """Symmetric PSD ``P`` of side ``m + n`` with ``|P|_F < bound`` (``bound == 0`` means ``P == 0``)."""

    matrix: np.ndarray
    bound: float = 0.0

    def __post_init__(self):
        P = np.array(self.matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("perturbation must be a square matrix")
        if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max(initial=0.0))):
            raise ValueError("perturbation must be symmetric")
        fro = np.linalg.norm(P)
        if self.bound < 0:
            raise ValueError("bound must be non-negative")
        if self.bound == 0 and fro != 0:
            raise ValueError("bound 0 encodes P = 0")
        if self.bound > 0 and not fro < self.bound:
            raise ValueError(f"|P|_F = {fro} is not below the bound {self.bound}")
        if fro > 0 and np.linalg.eigvalsh(P)[0] < -1e-10 * fro:
            raise ValueError("perturbation is not positive semi-definite")
        object.__setattr__(self, "matrix", _frozen(P))

    @classmethod
    def zero(cls, dim: int) -> "PsdPerturbation":
        return cls(np.zeros((dim, dim)), 0.0)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_zero(self) -> bool:
        return self.bound == 0


# --------------------------------------------------------------------------
# predictions and losses


def _check_delta(data: LinearizedDataset, delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (data.shape.m, data.shape.n):
        raise ValueError(f"update has shape {delta.shape}, expected {(data.shape.m, data.shape.n)}")
    return delta


def feature_inner(data: LinearizedDataset, delta) -> np.ndarray:
    """``<G^(j)(X_i), delta>`` for all i, j, as an ``(N, K)`` array (diagonal blocks only)."""
    delta = _check_delta(data, delta)
    return (data.flat_features @ data.pack(delta)).reshape(data.n_samples, data.output_dim)


def predictions(data: LinearizedDataset, delta) -> np.ndarray:
    return data.base_output + feature_inner(data, delta)


def predict(sample: LinearizedSample, delta) -> np.ndarray:
    """Linearized output ``f0 + <G, delta>`` of one sample."""
    shape = sample.features.shape
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (shape.m, shape.n):
        raise ValueError(f"update has shape {delta.shape}, expected {(shape.m, shape.n)}")
    out = np.array(sample.base_output, dtype=float)
    for blk, (rs, cs) in zip(sample.features.blocks, shape.slices()):
        out = out + np.einsum("kij,ij->k", blk, delta[rs, cs])
    return out


def loss_values(outputs, labels, loss) -> np.ndarray:
    """Per-sample loss. Squared error has no 1/2 factor."""
    outputs = np.asarray(outputs, dtype=float)
    if not np.all(np.isfinite(outputs)):
        raise FloatingPointError("non-finite prediction")
    if LossKind(loss) is LossKind.CROSS_ENTROPY:
        idx = np.arange(outputs.shape[0])
        return logsumexp(outputs, axis=1) - outputs[idx, labels]
    return np.sum((outputs - labels) ** 2, axis=1)


def loss_gradient(outputs, labels, loss) -> np.ndarray:
    """Per-sample gradient of the loss with respect to the outputs, ``(N, K)``."""
    outputs = np.asarray(outputs, dtype=float)
    if LossKind(loss) is LossKind.CROSS_ENTROPY:
        g = softmax(outputs, axis=1)
        g[np.arange(outputs.shape[0]), labels] -= 1.0
        return g
    return 2.0 * (outputs - labels)


def _loss_hessian_apply(outputs, loss, a) -> np.ndarray:
    """Apply each per-sample output Hessian to the rows of ``a``."""
    if LossKind(loss) is LossKind.CROSS_ENTROPY:
        p = softmax(outputs, axis=1)
        return p * a - p * np.sum(p * a, axis=1, keepdims=True)
    return 2.0 * a


def _loss_hessians(outputs, loss) -> np.ndarray:
    n, k = outputs.shape
    if LossKind(loss) is LossKind.CROSS_ENTROPY:
        p = softmax(outputs, axis=1)
        return np.einsum("nk,kl->nkl", p, np.eye(k)) - np.einsum("nk,nl->nkl", p, p)
    return np.broadcast_to(2.0 * np.eye(k), (n, k, k))


def empirical_risk(delta, data: LinearizedDataset) -> float:
    out = predictions(data, delta)
    return float(np.mean(loss_values(out, data.labels, data.loss)))


def nuclear_norm(delta) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(delta, dtype=float), compute_uv=False)))


def regularized_risk(delta, data: LinearizedDataset, lam: float) -> float:
    if lam < 0:
        raise ValueError("lam must be non-negative")
    risk = empirical_risk(delta, data)
    return risk + lam * nuclear_norm(delta) if lam else risk


def _check_factors(f: LoraFactors, data: LinearizedDataset, P: PsdPerturbation | None):
    if f.u.shape[0] != data.shape.m or f.v.shape[0] != data.shape.n:
        raise ValueError(
            f"factors {f.u.shape}, {f.v.shape} do not match block totals m={data.shape.m}, n={data.shape.n}"
        )
    if P is not None and P.dim != data.shape.m + data.shape.n:
        raise ValueError(f"perturbation side {P.dim} != m + n = {data.shape.m + data.shape.n}")


def factored_risk(f: LoraFactors, data: LinearizedDataset, lam: float, P: PsdPerturbation | None = None) -> float:
    _check_factors(f, data, P)
    val = empirical_risk(f.delta, data) + 0.5 * lam * (np.sum(f.u**2) + np.sum(f.v**2))
    if P is not None and not P.is_zero:
        Q = f.Q
        val += float(np.sum(P.matrix * (Q @ Q.T)))
    return float(val)


def dual_weights(delta_or_factors, data: LinearizedDataset) -> np.ndarray:
    """``(1/N) dl/dy_hat`` at the current predictions, shape ``(N, K)``.

    For cross-entropy every row sums to zero.
    """
    delta = delta_or_factors.delta if isinstance(delta_or_factors, LoraFactors) else delta_or_factors
    out = predictions(data, delta)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite prediction")
    return loss_gradient(out, data.labels, data.loss) / data.n_samples


def assemble_S(weights, data: LinearizedDataset) -> np.ndarray:
    """``S = sum_ij w[i, j] G^(j)(X_i)`` as a dense block-diagonal ``m x n`` array.

    With ``weights = dual_weights(delta, data)`` this is the gradient of the
    empirical risk at ``delta``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (data.n_samples, data.output_dim):
        raise ValueError(f"weights have shape {weights.shape}, expected {(data.n_samples, data.output_dim)}")
    return data.unpack(weights.ravel() @ data.flat_features)


def _perturbation_term(P: PsdPerturbation | None, Q: np.ndarray) -> np.ndarray:
    if P is None or P.is_zero:
        return np.zeros_like(Q)
    return 2.0 * (P.matrix @ Q)


def grad_factored(f: LoraFactors, data: LinearizedDataset, lam: float, P: PsdPerturbation | None = None):
    """Gradient ``(grad_u, grad_v)`` of :func:`factored_risk`.

    ``grad_u = S v + lam u + 2 (P Q)[:m]`` and ``grad_v = S^T u + lam v + 2 (P Q)[m:]``.
    The perturbation contributes ``2 P Q`` because ``<P, Q Q^T>`` is quadratic in Q.
    """
    _check_factors(f, data, P)
    S = assemble_S(dual_weights(f.delta, data), data)
    pq = _perturbation_term(P, f.Q)
    m = data.shape.m
    gu = S @ f.v + lam * f.u + pq[:m]
    gv = S.T @ f.u + lam * f.v + pq[m:]
    return gu, gv


def _output_jacobian(f: LoraFactors, data: LinearizedDataset) -> np.ndarray:
    """d y_hat[i, j] / d Q as an ``(N, K, (m+n) r)`` array in row-major Q coordinates."""
    m, r = data.shape.m, f.rank
    J = np.zeros((data.n_samples, data.output_dim, m + data.shape.n, r))
    for g, (rs, cs) in zip(data.features, data.shape.slices()):
        J[:, :, rs, :] = np.einsum("nkij,jr->nkir", g, f.v[cs])
        J[:, :, m + cs.start : m + cs.stop, :] = np.einsum("nkij,ir->nkjr", g, f.u[rs])
    return J.reshape(data.n_samples, data.output_dim, -1)


def hessian_factored(f: LoraFactors, data: LinearizedDataset, lam: float, P: PsdPerturbation | None = None) -> np.ndarray:
    """Dense Hessian of :func:`factored_risk` in row-major ``Q`` coordinates.

    Side is ``(m + n) * r``; raises ``ValueError`` beyond ``HESSIAN_SIZE_LIMIT``
    (use :func:`hessian_vector_product` instead).
    """
    _check_factors(f, data, P)
    m, n, r = data.shape.m, data.shape.n, f.rank
    side = (m + n) * r
    if side > HESSIAN_SIZE_LIMIT:
        raise ValueError(f"dense Hessian side {side} exceeds limit {HESSIAN_SIZE_LIMIT}")
    out = predictions(data, f.delta)
    J = _output_jacobian(f, data)
    Hl = _loss_hessians(out, data.loss) / data.n_samples
    H = np.einsum("nka,nkl,nlb->ab", J, Hl, J)
    S = assemble_S(loss_gradient(out, data.labels, data.loss) / data.n_samples, data)
    cross = np.kron(S, np.eye(r))
    H[: m * r, m * r :] += cross
    H[m * r :, : m * r] += cross.T
    H[np.diag_indices(side)] += lam
    if P is not None and not P.is_zero:
        H += 2.0 * np.kron(P.matrix, np.eye(r))
    return 0.5 * (H + H.T)


def hessian_vector_product(f: LoraFactors, data: LinearizedDataset, lam: float, P, du, dv):
    """Hessian of :func:`factored_risk` applied to the direction ``(du, dv)``."""
    _check_factors(f, data, P)
    du = np.asarray(du, dtype=float)
    dv = np.asarray(dv, dtype=float)
    m = data.shape.m
    out = predictions(data, f.delta)
    S = assemble_S(loss_gradient(out, data.labels, data.loss) / data.n_samples, data)
    a = feature_inner(data, du @ f.v.T + f.u @ dv.T)
    dS = assemble_S(_loss_hessian_apply(out, data.loss, a) / data.n_samples, data)
    pq = _perturbation_term(P, np.vstack([du, dv]))
    hu = dS @ f.v + S @ dv + lam * du + pq[:m]
    hv = dS.T @ f.u + S.T @ du + lam * dv + pq[m:]
    return hu, hv


class FactoredObjective:
    """Fused evaluator of :func:`factored_risk` and its gradient on stacked ``Q``.

    Holds the packed feature matrix and index maps so that the training loop
    avoids re-validating inputs every step.  Values agree with
    :func:`factored_risk` and :func:`grad_factored`.
    """

    def __init__(self, data: LinearizedDataset, lam: float, P: PsdPerturbation | None = None):
        if P is not None and P.dim != data.shape.m + data.shape.n:
            raise ValueError(f"perturbation side {P.dim} != m + n = {data.shape.m + data.shape.n}")
        self.data = data
        self.lam = float(lam)
        self.P = None if P is None or P.is_zero else P.matrix
        self.m = data.shape.m
        self.A = data.flat_features
        self.single = data.shape.n_blocks == 1
        self.N, self.K = data.n_samples, data.output_dim
        self.ce = data.loss is LossKind.CROSS_ENTROPY
        self.labels = data.labels
        self.rows = np.arange(self.N)

    def _outputs(self, delta):
        packed = delta.ravel() if self.single else self.data.pack(delta)
        return self.data.base_output + (self.A @ packed).reshape(self.N, self.K)

    def _risk_and_dual(self, out, need_grad):
        if self.ce:
            lse = logsumexp(out, axis=1)
            risk = float(np.mean(lse - out[self.rows, self.labels]))
            if not need_grad:
                return risk, None
            g = np.exp(out - lse[:, None])
            g[self.rows, self.labels] -= 1.0
        else:
            r = out - self.labels
            risk = float(np.sum(r * r)) / self.N
            if not need_grad:
                return risk, None
            g = 2.0 * r
        return risk, g / self.N

    def value(self, Q) -> float:
        return self.value_and_grad(Q, need_grad=False)[0]

    def value_and_grad(self, Q, need_grad: bool = True):
        u, v = Q[: self.m], Q[self.m :]
        out = self._outputs(u @ v.T)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite prediction")
        risk, w = self._risk_and_dual(out, need_grad)
        self.last_risk = risk
        val = risk + 0.5 * self.lam * float(np.sum(Q * Q))
        PQ = None
        if self.P is not None:
            PQ = self.P @ Q
            val += float(np.sum(Q * PQ))
        if not need_grad:
            return val, None
        svec = w.ravel() @ self.A
        S = svec.reshape(self.m, -1) if self.single else self.data.unpack(svec)
        g = np.empty_like(Q)
        g[: self.m] = S @ v
        g[self.m :] = S.T @ u
        g += self.lam * Q
        if PQ is not None:
            g += 2.0 * PQ
        return val, g


def random_dataset(
    shape,
    n_samples: int,
    output_dim: int,
    loss="squared_error",
    seed=None,
    feature_scale: float = 1.0,
    base_scale: float = 0.5,
    label_scale: float = 1.0,
) -> LinearizedDataset:
    """Gaussian test instance.

    Block entries are ``N(0, feature_scale^2 / (m n))`` so that each
    ``|G^(j)(X_i)|_F`` is of order ``feature_scale``.  Squared-error targets
    are ``N(0, label_scale^2)``; cross-entropy labels are uniform classes.
    """
    if not isinstance(shape, BlockShape):
        shape = BlockShape(tuple(tuple(b) for b in shape))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = feature_scale / np.sqrt(shape.m * shape.n)
    feats = tuple(scale * rng.standard_normal((n_samples, output_dim, a, b)) for a, b in shape.blocks)
    f0 = base_scale * rng.standard_normal((n_samples, output_dim))
    if LossKind(loss) is LossKind.CROSS_ENTROPY:
        labels = rng.integers(0, output_dim, size=n_samples)
    else:
        labels = label_scale * rng.standard_normal((n_samples, output_dim))
    return LinearizedDataset(shape, feats, f0, labels, loss)
