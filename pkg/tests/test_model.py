import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lora_ntk.landscape import toy_instance
from lora_ntk.model import (
    BlockShape,
    LinearizedDataset,
    LinearizedSample,
    LoraFactors,
    PsdPerturbation,
    FactoredObjective,
    assemble_S,
    dual_weights,
    empirical_risk,
    factored_risk,
    grad_factored,
    hessian_factored,
    hessian_vector_product,
    nuclear_norm,
    predict,
    predictions,
    random_dataset,
    regularized_risk,
)

from conftest import random_factors, random_instance, random_psd

seeds = st.integers(0, 2**32 - 1)


def _flat(f):
    return np.concatenate([f.u.ravel(), f.v.ravel()])


def _fd_grad(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------- types


def test_block_shape_totals_and_validation():
    s = BlockShape(((2, 3), (1, 4)))
    assert (s.m, s.n, s.n_blocks) == (3, 7, 2)
    with pytest.raises(ValueError):
        BlockShape(())
    with pytest.raises(ValueError):
        BlockShape(((0, 2),))


def test_block_shape_dense_round_trip(rng):
    s = BlockShape(((2, 3), (1, 2)))
    blocks = (rng.standard_normal((2, 3)), rng.standard_normal((1, 2)))
    dense = s.to_dense(blocks)
    assert dense.shape == (3, 5)
    assert np.all(dense[:2, 3:] == 0) and np.all(dense[2:, :3] == 0)
    back = s.from_dense(dense)
    assert all(np.array_equal(a, b) for a, b in zip(blocks, back))


def test_dataset_rejects_bad_inputs():
    shape = BlockShape(((2, 2),))
    G = np.zeros((3, 2, 2, 2))
    with pytest.raises(ValueError):
        LinearizedDataset(shape, (G,), np.zeros((3, 2)), np.array([0, 1, 2]), "cross_entropy")
    with pytest.raises(ValueError):
        LinearizedDataset(shape, (G,), np.zeros((3, 1)), np.zeros((3, 1)), "squared_error")
    with pytest.raises(ValueError):
        LinearizedDataset(shape, (G[:, :1],), np.zeros((3, 1)), np.zeros(3, dtype=int), "cross_entropy")
    f0 = np.zeros((3, 2))
    f0[0, 0] = np.inf
    with pytest.raises(ValueError):
        LinearizedDataset(shape, (G,), f0, np.zeros((3, 2)), "squared_error")


def test_dataset_is_read_only(rng):
    d = random_dataset([(2, 2)], 3, 2, seed=rng)
    with pytest.raises(ValueError):
        d.features[0][0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        d.labels[0, 0] = 1.0


def test_samples_round_trip(rng):
    d = random_dataset([(2, 3), (2, 1)], 4, 2, "cross_entropy", seed=rng)
    d2 = LinearizedDataset.from_samples(list(d), d.loss)
    assert np.array_equal(d2.labels, d.labels)
    assert all(np.array_equal(a, b) for a, b in zip(d.features, d2.features))
    assert len(d) == 4 and isinstance(d.sample(0), LinearizedSample)


def test_psd_perturbation_validation():
    with pytest.raises(ValueError):
        PsdPerturbation(np.array([[0.0, 1.0], [0.0, 0.0]]), 10.0)
    with pytest.raises(ValueError):
        PsdPerturbation(np.diag([1.0, -1.0]), 10.0)
    with pytest.raises(ValueError):
        PsdPerturbation(np.eye(2), 1.0)  # |I|_F = sqrt(2) > 1
    with pytest.raises(ValueError):
        PsdPerturbation(np.eye(2), 0.0)  # bound 0 encodes P = 0
    assert PsdPerturbation.zero(3).is_zero


def test_lora_factors_stacking(rng):
    u, v = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    f = LoraFactors(u, v)
    assert f.rank == 2 and f.Q.shape == (7, 2)
    g = LoraFactors.from_stacked(f.Q, 3)
    assert np.array_equal(g.u, u) and np.array_equal(g.delta, u @ v.T)
    with pytest.raises(ValueError):
        LoraFactors(u, v[:, :1])


# ---------------------------------------------------------------- predict / risks


def test_predict_zero_update_returns_base_output(rng):
    d = random_dataset([(3, 2)], 2, 3, seed=rng)
    s = d.sample(1)
    assert np.array_equal(predict(s, np.zeros((3, 2))), d.base_output[1])


def test_predict_toy_a_is_x_plus_y():
    s = toy_instance("a").sample(0)
    assert predict(s, [[0.3, 1.25], [-2.0, 7.0]])[0] == pytest.approx(1.25 - 2.0)


@given(seeds)
def test_block_locality(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset([(2, 3), (3, 2)], 3, 2, seed=rng)
    delta = rng.standard_normal((5, 5))
    other = delta.copy()
    mask = d.shape.to_dense([np.ones((2, 3)), np.ones((3, 2))]) == 0
    other[mask] = rng.standard_normal(mask.sum())
    assert np.array_equal(predictions(d, delta), predictions(d, other))


@given(seeds)
def test_predictions_match_dense_inner_product(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    delta = rng.standard_normal((d.shape.m, d.shape.n))
    dense = np.einsum("nkij,ij->nk", d.dense_features(), delta) + d.base_output
    assert np.allclose(predictions(d, delta), dense, rtol=1e-12, atol=1e-12)
    for i in range(d.n_samples):
        assert np.allclose(predict(d.sample(i), delta), dense[i], rtol=1e-12, atol=1e-12)


def test_toy_risks_at_zero():
    z = np.zeros((2, 2))
    assert empirical_risk(z, toy_instance("a")) == 0.0
    # 1/2 (0 + 4)^2 + 1/2 0^2
    assert empirical_risk(z, toy_instance("b")) == pytest.approx(8.0, abs=1e-15)
    assert empirical_risk([[1, 0], [0, 4]], toy_instance("c")) == pytest.approx(0.0, abs=1e-15)


def test_squared_error_has_no_half_factor():
    shape = BlockShape(((1, 1),))
    d = LinearizedDataset(shape, (np.ones((1, 1, 1, 1)),), np.zeros((1, 1)), np.array([[3.0]]), "squared_error")
    assert empirical_risk([[1.0]], d) == 4.0


def test_cross_entropy_value_matches_manual():
    shape = BlockShape(((1, 1),))
    G = np.array([1.0, -2.0, 0.5]).reshape(1, 3, 1, 1)
    f0 = np.array([[0.1, 0.2, -0.3]])
    d = LinearizedDataset(shape, (G,), f0, np.array([2]), "cross_entropy")
    z = f0[0] + 0.7 * G[0, :, 0, 0]
    expected = -z[2] + np.log(np.sum(np.exp(z)))
    assert empirical_risk([[0.7]], d) == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_is_stable_for_huge_logits():
    shape = BlockShape(((1, 1),))
    G = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
    d = LinearizedDataset(shape, (G,), np.zeros((1, 2)), np.array([0]), "cross_entropy")
    assert empirical_risk([[1e4]], d) == pytest.approx(0.0, abs=1e-300)
    assert empirical_risk([[-1e4]], d) == pytest.approx(2e4)
    w = dual_weights(np.array([[1e4]]), d)
    assert np.all(np.isfinite(w)) and np.allclose(w, 0.0)


def test_regularized_risk_permutation_example():
    shape = BlockShape(((2, 2),))
    d = LinearizedDataset(shape, (np.zeros((1, 1, 2, 2)),), np.zeros((1, 1)), np.zeros((1, 1)), "squared_error")
    assert regularized_risk([[0, 1], [1, 0]], d, 1.0) == pytest.approx(2.0)
    assert regularized_risk([[0, 1], [1, 0]], d, 0.0) == empirical_risk([[0, 1], [1, 0]], d)


@given(seeds)
def test_nuclear_norm_matches_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    delta = rng.standard_normal((int(rng.integers(1, 7)), int(rng.integers(1, 7))))
    # the dilation [[0, d], [d^T, 0]] has eigenvalues +-sigma_i (plus zeros)
    m, n = delta.shape
    dil = np.block([[np.zeros((m, m)), delta], [delta.T, np.zeros((n, n))]])
    ev = np.linalg.eigvalsh(dil)
    assert nuclear_norm(delta) == pytest.approx(ev[ev > 0].sum(), rel=1e-10)


@given(seeds, st.floats(0.0, 1.0))
def test_empirical_risk_is_convex(seed, a):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    d1 = rng.standard_normal((d.shape.m, d.shape.n))
    d2 = rng.standard_normal((d.shape.m, d.shape.n))
    lhs = empirical_risk(a * d1 + (1 - a) * d2, d)
    rhs = a * empirical_risk(d1, d) + (1 - a) * empirical_risk(d2, d)
    assert lhs <= rhs + 1e-12 * (1 + abs(rhs))


# ---------------------------------------------------------------- factored objective


def _balanced(delta, r):
    U, s, Vt = np.linalg.svd(delta, full_matrices=False)
    k = len(s)
    u = np.zeros((delta.shape[0], r))
    v = np.zeros((delta.shape[1], r))
    u[:, : min(k, r)] = (U * np.sqrt(s))[:, :r]
    v[:, : min(k, r)] = (Vt.T * np.sqrt(s))[:, :r]
    return LoraFactors(u, v)


@given(seeds)
def test_balanced_factorization_matches_regularized_risk(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    delta = rng.standard_normal((d.shape.m, d.shape.n))
    f = _balanced(delta, min(d.shape.m, d.shape.n))
    lam = float(rng.uniform(0, 2))
    assert factored_risk(f, d, lam) == pytest.approx(regularized_risk(delta, d, lam), rel=1e-10, abs=1e-12)


@given(seeds)
def test_factorization_dominance(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    f = random_factors(rng, d)
    lam = float(rng.uniform(0, 2))
    assert factored_risk(f, d, lam) >= regularized_risk(f.delta, d, lam) - 1e-12


def test_factored_risk_zero_factors_ignore_perturbation(rng):
    d = random_instance(rng)
    f = LoraFactors(np.zeros((d.shape.m, 2)), np.zeros((d.shape.n, 2)))
    P = random_psd(rng, d.shape.m + d.shape.n)
    assert factored_risk(f, d, 0.7, P) == empirical_risk(np.zeros((d.shape.m, d.shape.n)), d)


@given(seeds)
def test_factored_risk_matches_scalar_recomputation(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    f = random_factors(rng, d)
    P = random_psd(rng, d.shape.m + d.shape.n)
    lam = 0.3
    # independent path: dense features, explicit loops
    G = d.dense_features()
    delta = f.u @ f.v.T
    total = 0.0
    for i in range(d.n_samples):
        z = [d.base_output[i, j] + np.sum(G[i, j] * delta) for j in range(d.output_dim)]
        if d.loss.value == "cross_entropy":
            zmax = max(z)
            total += -z[d.labels[i]] + zmax + np.log(sum(np.exp(x - zmax) for x in z))
        else:
            total += sum((z[j] - d.labels[i, j]) ** 2 for j in range(d.output_dim))
    Q = np.vstack([f.u, f.v])
    expected = total / d.n_samples + lam / 2 * (np.sum(f.u**2) + np.sum(f.v**2)) + np.trace(P.matrix @ Q @ Q.T)
    assert factored_risk(f, d, lam, P) == pytest.approx(expected, rel=1e-10)


def test_fused_objective_matches_reference(rng):
    for _ in range(10):
        d = random_instance(rng)
        f = random_factors(rng, d)
        P = random_psd(rng, d.shape.m + d.shape.n)
        obj = FactoredObjective(d, 0.4, P)
        val, g = obj.value_and_grad(f.Q)
        gu, gv = grad_factored(f, d, 0.4, P)
        assert val == pytest.approx(factored_risk(f, d, 0.4, P), rel=1e-12)
        assert np.allclose(g, np.vstack([gu, gv]), rtol=1e-12, atol=1e-13)


# ---------------------------------------------------------------- dual weights and S


def test_dual_weights_squared_error_zero_at_labels():
    d = toy_instance("c")
    assert np.allclose(dual_weights([[1, 0], [0, 4]], d), 0.0)


@given(seeds)
def test_dual_weights_cross_entropy_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng, loss="cross_entropy")
    w = dual_weights(5 * rng.standard_normal((d.shape.m, d.shape.n)), d)
    assert np.all(np.abs(w.sum(axis=1)) < 1e-12)


def test_assemble_S_examples(rng):
    d = random_dataset([(2, 3)], 1, 1, seed=rng)
    assert np.array_equal(assemble_S(np.zeros((1, 1)), d), np.zeros((2, 3)))
    assert np.allclose(assemble_S(np.array([[2.5]]), d), 2.5 * d.dense_features()[0, 0])
    # toy (c) at zero: sum_i 2 (y_hat_i - Y_i) G_i / N
    c = toy_instance("c")
    S = assemble_S(dual_weights(np.zeros((2, 2)), c), c)
    assert np.allclose(S, (2 / 3) * np.array([[-1.0, 0.0], [0.0, -4.0]]), atol=1e-15)


def test_assemble_S_is_block_diagonal(rng):
    d = random_dataset([(2, 3), (3, 1)], 4, 2, seed=rng)
    S = assemble_S(rng.standard_normal((4, 2)), d)
    assert np.all(S[:2, 3:] == 0) and np.all(S[2:, :3] == 0)


# ---------------------------------------------------------------- derivatives


@given(seeds)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    f = random_factors(rng, d)
    P = random_psd(rng, d.shape.m + d.shape.n)
    lam = float(rng.uniform(0, 1))
    m, r = d.shape.m, f.rank

    def fun(x):
        u = x[: m * r].reshape(m, r)
        v = x[m * r :].reshape(-1, r)
        return factored_risk(LoraFactors(u, v), d, lam, P)

    fd = _fd_grad(fun, _flat(f))
    gu, gv = grad_factored(f, d, lam, P)
    g = np.concatenate([gu.ravel(), gv.ravel()])
    assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_gradient_zero_at_zero_factors(rng):
    d = random_instance(rng)
    f = LoraFactors(np.zeros((d.shape.m, 2)), np.zeros((d.shape.n, 2)))
    gu, gv = grad_factored(f, d, 0.5, random_psd(rng, d.shape.m + d.shape.n))
    assert np.all(gu == 0) and np.all(gv == 0)


def test_gradient_zero_at_toy_a_minimum():
    d = toy_instance("a")
    f = LoraFactors(np.array([[1.0], [0.0]]), np.array([[0.0], [0.0]]))
    gu, gv = grad_factored(f, d, 0.0)
    assert np.all(gu == 0) and np.all(gv == 0)


@given(seeds)
def test_hessian_matches_finite_differences_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    f = random_factors(rng, d)
    P = random_psd(rng, d.shape.m + d.shape.n)
    lam = float(rng.uniform(0, 1))
    m, r = d.shape.m, f.rank

    def grad(x):
        u = x[: m * r].reshape(m, r)
        v = x[m * r :].reshape(-1, r)
        gu, gv = grad_factored(LoraFactors(u, v), d, lam, P)
        return np.concatenate([gu.ravel(), gv.ravel()])

    x0 = _flat(f)
    h = 1e-5
    fd = np.column_stack([(grad(x0 + h * e) - grad(x0 - h * e)) / (2 * h) for e in np.eye(x0.size)])
    H = hessian_factored(f, d, lam, P)
    assert np.linalg.norm(H - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))
    assert np.abs(H - H.T).max() <= 1e-12 * max(1.0, np.abs(H).max())


def test_hessian_with_zero_features_is_lam_plus_kron_P(rng):
    shape = BlockShape(((2, 3),))
    d = LinearizedDataset(shape, (np.zeros((2, 1, 2, 3)),), np.zeros((2, 1)), rng.standard_normal((2, 1)), "squared_error")
    f = random_factors(rng, d, r=2)
    P = random_psd(rng, 5)
    H = hessian_factored(f, d, 0.3, P)
    assert np.allclose(H, 0.3 * np.eye(10) + 2 * np.kron(P.matrix, np.eye(2)), atol=1e-14)


def test_hessian_size_guard():
    shape = BlockShape(((1000, 1100),))
    d = LinearizedDataset(shape, (np.zeros((1, 1, 1000, 1100)),), np.zeros((1, 1)), np.zeros((1, 1)), "squared_error")
    f = LoraFactors(np.zeros((1000, 2)), np.zeros((1100, 2)))
    with pytest.raises(ValueError, match="exceeds"):
        hessian_factored(f, d, 0.1)


@given(seeds)
def test_hessian_vector_product_matches_dense(seed):
    rng = np.random.default_rng(seed)
    d = random_instance(rng)
    f = random_factors(rng, d)
    P = random_psd(rng, d.shape.m + d.shape.n)
    du = rng.standard_normal(f.u.shape)
    dv = rng.standard_normal(f.v.shape)
    hu, hv = hessian_vector_product(f, d, 0.2, P, du, dv)
    H = hessian_factored(f, d, 0.2, P)
    ref = H @ np.concatenate([du.ravel(), dv.ravel()])
    assert np.allclose(np.concatenate([hu.ravel(), hv.ravel()]), ref, rtol=1e-10, atol=1e-10)


def test_hessian_quadratic_form_decomposition(rng):
    """Quadratic form = loss-Hessian term + 2 <S, du dv^T> + lam |dQ|^2 + 2 <P, dQ dQ^T>."""
    d = random_instance(rng, loss="cross_entropy")
    f = random_factors(rng, d, r=2)
    P = random_psd(rng, d.shape.m + d.shape.n)
    lam = 0.25
    du, dv = rng.standard_normal(f.u.shape), rng.standard_normal(f.v.shape)
    dQ = np.vstack([du, dv])
    H = hessian_factored(f, d, lam, P)
    x = np.concatenate([du.ravel(), dv.ravel()])
    out = predictions(d, f.delta)
    p = np.exp(out - out.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    a = np.einsum("nkij,ij->nk", d.dense_features(), du @ f.v.T + f.u @ dv.T)
    loss_term = np.mean(np.sum(p * a * a, axis=1) - np.sum(p * a, axis=1) ** 2)
    S = assemble_S(dual_weights(f, d), d)
    expected = loss_term + 2 * np.sum(S * (du @ dv.T)) + lam * np.sum(dQ**2) + 2 * np.sum(P.matrix * (dQ @ dQ.T))
    assert x @ H @ x == pytest.approx(expected, rel=1e-10)
