import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lora_ntk.landscape import toy_instance
from lora_ntk.model import BlockShape, LoraFactors, empirical_risk, predictions, random_dataset, regularized_risk, factored_risk
from lora_ntk.optim import (
    InitScheme,
    TrainConfig,
    init_factors,
    rank_threshold,
    sample_psd_perturbation,
    train,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(rank=0)
    with pytest.raises(ValueError):
        TrainConfig(step_size=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    assert TrainConfig(init="gaussian").init is InitScheme.GAUSSIAN


# ---------------------------------------------------------------- perturbation


def test_perturbation_is_psd_and_bounded():
    P = sample_psd_perturbation(6, 1e-3, seed=1)
    assert np.linalg.norm(P.matrix) < 1e-3
    assert np.linalg.eigvalsh(P.matrix).min() >= -1e-10 * np.linalg.norm(P.matrix)
    assert np.array_equal(P.matrix, P.matrix.T)


def test_perturbation_deterministic():
    a = sample_psd_perturbation(5, 0.1, seed=42)
    b = sample_psd_perturbation(5, 0.1, seed=42)
    assert np.array_equal(a.matrix, b.matrix)


def test_perturbation_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        sample_psd_perturbation(4, 0.0)


def test_perturbation_full_rank_monte_carlo():
    rng = np.random.default_rng(0)
    ranks = [np.linalg.matrix_rank(sample_psd_perturbation(6, 1.0, rng).matrix, tol=1e-14) for _ in range(10_000)]
    assert min(ranks) == 6


# ---------------------------------------------------------------- init


def test_lora_init_starts_at_zero_update():
    d = random_dataset([(3, 4)], 5, 2, seed=0)
    f = init_factors(TrainConfig(rank=2), d.shape, seed=3)
    assert np.all(f.u == 0) and np.any(f.v != 0)
    assert np.array_equal(predictions(d, f.delta), d.base_output)


def test_gaussian_init_with_zero_scale_is_zero():
    f = init_factors(TrainConfig(rank=3, init="gaussian", sigma_init=0.0), BlockShape(((3, 2),)), seed=1)
    assert np.all(f.Q == 0)


def test_init_reproducible():
    cfg = TrainConfig(rank=2, init="gaussian")
    a = init_factors(cfg, BlockShape(((3, 2),)), seed=7)
    b = init_factors(cfg, BlockShape(((3, 2),)), seed=7)
    assert np.array_equal(a.Q, b.Q)


# ---------------------------------------------------------------- rank threshold


def test_rank_threshold_examples():
    assert rank_threshold(2, 32) == 11
    assert rank_threshold(1, 1) == 2
    assert rank_threshold(1, 3) == 3


@given(st.integers(1, 50), st.integers(1, 2000))
def test_rank_threshold_is_minimal(K, N):
    r = rank_threshold(K, N)
    assert r * (r + 1) // 2 > K * N
    assert (r - 1) * r // 2 <= K * N


def test_rank_threshold_rejects_nonpositive():
    with pytest.raises(ValueError):
        rank_threshold(0, 3)


# ---------------------------------------------------------------- training


TOY = dict(lam=0.0, step_size=0.1, epochs=20_000, tol_grad=1e-10)


@pytest.mark.parametrize("which", ["a", "b"])
def test_toy_rank1_reaches_zero(which):
    d = toy_instance(which)
    tr = train(d, TrainConfig(rank=1, seed=0, **TOY))
    assert tr.converged
    assert empirical_risk(tr.factors.delta, d) < 1e-8


def test_toy_c_rank2_reaches_zero():
    d = toy_instance("c")
    tr = train(d, TrainConfig(rank=2, seed=0, **TOY))
    assert empirical_risk(tr.factors.delta, d) < 1e-8


def test_toy_c_rank1_bounded_away_from_zero():
    d = toy_instance("c")
    for seed in range(3):
        tr = train(d, TrainConfig(rank=1, seed=seed, **TOY))
        assert empirical_risk(tr.factors.delta, d) > 0.3


def test_trace_records_and_monotone_descent():
    d = random_dataset([(3, 3)], 4, 2, "cross_entropy", seed=5)
    tr = train(d, TrainConfig(rank=2, lam=0.05, step_size=5.0, epochs=300, perturb_eps=1e-2, seed=1))
    arr = tr.as_array()
    assert np.array_equal(arr[:, 0], np.arange(len(arr)))
    assert np.all(np.isfinite(arr))
    f = arr[:, 1]
    assert np.all(np.diff(f) <= 64 * np.finfo(float).eps * np.abs(f[:-1]))
    # the recorded unperturbed regularized risk matches a fresh evaluation
    assert arr[-1, 2] == pytest.approx(regularized_risk(tr.factors.delta, d, 0.05), rel=1e-12)
    # factored value is an upper bound on the regularized risk when P = 0 ...
    assert factored_risk(tr.factors, d, 0.05) >= regularized_risk(tr.factors.delta, d, 0.05) - 1e-12


def test_train_deterministic():
    d = random_dataset([(3, 2)], 6, 1, seed=2)
    cfg = TrainConfig(rank=2, lam=0.01, step_size=0.2, epochs=50, batch_size=2, noise_std=1e-3, perturb_eps=1e-3, seed=9)
    a, b = train(d, cfg), train(d, cfg)
    assert np.array_equal(a.as_array(), b.as_array())
    assert np.array_equal(a.factors.Q, b.factors.Q)
    assert np.array_equal(a.perturbation.matrix, b.perturbation.matrix)


def test_minibatch_runs_and_reduces_loss():
    d = random_dataset([(4, 4)], 16, 1, seed=3)
    tr = train(d, TrainConfig(rank=2, lam=0.0, step_size=0.05, epochs=200, batch_size=4, init="gaussian", sigma_init=0.1))
    assert tr.final.factored_risk < tr.records[0].factored_risk


def test_divergence_is_reported():
    d = random_dataset([(4, 4)], 4, 1, seed=3, feature_scale=10.0)
    tr = train(d, TrainConfig(rank=2, step_size=50.0, epochs=500, backtrack=False, init="gaussian", sigma_init=1.0))
    assert tr.diverged
    assert all(np.isfinite(r.factored_risk) for r in tr.records)


def test_rank_mismatch_with_explicit_init():
    d = toy_instance("a")
    with pytest.raises(ValueError):
        train(d, TrainConfig(rank=2), init=LoraFactors(np.zeros((2, 1)), np.ones((2, 1))))
