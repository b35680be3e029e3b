import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lora_ntk.model import LoraFactors, PsdPerturbation, random_dataset

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(rng, loss=None, max_mn=8, max_k=3, max_n=6, blocks=None):
    """Small random dataset plus random factors and perturbation."""
    if loss is None:
        loss = "cross_entropy" if rng.random() < 0.5 else "squared_error"
    K = int(rng.integers(2 if loss == "cross_entropy" else 1, max_k + 1))
    N = int(rng.integers(1, max_n + 1))
    if blocks is None:
        T = int(rng.integers(1, 3))
        blocks = []
        for _ in range(T):
            blocks.append((int(rng.integers(1, max_mn // T + 1)), int(rng.integers(1, max_mn // T + 1))))
    data = random_dataset(blocks, N, K, loss, seed=rng)
    return data


def random_factors(rng, data, r=None, scale=0.5):
    r = int(rng.integers(1, 4)) if r is None else r
    u = scale * rng.standard_normal((data.shape.m, r))
    v = scale * rng.standard_normal((data.shape.n, r))
    return LoraFactors(u, v)


def random_psd(rng, dim, eps=0.5):
    A = rng.standard_normal((dim, dim))
    P = A @ A.T
    P *= 0.9 * eps / np.linalg.norm(P)
    return PsdPerturbation(0.5 * (P + P.T), eps)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
