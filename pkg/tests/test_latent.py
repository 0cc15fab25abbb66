import itertools
import math

import numpy as np
import pytest
from scipy import stats

from mulan import latent as L
from mulan import nn
from mulan import tensor as T


def test_config_defaults_and_validation():
    c = L.LatentConfig()
    assert (c.m, c.k) == (50, 15)
    assert c.width == 200
    with pytest.raises(ValueError):
        L.LatentConfig(kind="subset", m=3, k=4)
    with pytest.raises(ValueError):
        L.SogConfig(tau=0.0)
    with pytest.raises(ValueError):
        L.SogConfig(s_terms=0)


def test_zero_encoder_gives_standard_posterior():
    c = L.LatentConfig("gaussian", m=4, k=1, d=6)
    params = {k: np.zeros_like(v) for k, v in L.encoder_init(np.random.default_rng(0), c).items()}
    post = L.encode(T.Tensor(np.ones((2, 6))), nn.as_tensors(params), c)
    assert np.all(post.mu.data == 0) and np.all(post.log_var.data == 0)
    assert np.allclose(L.kl_gaussian(post).data, 0.0)


def test_kl_gaussian_values():
    post = L.GaussianLatentPosterior(T.Tensor([1.0]), T.Tensor([0.0]))
    assert L.kl_gaussian(post).item() == pytest.approx(0.5)


def test_kl_gaussian_monte_carlo():
    r = np.random.default_rng(3)
    mu, lv = np.array([0.3, -0.8]), np.array([-0.5, 0.4])
    kl = L.kl_gaussian(L.GaussianLatentPosterior(T.Tensor(mu), T.Tensor(lv))).item()
    n = 1_000_000
    z = mu + np.exp(0.5 * lv) * r.standard_normal((n, 2))
    logq = stats.norm.logpdf(z, mu, np.exp(0.5 * lv)).sum(1)
    logp = stats.norm.logpdf(z).sum(1)
    diff = logq - logp
    assert abs(diff.mean() - kl) < 3 * diff.std() / math.sqrt(n)


def test_kl_subset_uniform():
    assert L.kl_subset_uniform(T.Tensor(np.zeros(7))).item() == pytest.approx(0.0, abs=1e-7)
    assert L.kl_subset_uniform(T.Tensor(np.array([60.0, 0.0]))).item() == pytest.approx(math.log(2), rel=1e-6)
    theta = np.random.default_rng(0).standard_normal(9)
    p = np.exp(theta) / np.exp(theta).sum()
    naive = 0.0
    for pi in p:
        naive += pi * math.log(len(p) * pi)
    val = L.kl_subset_uniform(T.Tensor(theta)).item()
    assert val >= 0 and val == pytest.approx(naive, rel=1e-6)


def test_sog_mean_k1():
    # k=1: sum of Exp(s) terms minus log S, mean H_S - log S (tends to Euler's gamma)
    n, S = 1_000_000, 10
    draws = L.sog_noise(L.SogConfig(1.0, S), 1, (n,), np.random.default_rng(0))
    expected = sum(1.0 / s for s in range(1, S + 1)) - math.log(S)
    assert abs(draws.mean() - expected) < 4 * draws.std() / math.sqrt(n)


def test_sog_sums_to_gumbel_for_large_s():
    draws = L.sog_noise(L.SogConfig(1.0, 300), 4, (5_000, 4), np.random.default_rng(1))
    assert stats.kstest(draws.sum(1), stats.gumbel_r.cdf).statistic < 0.03


def test_sog_temperature_and_determinism():
    a = L.sog_noise(L.SogConfig(1e-9, 10), 3, (5, 4), np.random.default_rng(1))
    assert np.abs(a).max() < 1e-6
    b1 = L.sog_noise(L.SogConfig(), 3, (5, 4), np.random.default_rng(2))
    b2 = L.sog_noise(L.SogConfig(), 3, (5, 4), np.random.default_rng(2))
    assert b1.tobytes() == b2.tobytes()


def test_topk_examples():
    assert np.array_equal(L.topk_khot([3, 1, 2], 2), [1, 0, 1])
    assert np.array_equal(L.topk_khot([3, 1, 2], 3), [1, 1, 1])
    assert np.array_equal(L.topk_khot([1, 2, 2, 0], 1), [0, 1, 0, 0])
    assert np.array_equal(L.topk_khot([5, 1, 1, 1], 2), [1, 1, 0, 0])
    with pytest.raises(ValueError):
        L.topk_khot([1, 2], 3)


def test_sample_subset_exactly_k(rng):
    post = L.SubsetLatentPosterior(T.Tensor(rng.standard_normal((20, 8))), 3)
    for mode in ("gumbel", "sog"):
        z = L.sample_subset(post, rng, mode).data
        assert np.all(z.sum(-1) == 3) and set(np.unique(z)) <= {0.0, 1.0}


def test_zero_temperature_is_deterministic_topk(rng):
    theta = rng.standard_normal((4, 6))
    z = L.sample_subset(L.SubsetLatentPosterior(T.Tensor(theta), 2), rng, "sog", L.SogConfig(1e-9, 10)).data
    assert np.array_equal(z, L.topk_khot(theta, 2))


def test_subset_prob_oracle_examples():
    for S in itertools.combinations(range(4), 2):
        s = np.zeros(4)
        s[list(S)] = 1
        assert L.subset_prob_oracle(s, np.ones(4)) == pytest.approx(1 / 6)
    w = np.array([1.0, 2.0, 3.0, 4.0])
    assert L.subset_prob_oracle([0, 0, 1, 0], w) == pytest.approx(0.3)
    assert L.subset_prob_oracle([0, 1, 1], [1, 2, 3]) == pytest.approx(0.583333333, rel=1e-8)
    with pytest.raises(ValueError):
        L.subset_prob_oracle(np.ones(11), np.ones(11))


def test_straight_through_contract(rng):
    """dL/dtheta equals dL/dz at the sampled z."""
    theta0 = rng.standard_normal((3, 6))
    w = rng.standard_normal((3, 6))
    noise = L.gumbel_noise((3, 6), rng)
    tape = T.Tape()
    theta = tape.watch(theta0)
    z = L.sample_subset(L.SubsetLatentPosterior(theta, 2), None, noise=noise)
    loss = T.sum(T.square(z * w + 0.5))
    T.backward(tape, loss)
    manual = 2 * (z.data * w + 0.5) * w
    assert np.allclose(tape.grad(theta), manual)


def test_sog_monotone_marginals():
    r = np.random.default_rng(5)
    theta = np.array([0.2, -0.1, 0.4, 0.0, -0.3])
    base = None
    for bump in (0.0, 0.5, 1.0):
        th = theta.copy()
        th[1] += bump
        post = L.SubsetLatentPosterior(T.Tensor(np.tile(th, (100_000, 1))), 2)
        p1 = L.sample_subset(post, r, "sog").data[:, 1].mean()
        if base is not None:
            assert p1 >= base - 3 * math.sqrt(0.25 / 100_000)
        base = p1


def test_prior_sampling_shapes(rng):
    assert L.sample_prior(L.LatentConfig("none", 0, 1, 4), 3, rng).shape == (3, 0)
    g = L.sample_prior(L.LatentConfig("gaussian", 5, 1, 4), 3, rng)
    assert g.shape == (3, 5)
    s = L.sample_prior(L.LatentConfig("subset", 5, 2, 4), 30, rng)
    assert np.all(s.sum(1) == 2)
