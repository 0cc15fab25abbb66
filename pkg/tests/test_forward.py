import math

import numpy as np
import pytest

from mulan import forward as F
from mulan import tensor as T


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def G(*v):
    return T.Tensor(np.array(v, dtype=np.float64))


def test_marginal_examples(rng):
    x0 = rng.standard_normal(4)
    eps = rng.standard_normal(4)
    g = G(*[-13.30] * 4)
    xt = F.sample_marginal(x0, g, eps).data
    sigma = math.sqrt(sig(-13.30))
    assert sigma == pytest.approx(1.29402e-3, rel=1e-4)
    assert np.allclose(xt, math.sqrt(sig(13.30)) * x0 + sigma * eps)
    assert np.allclose(F.sample_marginal(x0, g, np.zeros(4)).data, math.sqrt(sig(13.3)) * x0)
    assert np.allclose(F.sample_marginal(x0, G(0, 0, 0, 0), eps).data, math.sqrt(0.5) * (x0 + eps))
    with pytest.raises(ValueError):
        F.sample_marginal(x0, g, np.zeros(3))


def test_marginal_params_variance_preserving():
    mp = F.marginal_params(G(-13.3, -2.0, 0.0, 5.0))
    assert np.allclose(mp.alpha_t.data**2 + mp.sigma_t.data**2, 1.0)


def test_snr_form_matches(rng):
    x0, eps = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    g = T.Tensor(rng.uniform(-13.3, 5.0, (5, 3)))
    assert np.allclose(F.sample_marginal(x0, g, eps).data, F.sample_marginal_snr(x0, g, eps).data, atol=1e-5)


def test_transition_coeffs_scalar_linear():
    gmin, gmax = -13.30, 5.0
    gs, gt = gmin + 0.4 * (gmax - gmin), gmin + 0.6 * (gmax - gmin)
    a_ts, v_ts = F.transition_coeffs(G(gs), G(gt))
    a_s, a_t = math.sqrt(sig(-gs)), math.sqrt(sig(-gt))
    ref_a = a_t / a_s
    ref_v = sig(gt) - ref_a**2 * sig(gs)
    assert a_ts.item() == pytest.approx(ref_a, rel=1e-12)
    assert v_ts.item() == pytest.approx(ref_v, rel=1e-10)
    # composition identity
    assert a_ts.item() ** 2 * sig(gs) + v_ts.item() == pytest.approx(sig(gt), rel=1e-12)


def test_transition_degenerate_step():
    a_ts, v_ts = F.transition_coeffs(G(1.0), G(1.0 + 1e-9))
    assert a_ts.item() == pytest.approx(1.0, abs=1e-9)
    assert v_ts.item() == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        F.transition_coeffs(G(2.0), G(1.0))


def test_composition_monte_carlo():
    n, r = 100_000, np.random.default_rng(7)
    x0 = np.array([0.7, -1.2, 0.0])
    gs, gt = G(-6.0, -1.0, 2.0), G(-3.0, 1.5, 4.0)
    a_s, s_s = (v.data for v in F.marginal_params(gs).__dict__.values())
    xs = a_s * x0 + s_s * r.standard_normal((n, 3))
    a_ts, v_ts = (v.data for v in F.transition_coeffs(gs, gt))
    xt = a_ts * xs + np.sqrt(v_ts) * r.standard_normal((n, 3))
    a_t, s_t = (v.data for v in F.marginal_params(gt).__dict__.values())
    se_mean = s_t / math.sqrt(n)
    assert np.all(np.abs(xt.mean(0) - a_t * x0) < 3 * se_mean)
    se_var = s_t**2 * math.sqrt(2.0 / n)
    assert np.all(np.abs(xt.var(0) - s_t**2) < 3 * se_var)


def test_variance_preservation_standard_normal_data():
    n, r = 100_000, np.random.default_rng(8)
    x0 = r.standard_normal((n, 2))
    xt = F.sample_marginal(x0, T.Tensor(np.array([-4.0, 1.0])), r.standard_normal((n, 2))).data
    assert np.all(np.abs(xt.mean(0)) < 4 / math.sqrt(n))
    assert np.all(np.abs(xt.var(0) - 1.0) < 4 * math.sqrt(2.0 / n))


def test_posterior_bayes_oracle():
    gs, gt = -2.0, 1.0
    xt, x0 = 0.8, -0.3
    post = F.posterior_params(T.Tensor([xt]), T.Tensor([x0]), G(gs), G(gt))
    # conjugate update: prior x_s ~ N(a_s x0, s_s^2), likelihood x_t | x_s ~ N(a_ts x_s, v_ts)
    a_s, s2_s = math.sqrt(sig(-gs)), sig(gs)
    a_ts = math.sqrt(sig(-gt) / sig(-gs))
    v_ts = sig(gt) - a_ts**2 * s2_s
    prec = 1 / s2_s + a_ts**2 / v_ts
    mean = (a_s * x0 / s2_s + a_ts * xt / v_ts) / prec
    assert post.mu_q.item() == pytest.approx(mean, rel=1e-10)
    assert post.var_q.item() == pytest.approx(1 / prec, rel=1e-10)


def test_posterior_properties(rng):
    gs = T.Tensor(rng.uniform(-13, 0, 6))
    gt = gs + T.Tensor(rng.uniform(0.1, 3, 6))
    post = F.posterior_params(np.zeros(6), np.zeros(6), gs, gt)
    assert np.allclose(post.mu_q.data, 0.0)
    assert np.all(post.var_q.data < sig(gs.data))
    assert np.all(post.var_q.data > 0)


def test_posterior_consistency_monte_carlo():
    """x_s from the posterior then x_t from the kernel reproduces q(x_t | x0)."""
    n, r = 100_000, np.random.default_rng(9)
    x0 = np.array([0.5, -1.0])
    gs, gt = G(-5.0, -1.0), G(-1.0, 2.0)
    a_t, s_t = (v.data for v in F.marginal_params(gt).__dict__.values())
    xt = a_t * x0 + s_t * r.standard_normal((n, 2))
    post = F.posterior_params(xt, np.broadcast_to(x0, (n, 2)), gs, gt)
    xs = post.mu_q.data + np.sqrt(post.var_q.data) * r.standard_normal((n, 2))
    a_s, s_s = (v.data for v in F.marginal_params(gs).__dict__.values())
    assert np.all(np.abs(xs.mean(0) - a_s * x0) < 4 * s_s / math.sqrt(n))
    assert np.all(np.abs(xs.var(0) - s_s**2) < 4 * s_s**2 * math.sqrt(2.0 / n))
