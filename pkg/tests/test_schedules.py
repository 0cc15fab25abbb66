import math

import numpy as np
import pytest

from mulan import schedules as S
from mulan import tensor as T
from mulan.model import DiffusionModel, build_config

GMIN, GMAX = -13.30, 5.0


def cfg(family="polynomial", d=4, m=3, **kw):
    return S.ScheduleConfig(family, GMIN, GMAX, d, m, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        S.ScheduleConfig("cubic")
    with pytest.raises(ValueError):
        S.ScheduleConfig(gamma_min=1.0, gamma_max=0.0)


def test_linear_values():
    c = cfg("linear")
    assert np.allclose(S.gamma_linear(c, 0.0).gamma.data, GMIN)
    assert np.allclose(S.gamma_linear(c, 1.0).gamma.data, GMAX)
    out = S.gamma_linear(c, 0.5)
    assert np.allclose(out.gamma.data, -4.15, atol=1e-6)
    assert np.allclose(out.dgamma_dt.data, 18.30, atol=1e-5)
    with pytest.raises(ValueError):
        S.gamma_linear(c, 1.5)
    with pytest.raises(ValueError):
        S.gamma_linear(c, [-0.1, 0.2])


def poly(a, b, d, t, dim=1):
    c = cfg("polynomial", d=dim)
    co = S.PolynomialCoeffs(*(T.Tensor(np.full(dim, v, dtype=np.float64)) for v in (a, b, d)))
    return S.gamma_polynomial(c, co, t)


def test_polynomial_examples():
    assert poly(1.0, 0.0, 0.0, 0.5).gamma.item() == pytest.approx(-12.728125, abs=1e-9)
    for t in (0.0, 0.3, 0.77, 1.0):
        assert poly(0.0, 0.0, 1.0, t).gamma.item() == pytest.approx(GMIN + t * (GMAX - GMIN), abs=1e-12)
    g = poly(0.7, -1.3, 0.4, np.array([0.0, 1.0]))
    assert np.allclose(g.gamma.data[:, 0], [GMIN, GMAX], atol=1e-12)


def test_polynomial_degenerate_guard():
    with pytest.raises(S.DegenerateScheduleError):
        poly(0.0, 0.0, 0.0, 0.5)


def test_polynomial_zero_network_is_degenerate():
    c = cfg("polynomial")
    sch = S.PolynomialSchedule(c)
    params = {k: np.zeros_like(v) for k, v in sch.init_params(np.random.default_rng(0)).items()}
    co = S.polynomial_coeffs(T.Tensor(np.ones((2, c.m))), {k: T.Tensor(v) for k, v in params.items()})
    assert all(np.all(x.data == 0) for x in (co.a, co.b, co.d_coef))
    with pytest.raises(S.DegenerateScheduleError):
        sch(params, T.Tensor(np.ones((2, c.m), dtype=np.float32)), np.array([0.5, 0.5]))


def test_polynomial_coeffs_deterministic():
    c = cfg("polynomial")
    sch = S.PolynomialSchedule(c)
    p1 = sch.init_params(np.random.default_rng(3))
    p2 = sch.init_params(np.random.default_rng(3))
    z = np.random.default_rng(4).standard_normal((5, c.m)).astype(np.float32)
    a = S.polynomial_coeffs(T.Tensor(z), {k: T.Tensor(v) for k, v in p1.items()})
    b = S.polynomial_coeffs(T.Tensor(z), {k: T.Tensor(v) for k, v in p2.items()})
    assert a.a.data.tobytes() == b.a.data.tobytes()


def test_polynomial_initialization_is_near_linear():
    c = cfg("polynomial", d=8, m=6)
    sch = S.PolynomialSchedule(c)
    p = sch.init_params(np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal((4, c.m)).astype(np.float32)
    t = np.array([0.1, 0.4, 0.6, 0.9])
    g = sch(p, T.Tensor(z), t).gamma.data
    lin = GMIN + t[:, None] * (GMAX - GMIN)
    assert np.max(np.abs(g - lin)) < 0.5


def test_scalar_degeneration_d1():
    t = np.linspace(0, 1, 33)
    lin = S.gamma_linear(cfg("linear", d=1), t, np.float64).gamma.data
    assert np.allclose(poly(0.0, 0.0, 2.5, t).gamma.data, lin, atol=1e-12)


def test_monotonic_examples(rng):
    c = cfg("monotonic", d=5, m=3)
    sch = S.MonotonicSchedule(c)
    P = sch.init_params(rng)
    z = T.Tensor(rng.standard_normal((1000, c.m)).astype(np.float32))
    t = np.sort(rng.random(1000))
    out = sch(P, z[:1] * np.ones((1000, 1), dtype=np.float32), t, np.float32)
    assert np.all(np.diff(out.gamma.data, axis=0) >= -1e-4)
    ends = sch(P, z[:2], np.array([0.0, 1.0]))
    assert np.allclose(ends.gamma.data[0], GMIN, atol=1e-5)
    assert np.allclose(ends.gamma.data[1], GMAX, atol=1e-5)


def test_monotonic_derivative_matches_finite_difference(rng):
    c = cfg("monotonic", d=4, m=3)
    sch = S.MonotonicSchedule(c)
    P = {k: v.astype(np.float64) for k, v in sch.init_params(rng).items()}
    z = T.Tensor(rng.standard_normal((20, c.m)))
    t = rng.uniform(0.01, 0.99, 20)
    h = 1e-6
    fd = (sch(P, z, t + h).gamma.data - sch(P, z, t - h).gamma.data) / (2 * h)
    an = sch(P, z, t).dgamma_dt.data
    assert np.max(np.abs(an - fd) / np.maximum(np.abs(an), 1e-3)) < 1e-3


def test_monotonic_without_latent():
    c = cfg("monotonic", d=3, m=0)
    sch = S.MonotonicSchedule(c)
    P = sch.init_params(np.random.default_rng(0))
    out = sch(P, None, np.array([0.0, 0.5, 1.0]))
    assert out.gamma.shape == (3, 3)
    assert np.allclose(out.gamma.data[[0, 2]], [[GMIN] * 3, [GMAX] * 3], atol=1e-5)


def test_alpha_sigma_and_snr():
    a, s = S.alpha_sigma_from_gamma(T.Tensor([0.0]))
    assert a.item() == pytest.approx(math.sqrt(0.5)) and s.item() == pytest.approx(math.sqrt(0.5))
    _, s = S.alpha_sigma_from_gamma(T.Tensor(np.array([-13.30])))
    assert s.item() ** 2 == pytest.approx(1.0 / (1.0 + math.exp(13.30)), rel=1e-9)
    assert s.item() ** 2 == pytest.approx(1.67449e-6, rel=1e-5)
    g = T.Tensor(np.array([-13.3, -5.0, 0.0, 5.0]))
    a, s = S.alpha_sigma_from_gamma(g)
    assert np.allclose(a.data**2 + s.data**2, 1.0, atol=1e-6)
    assert S.snr_from_gamma(T.Tensor([0.0])).item() == 1.0
    assert S.snr_from_gamma(T.Tensor(np.array([5.0]))).item() == pytest.approx(6.7379e-3, rel=1e-4)


@pytest.mark.parametrize("family", ["linear", "polynomial", "monotonic", "scalar"])
def test_snr_decreases_along_t(family):
    mc = build_config(6, m=4, k=2, latent="subset", schedule=family, sched_hidden=8)
    model = DiffusionModel(mc)
    P = {k: T.Tensor(v) for k, v in model.init_params(1).items()}
    z = T.Tensor(np.tile(model.prior_latent(1, np.random.default_rng(0)), (50, 1)))
    nu = S.snr_from_gamma(model.gamma(P, z, np.linspace(0, 1, 50)).gamma).data
    assert np.all(np.diff(nu, axis=0) <= 1e-6 * nu[:-1])


def test_snr_csv(tmp_path):
    path = tmp_path / "nu.csv"
    S.write_snr_csv(path, np.linspace(0, 1, 129), np.ones((129, 3)))
    lines = path.read_text().splitlines()
    assert lines[0] == "t,dim,nu" and len(lines) == 129 * 3 + 1
