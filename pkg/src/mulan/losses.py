"""The four-term NELBO (recons + diffusion + prior + latent) in nats and bpd.

Randomness is drawn up front into a :class:`NelboNoise` record so the same
draws can be replayed through an independent implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .forward import sample_marginal
from .schedules import alpha_sigma_from_gamma

LN2 = math.log(2.0)
DEFAULT_EVAL_T = 128


@dataclass(frozen=True)
class TimeGrid:
    T: int

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("a discrete time grid needs T >= 2")

    def t(self, i):
        return np.asarray(i) / self.T

    def s(self, i):
        return (np.asarray(i) - 1) / self.T


@dataclass
class NelboNoise:
    latent: np.ndarray | None
    t: np.ndarray  # continuous t in [0, 1], or step index i in {2..T}
    eps: np.ndarray  # (B, d), or (B, T-1, d) for the full discrete sum
    eps_recons: np.ndarray


@dataclass
class NelboTerms:
    recons: T.Tensor
    diffusion: T.Tensor
    prior: T.Tensor
    latent: T.Tensor

    @property
    def total(self):
        return self.recons + self.diffusion + self.prior + self.latent


@dataclass
class NelboBreakdown:
    recons_nats: float
    diffusion_nats: float
    prior_nats: float
    latent_nats: float
    d: int

    @property
    def total_nats(self) -> float:
        return self.recons_nats + self.diffusion_nats + self.prior_nats + self.latent_nats

    @property
    def total_bpd(self) -> float:
        return to_bpd(self.total_nats, self.d)


def to_bpd(nats, d):
    return nats / (d * LN2)


def draw_noise(model, n, rng, mode="continuous", T_steps=None, full_sum=False, stratified=False) -> NelboNoise:
    """Draw order: latent noise, times, diffusion eps, reconstruction eps."""
    _check_mode(mode, T_steps)
    lat = model.latent_noise(n, rng)
    d = model.d
    if mode == "continuous":
        if stratified:
            t = np.mod(rng.random() + np.arange(n) / n, 1.0)
        else:
            t = rng.random(n)
        eps = rng.standard_normal((n, d))
    elif full_sum:
        t = np.arange(2, T_steps + 1)
        eps = rng.standard_normal((n, T_steps - 1, d))
    else:
        t = rng.integers(2, T_steps + 1, size=n)
        eps = rng.standard_normal((n, d))
    return NelboNoise(lat, t, eps, rng.standard_normal((n, d)))


def _check_mode(mode, T_steps):
    if mode == "continuous":
        if T_steps is not None:
            raise ValueError("continuous mode takes no time grid")
    elif mode == "discrete":
        if T_steps is None:
            raise ValueError("discrete mode needs a time grid T")
        TimeGrid(T_steps)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")


def _cast(a, like):
    return np.asarray(a, dtype=like.dtype)


def loss_prior(model, P, x0, z):
    """KL(q(x_1 | x0, z) || N(0, I)) per example."""
    n = x0.shape[0]
    g1 = model.gamma(P, z, np.ones(n), x0.dtype).gamma
    var1 = T.sigmoid(g1)
    log_var1 = T.log_sigmoid(g1)
    mean_sq = T.sigmoid(T.neg(g1)) * T.square(x0)
    return 0.5 * T.sum(mean_sq + var1 - 1.0 - log_var1, axis=-1)


def loss_recons(model, P, x0, z, eps, t0=0.0):
    """-log N(x0; x0_hat(x_t0), sigma_dec^2 I) from one draw of x_t0."""
    n = x0.shape[0]
    g = model.gamma(P, z, np.full(n, t0), x0.dtype).gamma
    x_t = sample_marginal(x0, g, _cast(eps, x0))
    x0_hat = model.predict_x0(P, x_t, z, g)
    sd = model.cfg.sigma_dec
    nll = 0.5 * math.log(2 * math.pi * sd * sd) + T.square(x0 - x0_hat) / (2 * sd * sd)
    return T.sum(nll, axis=-1)


def loss_diffusion_continuous(model, P, x0, z, t, eps):
    """1/2 (eps - eps_hat)^T diag(dgamma/dt) (eps - eps_hat) at one t per example."""
    g = model.gamma(P, z, t, x0.dtype)
    eps = T.Tensor(_cast(eps, x0))
    x_t = sample_marginal(x0, g.gamma, eps)
    eps_hat = model.predict_eps(P, x_t, z, g.gamma)
    return 0.5 * T.sum(g.dgamma_dt * T.square(eps - eps_hat), axis=-1)


def _repeat_rows(x, reps):
    """(B, ...) -> (B * reps, ...), each row repeated ``reps`` times in place."""
    return None if x is None else T.repeat_rows(x, reps)


def step_kl_eps(model, P, x0, z, i, eps, T_steps):
    """Exact per-step KL in eps-space: 1/2 sum expm1(g_t - g_s) (eps - eps_hat)^2."""
    grid = TimeGrid(T_steps)
    g_t = model.gamma(P, z, grid.t(i), x0.dtype).gamma
    g_s = model.gamma(P, z, grid.s(i), x0.dtype).gamma
    eps = T.Tensor(_cast(eps, x0))
    x_t = sample_marginal(x0, g_t, eps)
    eps_hat = model.predict_eps(P, x_t, z, g_t)
    return 0.5 * T.sum(T.expm1(g_t - g_s) * T.square(eps - eps_hat), axis=-1)


def loss_diffusion_discrete(model, P, x0, z, T_steps, i=None, eps=None, full_sum=False):
    """Diffusion term of the T-step bound.

    Single-step mode returns the unbiased ``(T - 1) * KL_i`` for the drawn
    step ``i`` in {2..T}; ``full_sum`` adds all T - 1 steps, with ``eps`` of
    shape ``(B, T-1, d)``.
    """
    TimeGrid(T_steps)
    if not full_sum:
        return (T_steps - 1) * step_kl_eps(model, P, x0, z, np.asarray(i), eps, T_steps)
    n, d = x0.shape
    steps = T_steps - 1
    idx = np.tile(np.arange(2, T_steps + 1), n)
    xr = _repeat_rows(x0, steps)
    zr = _repeat_rows(z, steps)
    kl = step_kl_eps(model, P, xr, zr, idx, np.asarray(eps).reshape(n * steps, d), T_steps)
    return T.sum(kl.reshape(n, steps), axis=-1)


def nelbo_terms(model, P, x0, noise: NelboNoise, mode="continuous", T_steps=None) -> NelboTerms:
    _check_mode(mode, T_steps)
    x0 = T.constant(x0)
    z, latent_kl = model.posterior_latent(P, x0, noise.latent)
    if mode == "continuous":
        diff = loss_diffusion_continuous(model, P, x0, z, noise.t, noise.eps)
        t0 = 0.0
    else:
        full = np.ndim(noise.eps) == 3
        diff = loss_diffusion_discrete(model, P, x0, z, T_steps, i=noise.t, eps=noise.eps, full_sum=full)
        t0 = 1.0 / T_steps
    recons = loss_recons(model, P, x0, z, noise.eps_recons, t0)
    prior = loss_prior(model, P, x0, z)
    return NelboTerms(recons, diff, prior, latent_kl)


def breakdown(terms: NelboTerms, d) -> NelboBreakdown:
    return NelboBreakdown(
        float(np.mean(terms.recons.data, dtype=np.float64)),
        float(np.mean(terms.diffusion.data, dtype=np.float64)),
        float(np.mean(terms.prior.data, dtype=np.float64)),
        float(np.mean(terms.latent.data, dtype=np.float64)),
        d,
    )


def nelbo(model, P, x0, rng=None, mode="continuous", T_steps=None, full_sum=False, noise=None) -> NelboBreakdown:
    """Batch-mean NELBO breakdown.  Discrete evaluation conventionally uses T=128."""
    x0 = T.constant(x0)
    if noise is None:
        if rng is None:
            raise ValueError("nelbo needs an rng or pre-drawn noise")
        noise = draw_noise(model, x0.shape[0], rng, mode, T_steps, full_sum)
    return breakdown(nelbo_terms(model, P, x0, noise, mode, T_steps), model.d)


def per_example_bpd(terms: NelboTerms, d) -> np.ndarray:
    return to_bpd(np.asarray(terms.total.data, dtype=np.float64), d)


def gauss_legendre_01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def diffusion_quadrature(model, P, x0, z, eps, n_nodes=1024):
    """Gauss-Legendre quadrature over t of the continuous diffusion integrand
    for fixed (x0, z, eps); returns per-example nats."""
    x0 = T.constant(x0)
    n, d = x0.shape
    nodes, weights = gauss_legendre_01(n_nodes)
    xr = _repeat_rows(x0, n_nodes)
    zr = _repeat_rows(z, n_nodes)
    er = np.repeat(np.asarray(eps), n_nodes, axis=0)
    tt = np.tile(nodes, n)
    vals = loss_diffusion_continuous(model, P, xr, zr, tt, er).data.reshape(n, n_nodes)
    return vals.astype(np.float64) @ weights
