"""Denoiser network, output parameterizations and the reverse transition.

The denoiser sees ``[x_t | time embedding of mean(gamma) | z]``.  Feeding it
the schedule's mean log-SNR instead of raw t keeps its time input
consistent when the schedule is swapped under a frozen network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .forward import posterior_params
from .schedules import alpha_sigma_from_gamma

PARAM_KINDS = ("eps", "v", "x0")
DENOISER_KINDS = ("mlp", "analytic")


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 64
    m: int = 50
    hidden: int = 256
    param_kind: str = "eps"
    temb_dim: int = 16
    kind: str = "mlp"
    # analytic fixture: exact denoiser for N(0, analytic_scale^2 I) data
    analytic_scale: float = 1.0
    gamma_min: float = -13.30
    gamma_max: float = 5.0

    def __post_init__(self):
        if self.param_kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameterization {self.param_kind!r}")
        if self.kind not in DENOISER_KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")


@dataclass
class ReverseTransition:
    mu_p: T.Tensor
    var_p: T.Tensor


def denoiser_init(rng, cfg: DenoiserConfig, out_scale=0.1) -> dict:
    if cfg.kind == "analytic":
        return {}
    sizes = [cfg.d + cfg.temb_dim + cfg.m, cfg.hidden, cfg.hidden, cfg.d]
    return nn.mlp_init(rng, "den", sizes, final_scale=out_scale)


def time_embedding(gamma_bar, cfg: DenoiserConfig):
    """Sinusoidal features of the normalized mean log-SNR, shape (batch, temb_dim)."""
    u = (gamma_bar - cfg.gamma_min) / (cfg.gamma_max - cfg.gamma_min)
    n = cfg.temb_dim // 2
    freqs = (np.pi * 2.0 ** np.linspace(0.0, 6.0, n)).astype(u.dtype)
    phase = u * freqs
    return T.concat([T.sin(phase), T.cos(phase)], axis=-1)


def denoise(params, x_t, z, gamma, cfg: DenoiserConfig):
    """Raw network output; its meaning is fixed by ``cfg.param_kind``."""
    x_t = T.constant(x_t)
    gamma = T.constant(gamma)
    if cfg.kind == "analytic":
        alpha, sigma = alpha_sigma_from_gamma(gamma)
        var = T.square(alpha) * cfg.analytic_scale**2 + T.square(sigma)
        return sigma * x_t / var
    gbar = T.mean(gamma, axis=-1, keepdims=True)
    if gbar.shape[0] != x_t.shape[0]:
        gbar = gbar * np.ones((x_t.shape[0], 1), dtype=gbar.dtype)
    parts = [x_t, time_embedding(gbar, cfg)]
    if cfg.m:
        parts.append(z)
    return nn.mlp_apply(params, "den", T.concat(parts, axis=-1), 3)


def eps_to_x0(x_t, eps_hat, gamma):
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    if np.any(alpha.data < 1e-20):
        raise FloatingPointError("alpha_t underflow in eps -> x0 conversion")
    return (x_t - sigma * eps_hat) / alpha


def v_to_x0(x_t, v_hat, gamma):
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    return alpha * x_t - sigma * v_hat


def x0_to_eps(x_t, x0_hat, gamma):
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    return (x_t - alpha * x0_hat) / sigma


def x0_to_v(x_t, x0_hat, gamma):
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    return (alpha * x_t - x0_hat) / sigma


def v_to_eps(x_t, v_hat, gamma):
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    return sigma * x_t + alpha * v_hat


def output_to_eps(x_t, raw, gamma, kind):
    if kind == "eps":
        return raw
    if kind == "v":
        return v_to_eps(x_t, raw, gamma)
    if kind == "x0":
        return x0_to_eps(x_t, raw, gamma)
    raise ValueError(f"unknown parameterization {kind!r}")


def output_to_x0(x_t, raw, gamma, kind):
    if kind == "eps":
        return eps_to_x0(x_t, raw, gamma)
    if kind == "v":
        return v_to_x0(x_t, raw, gamma)
    if kind == "x0":
        return raw
    raise ValueError(f"unknown parameterization {kind!r}")


def score_from_output(x_t, raw, gamma, kind):
    """Model score of q(x_t | z): -eps/sigma, or -x_t - exp(-gamma/2) v."""
    if kind == "v":
        return T.neg(x_t) - T.exp(-0.5 * gamma) * raw
    if kind in ("eps", "x0"):
        _, sigma = alpha_sigma_from_gamma(gamma)
        return T.neg(output_to_eps(x_t, raw, gamma, kind)) / sigma
    raise ValueError(f"unknown parameterization {kind!r}")


def reverse_transition(x_t, x0_hat, gamma_s, gamma_t) -> ReverseTransition:
    """p(x_s | x_t, z): the forward posterior with x0 replaced by its estimate."""
    post = posterior_params(x_t, x0_hat, gamma_s, gamma_t)
    return ReverseTransition(post.mu_q, post.var_q)


def ancestral_sample(model, params, z, n_steps, rng):
    """Draw x0 by running p(x_s | x_t, z) from t=1 down to t=0.

    ``z`` is ``(n, m)`` (already drawn from the prior).  The last step
    returns the transition mean without noise.
    """
    if n_steps < 2:
        raise ValueError("ancestral sampling needs at least 2 steps")
    z = np.asarray(z, dtype=np.float32)
    n = z.shape[0]
    P = nn.as_tensors(params)
    zt = T.Tensor(z) if model.m else None
    x = T.Tensor(rng.standard_normal((n, model.d)).astype(np.float32))
    for i in range(n_steps, 0, -1):
        t = np.full(n, i / n_steps)
        s = np.full(n, (i - 1) / n_steps)
        g_t = model.gamma(P, zt, t).gamma
        g_s = model.gamma(P, zt, s).gamma
        x0_hat = model.predict_x0(P, x, zt, g_t)
        step = reverse_transition(x, x0_hat, g_s, g_t)
        if i > 1:
            noise = rng.standard_normal(x.shape).astype(np.float32)
            x = step.mu_p + T.sqrt(step.var_p) * noise
        else:
            x = step.mu_p
    return x.data
