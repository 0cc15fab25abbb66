"""The z-conditioned forward process q(x_t | x_0, z) and its Gaussian posterior.

Everything here is a function of gamma vectors, so the same code serves
every schedule family.  Kernel variances are written through softplus and
expm1 so they stay accurate when s and t are close.
"""

from dataclasses import dataclass

from . import tensor as T
from .schedules import alpha_sigma_from_gamma


@dataclass
class MarginalParams:
    alpha_t: T.Tensor
    sigma_t: T.Tensor


@dataclass
class PosteriorParams:
    mu_q: T.Tensor
    var_q: T.Tensor


def marginal_params(gamma) -> MarginalParams:
    return MarginalParams(*alpha_sigma_from_gamma(gamma))


def sample_marginal(x0, gamma, eps):
    """x_t = alpha_t(z) * x0 + sigma_t(z) * eps."""
    x0, eps = T.constant(x0), T.constant(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    alpha, sigma = alpha_sigma_from_gamma(gamma)
    return alpha * x0 + sigma * eps


def sample_marginal_snr(x0, gamma, eps):
    """Same marginal written through nu = exp(-gamma)."""
    nu = T.exp(T.neg(gamma))
    return T.sqrt(nu / (1.0 + nu)) * x0 + T.sqrt(1.0 / (1.0 + nu)) * eps


def _check_order(gamma_s, gamma_t):
    if (gamma_s.data > gamma_t.data).any():
        raise ValueError("transition needs s < t (gamma_s <= gamma_t)")


def transition_coeffs(gamma_s, gamma_t):
    """(alpha_{t|s}, sigma^2_{t|s}) of q(x_t | x_s, z).

    alpha_{t|s}^2 = alpha_t^2 / alpha_s^2 = exp(softplus(g_s) - softplus(g_t)) and
    sigma^2_{t|s} = sigma_t^2 - alpha_{t|s}^2 sigma_s^2 = 1 - alpha_{t|s}^2.
    """
    gamma_s, gamma_t = T.constant(gamma_s), T.constant(gamma_t)
    _check_order(gamma_s, gamma_t)
    log_ratio = T.softplus(gamma_s) - T.softplus(gamma_t)
    alpha_ts = T.exp(0.5 * log_ratio)
    var_ts = T.neg(T.expm1(log_ratio))
    return alpha_ts, var_ts


def posterior_params(x_t, x0, gamma_s, gamma_t) -> PosteriorParams:
    """q(x_s | x_t, x_0, z) for s < t."""
    gamma_s, gamma_t = T.constant(gamma_s), T.constant(gamma_t)
    alpha_ts, var_ts = transition_coeffs(gamma_s, gamma_t)
    alpha_s, _ = alpha_sigma_from_gamma(gamma_s)
    var_s = T.sigmoid(gamma_s)
    var_t = T.sigmoid(gamma_t)
    mu = (alpha_ts * var_s / var_t) * x_t + (var_ts * alpha_s / var_t) * x0
    return PosteriorParams(mu, var_s * var_ts / var_t)
