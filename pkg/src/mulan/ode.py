"""Probability-flow ODE likelihood and dequantized bounds on 8-bit data.

The flow is integrated from data (t ~ 0) to noise (t ~ 1) on the augmented
state ``[x, int div h dt]``; then log p(x_0) = log N(x_1; 0, I) + int div h dt.
All integration runs in float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from . import nn
from . import tensor as T
from .reverse import score_from_output

T_CLAMP = 1e-5
ATOL = 1e-5
RTOL = 1e-5
MIN_STEP = 1e-12

# dequantization constants, used as printed
TN_TAU = 3.0
TN_CORRECTION = 0.01522
IW_Z = 0.9974613
DEQUANT_GAMMA = -13.3
DEQUANT_SCALE = math.exp(-0.5 * 13.3)  # sigma_eps / alpha_eps
LOG_SIGMA_EPS = 0.5 * (DEQUANT_GAMMA + math.log1p(math.exp(DEQUANT_GAMMA)))  # 1/2 (g + softplus(g))
SIGMA_EPS = math.sqrt(1.0 / (1.0 + math.exp(13.3)))

DIVERGENCE_MODES = ("exact", "hutchinson")


class IntegrationError(RuntimeError):
    pass


@dataclass
class FlowCoeffs:
    f: T.Tensor
    g2: T.Tensor


@dataclass
class OdeSolution:
    x_final: np.ndarray
    logdet: np.ndarray
    nfe: int
    accepted: int
    rejected: int


def flow_coeffs(model, P, z, t, dtype=np.float64) -> FlowCoeffs:
    """f = -1/2 sigmoid(gamma) gamma', g^2 = sigmoid(gamma) gamma'."""
    g = model.gamma(P, z, t, dtype)
    g2 = T.sigmoid(g.gamma) * g.dgamma_dt
    return FlowCoeffs(-0.5 * g2, g2)


def flow_field(model, P, x, z, t):
    """dx/dt = f * x - 1/2 g^2 * score(x, z, t)."""
    x = T.constant(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    g = model.gamma(P, z, t, x.dtype)
    g2 = T.sigmoid(g.gamma) * g.dgamma_dt
    raw = model.predict(P, x, z, g.gamma)
    score = score_from_output(x, raw, g.gamma, model.param_kind)
    return -0.5 * g2 * x - 0.5 * g2 * score


def divergence(model, P, x, z, t, mode="exact", probe=None):
    """(h(x), tr dh/dx) for a batch of independent rows.

    Exact mode copies every row d times and pulls back the identity in one
    reverse pass; Hutchinson mode pulls back the given Rademacher probe.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if mode == "exact":
        zr = None if z is None else T.repeat_rows(z, d)
        cot = np.tile(np.eye(d), (n, 1))
        tape = T.Tape()
        xr = tape.watch(np.repeat(x, d, axis=0))
        h = flow_field(model, P, xr, zr, np.repeat(np.broadcast_to(t, (n,)), d))
        if not h.tracked:
            return h.data[::d], np.zeros(n)
        T.backward(tape, T.sum(h * cot))
        jac = tape.grad(xr).reshape(n, d, d)
        return h.data[::d], np.trace(jac, axis1=1, axis2=2)
    if mode == "hutchinson":
        if probe is None:
            raise ValueError("hutchinson mode needs a probe")
        tape = T.Tape()
        xt = tape.watch(x)
        h = flow_field(model, P, xt, z, t)
        if not h.tracked:
            return h.data, np.zeros(n)
        T.backward(tape, T.sum(h * probe))
        return h.data, np.sum(tape.grad(xt) * probe, axis=-1)
    raise ValueError(f"unknown divergence mode {mode!r}")


def rademacher(shape, rng):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _err_norm(err, y_old, y_new, atol, rtol):
    """Largest per-row RMS of the scaled error, so every trajectory meets tolerance."""
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    r = err / scale
    return float(np.max(np.sqrt(np.mean(r * r, axis=-1))))


def _initial_step(field, t0, y0, f0, direction, atol, rtol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = min(1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1, span)
    y1 = y0 + direction * h0 * f0
    f1 = field(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def integrate_rk45(field, y0, t_span=(0.0, 1.0), atol=ATOL, rtol=RTOL, max_steps=100_000) -> OdeSolution:
    """Adaptive Dormand-Prince 5(4) with a PI step controller.

    ``field(t, y)`` maps a ``(B, n)`` state to its time derivative.  Returns
    the final state in ``x_final`` (``logdet`` is left empty; see
    :func:`integrate_flow`).
    """
    t0, t1 = map(float, t_span)
    y = np.array(y0, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if t0 == t1:
        return OdeSolution(y, np.zeros(0), 0, 0, 0)
    direction = 1.0 if t1 > t0 else -1.0
    f = field(t0, y)
    nfe = 1
    h = _initial_step(field, t0, y, f, direction, atol, rtol, abs(t1 - t0))
    nfe += 1
    safety, alpha, beta, min_fac, max_fac = 0.9, 0.7 / 5, 0.4 / 5, 0.2, 10.0
    err_prev = 1e-4
    t = t0
    accepted = rejected = 0
    for _ in range(max_steps):
        remaining = abs(t1 - t)
        if remaining <= 1e-15 * max(1.0, abs(t1)):
            return OdeSolution(y, np.zeros(0), nfe, accepted, rejected)
        h = min(h, remaining)
        if h < MIN_STEP:
            raise IntegrationError(f"step size underflow at t={t:.6g} (h={h:.3g})")
        k = [f]
        for i in range(1, 7):
            yi = y + direction * h * sum(a * kj for a, kj in zip(_A[i], k))
            k.append(field(t + direction * h * _C[i], yi))
        nfe += 6
        y_new = y + direction * h * sum(b * kj for b, kj in zip(_B5, k) if b)
        err = direction * h * sum(e * kj for e, kj in zip(_E, k) if e)
        en = _err_norm(err, y, y_new, atol, rtol)
        if en <= 1.0:
            t = t1 if h == remaining else t + direction * h
            y, f = y_new, k[6]
            accepted += 1
            if en == 0.0:
                fac = max_fac
            else:
                fac = min(max_fac, max(min_fac, safety * en ** -alpha * err_prev ** beta))
            err_prev = max(en, 1e-4)
            h *= fac
        else:
            rejected += 1
            h *= max(min_fac, safety * en ** -alpha)
    raise IntegrationError(f"no convergence within {max_steps} steps")


def _prep(model, P, z):
    P64 = nn.as_tensors(nn.cast_params({k: (v.data if isinstance(v, T.Tensor) else v) for k, v in P.items()}, np.float64))
    z64 = None if z is None else T.Tensor(np.asarray(z.data if isinstance(z, T.Tensor) else z, dtype=np.float64))
    return P64, z64


def integrate_flow(model, P, x0, z=None, divergence_mode="exact", rng=None, t_span=(T_CLAMP, 1.0 - T_CLAMP),
                   atol=ATOL, rtol=RTOL) -> OdeSolution:
    """Carry ``[x, int div h dt]`` along the flow; one fixed probe per trajectory."""
    P64, z64 = _prep(model, P, z)
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    probe = rademacher((n, d), rng) if divergence_mode == "hutchinson" else None
    if divergence_mode not in DIVERGENCE_MODES:
        raise ValueError(f"unknown divergence mode {divergence_mode!r}")

    def field(t, y):
        h, div = divergence(model, P64, y[:, :d], z64, np.full(n, t), divergence_mode, probe)
        return np.concatenate([h, div[:, None]], axis=1)

    y0 = np.concatenate([x0, np.zeros((n, 1))], axis=1)
    sol = integrate_rk45(field, y0, t_span, atol, rtol)
    return OdeSolution(sol.x_final[:, :d], sol.x_final[:, d], sol.nfe, sol.accepted, sol.rejected)


def flow_sample(model, P, z, rng, n, atol=ATOL, rtol=RTOL):
    """Deterministic samples: x_1 ~ N(0, I) pushed back along the flow to t ~ 0."""
    P64, z64 = _prep(model, P, z)
    x1 = rng.standard_normal((n, model.d))

    def field(t, y):
        return flow_field(model, P64, T.Tensor(y), z64, np.full(n, t)).data

    return integrate_rk45(field, x1, (1.0 - T_CLAMP, T_CLAMP), atol, rtol).x_final


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * np.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * math.log(2 * math.pi)


@dataclass
class OdeLikelihood:
    log_px: np.ndarray  # per-example nats (a lower bound when a latent is used)
    nfe: int


def log_likelihood_ode(model, P, x0, rng, K=1, divergence_mode="exact", atol=ATOL, rtol=RTOL) -> OdeLikelihood:
    """E_{q(z|x0)}[log p(x0 | z)] - KL(q(z|x0) || p(z)), averaged over K draws of z."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    total = np.zeros(n)
    nfe = 0
    for _ in range(K):
        noise = model.latent_noise(n, rng)
        z, kl = model.posterior_latent(_prep(model, P, None)[0], T.Tensor(x0), noise)
        sol = integrate_flow(model, P, x0, z, divergence_mode, rng, atol=atol, rtol=rtol)
        total += std_normal_logpdf(sol.x_final) + sol.logdet - np.asarray(kl.data, dtype=np.float64)
        nfe += sol.nfe
    return OdeLikelihood(total / K, nfe)


def nats_to_bpd(log_px, d):
    return -np.asarray(log_px) / (d * math.log(2.0))


# -- dequantization ---------------------------------------------------------


def quantize(x, bits=8):
    """Snap values in [-1, 1] to the 2^bits-level grid."""
    levels = 2**bits - 1
    return np.round((np.clip(x, -1.0, 1.0) + 1.0) * 0.5 * levels) / levels * 2.0 - 1.0


def tn_draws(shape, rng, tau=TN_TAU):
    return _accel.truncated_normal(shape, tau, rng)


def log_q_tn(eps):
    """Truncated N(0, I) density on (-tau, tau)^d with normalizer Z per dimension."""
    eps = np.asarray(eps, dtype=np.float64)
    d = eps.shape[-1]
    return -0.5 * np.sum(eps * eps, axis=-1) - 0.5 * d * math.log(2 * math.pi) - d * math.log(IW_Z)


def dequant_bound_tn(log_p, x0, rng=None, eps=None):
    """E[log p(x0 + c eps)] + d/2 (1 + log(2 pi sigma_eps^2)) - 0.01522 d, one draw per example."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[-1]
    if eps is None:
        eps = tn_draws(x0.shape, rng)
    lp = np.asarray(log_p(x0 + DEQUANT_SCALE * eps), dtype=np.float64)
    return lp + 0.5 * d * (1.0 + math.log(2 * math.pi * SIGMA_EPS**2)) - TN_CORRECTION * d


def dequant_bound_iw(log_p, x0, K=1, rng=None, eps=None):
    """log mean_k p(x0 + c eps_k) / q(eps_k) + d log sigma_eps.

    ``eps`` may be given as ``(K, n, d)`` to share draws with another bound.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    if eps is None:
        eps = tn_draws((K, n, d), rng)
    eps = np.asarray(eps, dtype=np.float64)
    K = eps.shape[0]
    logw = np.stack([np.asarray(log_p(x0 + DEQUANT_SCALE * e), dtype=np.float64) - log_q_tn(e) for e in eps])
    top = logw.max(axis=0)
    lme = top + np.log(np.mean(np.exp(logw - top), axis=0))
    return lme + d * LOG_SIGMA_EPS


def write_eval_csv(path, bpd, nfe, mode):
    bpd = np.atleast_1d(bpd)
    nfe = np.broadcast_to(np.asarray(nfe), bpd.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "bpd", "nfe", "mode"])
        for i, (b, k) in enumerate(zip(bpd, nfe)):
            w.writerow([i, repr(float(b)), int(k), mode])
