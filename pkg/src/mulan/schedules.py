"""Noise schedules gamma(z, t) and the diffusion coefficients derived from them.

Every family returns a :class:`GammaOutput` holding gamma and d(gamma)/dt,
both shaped ``(batch, d)`` (or ``(d,)`` for scalar t).  gamma is pinned to
``gamma_min`` at t=0 and ``gamma_max`` at t=1 and is nondecreasing in t,
so the signal-to-noise ratio exp(-gamma) only ever falls.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T

FAMILIES = ("linear", "polynomial", "monotonic", "scalar")
DEGENERATE_EPS = 1e-8

# coefficients of the z-independent scalar polynomial used as the "scalar"
# swap target: f'(t) = (2t^2 - 2t + 1)^2 > 0 on [0, 1]
SCALAR_COEFFS = (2.0, -2.0, 1.0)


class DegenerateScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    family: str = "polynomial"
    gamma_min: float = -13.30
    gamma_max: float = 5.0
    d: int = 64
    m: int = 50
    hidden: int = 64
    mono_hidden: int = 8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}; expected one of {FAMILIES}")
        if not self.gamma_min < self.gamma_max:
            raise ValueError("gamma_min must be below gamma_max")

    @property
    def span(self) -> float:
        return self.gamma_max - self.gamma_min


@dataclass
class GammaOutput:
    gamma: T.Tensor
    dgamma_dt: T.Tensor


@dataclass
class PolynomialCoeffs:
    a: T.Tensor
    b: T.Tensor
    d_coef: T.Tensor


def time_column(t, dtype=np.float32) -> np.ndarray:
    """Validate t in [0, 1]; vectors become a ``(batch, 1)`` column."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError("t must lie in [0, 1]")
    if arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim > 1:
        raise ValueError("t must be a scalar or a 1-D batch of times")
    return arr.astype(dtype)


def alpha_sigma_from_gamma(gamma):
    """alpha = sqrt(sigmoid(-gamma)), sigma = sqrt(sigmoid(gamma))."""
    return T.sqrt(T.sigmoid(T.neg(gamma))), T.sqrt(T.sigmoid(gamma))


def snr_from_gamma(gamma):
    return T.exp(T.neg(gamma))


def gamma_linear(cfg: ScheduleConfig, t, dtype=np.float32) -> GammaOutput:
    tc = time_column(t, dtype)
    ones = np.ones(tc.shape[:-1] + (cfg.d,) if tc.ndim else (cfg.d,), dtype=dtype)
    gamma = cfg.gamma_min + tc * cfg.span * ones
    return GammaOutput(T.Tensor(gamma.astype(dtype)), T.Tensor((cfg.span * ones).astype(dtype)))


def polynomial_coeffs(z, params, prefix="sched") -> PolynomialCoeffs:
    """Coefficient network: 2 swish hidden layers, linear head of 3*d values."""
    out = nn.mlp_apply(params, prefix, z, 3)
    d = out.shape[-1] // 3
    return PolynomialCoeffs(out[..., :d], out[..., d : 2 * d], out[..., 2 * d :])


def _poly_f(a, b, dc, t):
    # f(t) = a^2/5 t^5 + ab/2 t^4 + (b^2 + 2ad)/3 t^3 + bd t^2 + d^2 t
    aa, ab, bb, ad, bd, dd = a * a, a * b, b * b, a * dc, b * dc, dc * dc
    return (
        aa * (t**5 / 5.0)
        + ab * (t**4 / 2.0)
        + (bb + 2.0 * ad) * (t**3 / 3.0)
        + bd * (t**2)
        + dd * t
    )


def gamma_polynomial(cfg: ScheduleConfig, coeffs: PolynomialCoeffs, t) -> GammaOutput:
    a, b, dc = coeffs.a, coeffs.b, coeffs.d_coef
    tc = time_column(t, a.dtype)
    one = np.ones_like(tc)
    f = _poly_f(a, b, dc, tc)
    f1 = _poly_f(a, b, dc, one)
    if np.any(f1.data < DEGENERATE_EPS):
        raise DegenerateScheduleError(f"polynomial normalizer f(1) fell below {DEGENERATE_EPS}")
    root = a * (tc * tc) + b * tc + dc
    scale = T.Tensor(np.asarray(cfg.span, dtype=a.dtype))
    gamma = cfg.gamma_min + scale * (f / f1)
    return GammaOutput(gamma, scale * (T.square(root) / f1))


def _mono_forward(params, gates, t, prefix, tangent=True):
    """Per-dimension monotone net; returns (g, dg/dt) by forward-mode tangents,
    or (g, None) when ``tangent`` is False."""
    w1 = T.softplus(params[f"{prefix}.w1"])  # (d, H)
    w2 = T.softplus(params[f"{prefix}.w2"])  # (d, H, H)
    w3 = T.softplus(params[f"{prefix}.w3"])  # (d, H)
    wl = T.softplus(params[f"{prefix}.wl"])  # (d,)
    g1, g2 = gates  # (B, 1, H) positive FiLM scales
    t3 = t[..., None] if np.ndim(t) else t  # (B, 1, 1)

    h1 = T.sigmoid((w1 * t3 + params[f"{prefix}.b1"]) * g1)

    def mix(h):
        # (..., d, H) x (d, H, H) per dimension, batched over d
        lead = h.shape[:-2]
        flat = h.reshape((-1,) + h.shape[-2:])
        out = T.transpose(T.bmm(T.transpose(flat, (1, 0, 2)), w2), (1, 0, 2))
        return out.reshape(lead + out.shape[-2:])

    h2 = T.sigmoid((mix(h1) + params[f"{prefix}.b2"]) * g2)
    g = T.sum(h2 * w3, axis=-1) + wl * t
    if not tangent:
        return g, None
    dh1 = h1 * (1.0 - h1) * (w1 * g1)
    dh2 = h2 * (1.0 - h2) * (mix(dh1) * g2)
    return g, T.sum(dh2 * w3, axis=-1) + wl


def _mono_gates(params, z, batch_shape, prefix):
    gates = []
    for i in (1, 2):
        bias = params[f"{prefix}.gb{i}"]
        if z is None:
            pre = T.add(T.mul(T.Tensor(np.zeros(batch_shape + (1,), dtype=bias.dtype)), 0.0), bias)
        else:
            pre = T.add(T.matmul(z, params[f"{prefix}.gw{i}"]), bias)
        g = T.softplus(pre)
        gates.append(g.reshape(g.shape[:-1] + (1, g.shape[-1])))
    return gates


def gamma_monotonic_net(cfg: ScheduleConfig, z, t, params, prefix="sched") -> GammaOutput:
    dtype = params[f"{prefix}.w1"].dtype
    tc = time_column(t, dtype)
    batch_shape = tc.shape[:-1] if tc.ndim else ()
    gates = _mono_gates(params, z, batch_shape, prefix)
    g, dg = _mono_forward(params, gates, tc, prefix)
    g0, _ = _mono_forward(params, gates, np.zeros_like(tc), prefix, tangent=False)
    g1, _ = _mono_forward(params, gates, np.ones_like(tc), prefix, tangent=False)
    denom = g1 - g0
    if np.any(denom.data < DEGENERATE_EPS):
        raise DegenerateScheduleError("monotone net is flat over [0, 1]")
    scale = T.Tensor(np.asarray(cfg.span, dtype=dtype))
    gamma = cfg.gamma_min + scale * ((g - g0) / denom)
    return GammaOutput(gamma, scale * (dg / denom))


class Schedule:
    """A schedule family bound to its config.  ``uses_latent`` is False for
    families that ignore z."""

    uses_latent = False

    def __init__(self, cfg: ScheduleConfig):
        self.cfg = cfg

    def init_params(self, rng) -> dict:
        return {}

    def __call__(self, params, z, t, dtype=np.float32) -> GammaOutput:
        raise NotImplementedError


class LinearSchedule(Schedule):
    def __call__(self, params, z, t, dtype=np.float32):
        return gamma_linear(self.cfg, t, dtype)


class FixedPolynomialSchedule(Schedule):
    """z-independent polynomial schedule with fixed (per-dimension) coefficients."""

    def __init__(self, cfg, a, b, d_coef):
        super().__init__(cfg)
        shape = (cfg.d,)
        self.coeffs = tuple(np.broadcast_to(np.asarray(c, dtype=np.float64), shape).copy() for c in (a, b, d_coef))

    def __call__(self, params, z, t, dtype=np.float32):
        a, b, dc = (T.Tensor(c, dtype=dtype) for c in self.coeffs)
        return gamma_polynomial(self.cfg, PolynomialCoeffs(a, b, dc), t)


class PolynomialSchedule(Schedule):
    uses_latent = True

    def init_params(self, rng):
        c = self.cfg
        params = nn.mlp_init(rng, "sched", [c.m, c.hidden, c.hidden, 3 * c.d], final_scale=1e-2)
        # start near the linear schedule: a = b = 0, d = 1
        params["sched.b2"][2 * c.d :] = 1.0
        return params

    def __call__(self, params, z, t, dtype=np.float32):
        return gamma_polynomial(self.cfg, polynomial_coeffs(z, params), t)


class MonotonicSchedule(Schedule):
    uses_latent = True

    def init_params(self, rng):
        c, h = self.cfg, self.cfg.mono_hidden
        f32 = lambda x: np.asarray(x, dtype=np.float32)
        params = {
            "sched.w1": f32(rng.normal(0.0, 1.0, (c.d, h))),
            "sched.b1": f32(rng.normal(0.0, 1.0, (c.d, h))),
            "sched.w2": f32(rng.normal(-1.0, 1.0, (c.d, h, h))),
            "sched.b2": f32(rng.normal(0.0, 1.0, (c.d, h))),
            "sched.w3": f32(rng.normal(0.0, 1.0, (c.d, h))),
            "sched.wl": f32(np.full(c.d, 0.5)),
        }
        for i in (1, 2):
            params[f"sched.gw{i}"] = f32(rng.normal(0.0, 1.0 / np.sqrt(max(c.m, 1)), (c.m, h)))
            params[f"sched.gb{i}"] = f32(np.full(h, 0.5))
        return params

    def __call__(self, params, z, t, dtype=np.float32):
        return gamma_monotonic_net(self.cfg, z if self.cfg.m > 0 else None, t, params)


def make_schedule(cfg: ScheduleConfig) -> Schedule:
    if cfg.family == "linear":
        return LinearSchedule(cfg)
    if cfg.family == "scalar":
        return FixedPolynomialSchedule(cfg, *SCALAR_COEFFS)
    if cfg.family == "polynomial":
        return PolynomialSchedule(cfg)
    return MonotonicSchedule(cfg)


def write_snr_csv(path, t_grid, nu):
    """``nu`` is ``(len(t_grid), d)``; one row per (t, dim)."""
    nu = np.asarray(nu)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dim", "nu"])
        for i, t in enumerate(t_grid):
            for j in range(nu.shape[1]):
                w.writerow([f"{t:.6f}", j, repr(float(nu[i, j]))])
