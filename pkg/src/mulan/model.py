"""Parameter bundle joining encoder, schedule and denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import latent as L
from . import nn
from . import tensor as T
from .reverse import DenoiserConfig, denoise, denoiser_init, output_to_eps, output_to_x0
from .schedules import Schedule, ScheduleConfig, make_schedule


@dataclass(frozen=True)
class ModelConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    latent: LatentConfig = field(default_factory=lambda: L.LatentConfig())
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sigma_dec: float = 1.0

    def __post_init__(self):
        d = {self.schedule.d, self.latent.d, self.denoiser.d}
        m = {self.schedule.m, self.latent.m, self.denoiser.m}
        if len(d) != 1 or len(m) != 1:
            raise ValueError(f"inconsistent data/latent sizes across sub-configs: d={d}, m={m}")
        if self.schedule.family == "polynomial" and self.schedule.m == 0:
            raise ValueError("the polynomial schedule is conditioned on z; it needs a latent")
        if self.sigma_dec <= 0:
            raise ValueError("sigma_dec must be positive")


LatentConfig = L.LatentConfig


def build_config(d, m=0, k=1, latent="none", schedule="linear", param_kind="eps", hidden=64,
                 temb_dim=16, sched_hidden=32, mono_hidden=8, enc_hidden=0, noise="sog", tau=1.0,
                 s_terms=10, gamma_min=-13.30, gamma_max=5.0, denoiser="mlp", analytic_scale=1.0,
                 sigma_dec=1.0) -> ModelConfig:
    """Flat convenience constructor used by the CLI and the tests."""
    return ModelConfig(
        schedule=ScheduleConfig(schedule, gamma_min, gamma_max, d, m, sched_hidden, mono_hidden),
        latent=L.LatentConfig(latent, m, k, d, noise, tau, s_terms, enc_hidden),
        denoiser=DenoiserConfig(d, m, hidden, param_kind, temb_dim, denoiser, analytic_scale, gamma_min, gamma_max),
        sigma_dec=sigma_dec,
    )


class DiffusionModel:
    def __init__(self, cfg: ModelConfig, schedule: Schedule | None = None):
        self.cfg = cfg
        self.schedule = schedule if schedule is not None else make_schedule(cfg.schedule)

    @property
    def d(self) -> int:
        return self.cfg.schedule.d

    @property
    def m(self) -> int:
        return self.cfg.latent.m

    @property
    def param_kind(self) -> str:
        return self.cfg.denoiser.param_kind

    def init_params(self, seed) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        params.update(L.encoder_init(rng, self.cfg.latent))
        params.update(self.schedule.init_params(rng))
        params.update(denoiser_init(rng, self.cfg.denoiser))
        return params

    def with_schedule(self, schedule: Schedule) -> "DiffusionModel":
        return DiffusionModel(self.cfg, schedule)

    # -- latent -------------------------------------------------------------

    def encode(self, P, x0):
        return L.encode(x0, P, self.cfg.latent)

    def latent_noise(self, n, rng):
        lc = self.cfg.latent
        if lc.kind == "gaussian":
            return rng.standard_normal((n, lc.m))
        if lc.kind == "subset":
            return L.subset_noise((n, lc.m), lc.k, rng, lc.noise, lc.sog)
        return None

    def posterior_latent(self, P, x0, noise):
        """Sample z ~ q(z | x0) from pre-drawn noise; returns (z, KL to prior)."""
        lc = self.cfg.latent
        n = T.constant(x0).shape[0]
        if lc.kind == "none":
            return None, T.Tensor(np.zeros(n, dtype=T.constant(x0).dtype))
        post = self.encode(P, x0)
        if lc.kind == "gaussian":
            z = L.sample_gaussian(post, np.asarray(noise, dtype=post.mu.dtype))
            return z, L.kl_gaussian(post)
        z = L.sample_subset(post, None, lc.noise, lc.sog, noise=noise)
        return z, L.kl_subset_uniform(post.theta)

    def prior_latent(self, n, rng):
        return L.sample_prior(self.cfg.latent, n, rng)

    # -- schedule and denoiser ---------------------------------------------

    def gamma(self, P, z, t, dtype=None):
        return self.schedule(P, z, t, dtype or self._dtype(P, z))

    def predict(self, P, x_t, z, gamma):
        return denoise(P, x_t, z, gamma, self.cfg.denoiser)

    def predict_eps(self, P, x_t, z, gamma):
        return output_to_eps(x_t, self.predict(P, x_t, z, gamma), gamma, self.param_kind)

    def predict_x0(self, P, x_t, z, gamma):
        return output_to_x0(x_t, self.predict(P, x_t, z, gamma), gamma, self.param_kind)

    @staticmethod
    def _dtype(P, z):
        for v in P.values():
            return v.dtype
        if z is not None:
            return T.constant(z).dtype
        return np.float32


def tensors(params, dtype=None):
    return nn.as_tensors(params, dtype)


def swapped(model: DiffusionModel, family: str) -> DiffusionModel:
    cfg = replace(model.cfg.schedule, family=family)
    return model.with_schedule(make_schedule(cfg))
