"""Auxiliary latents z: Gaussian and k-hot posteriors, priors and KL terms.

The k-hot sampler perturbs the encoder logits with Gumbel or Sum-of-Gamma
noise and keeps the top k.  Its backward pass is the straight-through
identity: d z / d logits is taken to be I.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from . import nn
from . import tensor as T

KINDS = ("none", "gaussian", "subset")
NOISE_MODES = ("gumbel", "sog")
ORACLE_MAX_M = 10


@dataclass(frozen=True)
class SogConfig:
    tau: float = 1.0
    s_terms: int = 10

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.s_terms < 1:
            raise ValueError("s_terms must be >= 1")


@dataclass(frozen=True)
class LatentConfig:
    kind: str = "subset"
    m: int = 50
    k: int = 15
    d: int = 64
    noise: str = "sog"
    tau: float = 1.0
    s_terms: int = 10
    hidden: int = 0  # 0 -> 4 * m

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"unknown subset noise {self.noise!r}")
        if self.kind == "none" and self.m != 0:
            raise ValueError("latent kind 'none' needs m = 0")
        if self.kind != "none" and self.m < 1:
            raise ValueError("latent dimension m must be >= 1")
        if self.kind == "subset" and not 1 <= self.k <= self.m:
            raise ValueError("subset size k must lie in [1, m]")

    @property
    def width(self) -> int:
        return self.hidden or 4 * self.m

    @property
    def sog(self) -> SogConfig:
        return SogConfig(self.tau, self.s_terms)


@dataclass
class GaussianLatentPosterior:
    mu: T.Tensor
    log_var: T.Tensor


@dataclass
class SubsetLatentPosterior:
    theta: T.Tensor
    k: int


def encoder_init(rng, cfg: LatentConfig) -> dict:
    if cfg.kind == "none":
        return {}
    out = 2 * cfg.m if cfg.kind == "gaussian" else cfg.m
    return nn.mlp_init(rng, "enc", [cfg.d, cfg.width, cfg.width, out])


def encode(x0, params, cfg: LatentConfig):
    """q(z | x0) parameters from a 2-hidden-layer swish MLP."""
    if cfg.kind == "none":
        raise ValueError("model has no auxiliary latent")
    out = nn.mlp_apply(params, "enc", x0, 3)
    if cfg.kind == "gaussian":
        return GaussianLatentPosterior(out[..., : cfg.m], out[..., cfg.m :])
    return SubsetLatentPosterior(out, cfg.k)


def kl_gaussian(post: GaussianLatentPosterior):
    """KL(N(mu, diag exp(log_var)) || N(0, I)) summed over the last axis."""
    var = T.exp(post.log_var)
    return 0.5 * T.sum(T.square(post.mu) + var - 1.0 - post.log_var, axis=-1)


def kl_subset_uniform(theta):
    """sum_i p_i (log p_i + log m), p = softmax(theta); zero iff theta is flat."""
    theta = T.constant(theta)
    m = theta.shape[-1]
    logp = T.log_softmax(theta, axis=-1)
    return T.sum(T.exp(logp) * (logp + math.log(m)), axis=-1)


def sog_noise(cfg: SogConfig, k: int, shape, rng) -> np.ndarray:
    """tau/k * (sum_{i=1}^{s} Gamma(1/k, scale=k/i) - log s), i.i.d. over ``shape``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    draws = _accel.standard_gamma(1.0 / k, shape + (cfg.s_terms,), rng)
    scales = k / np.arange(1, cfg.s_terms + 1, dtype=np.float64)
    return cfg.tau / k * ((draws * scales).sum(axis=-1) - math.log(cfg.s_terms))


def gumbel_noise(shape, rng, tau=1.0) -> np.ndarray:
    return tau * rng.gumbel(size=shape)


def topk_khot(scores, k: int) -> np.ndarray:
    """Ones at the k largest scores per row; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.shape[-1]:
        raise ValueError(f"k={k} exceeds m={scores.shape[-1]}")
    flat = scores.reshape(-1, scores.shape[-1])
    return _accel.topk_rows(flat, k).reshape(scores.shape)


def subset_noise(shape, k, rng, mode="sog", sog: SogConfig = SogConfig()) -> np.ndarray:
    if mode == "gumbel":
        return gumbel_noise(shape, rng, sog.tau)
    if mode == "sog":
        return sog_noise(sog, k, shape, rng)
    raise ValueError(f"unknown subset noise mode {mode!r}")


def sample_subset(post: SubsetLatentPosterior, rng, mode="sog", sog: SogConfig = SogConfig(), noise=None):
    """k-hot z = topk(theta + noise); gradients flow to theta as the identity."""
    theta = T.constant(post.theta)
    if noise is None:
        noise = subset_noise(theta.shape, post.k, rng, mode, sog)
    hard = topk_khot(theta.data + noise, post.k)
    return T.straight_through(theta, hard)


def sample_gaussian(post: GaussianLatentPosterior, eps):
    return post.mu + T.exp(0.5 * post.log_var) * eps


def sample_prior(cfg: LatentConfig, n: int, rng) -> np.ndarray:
    if cfg.kind == "none":
        return np.zeros((n, 0), dtype=np.float32)
    if cfg.kind == "gaussian":
        return rng.standard_normal((n, cfg.m)).astype(np.float32)
    # uniform prior over k-subsets: flat logits with Gumbel keys are exact
    return topk_khot(rng.gumbel(size=(n, cfg.m)), cfg.k).astype(np.float32)


def subset_prob_oracle(S, w) -> float:
    """Exact p(S | w) of weighted sampling without replacement, summing the
    sequential probabilities of all k! orderings of S."""
    S = np.asarray(S)
    w = np.asarray(w, dtype=np.float64)
    if w.size > ORACLE_MAX_M:
        raise ValueError(f"oracle enumerates orderings; m must be <= {ORACLE_MAX_M}")
    idx = np.flatnonzero(S)
    Z = w.sum()
    total = 0.0
    for order in itertools.permutations(idx):
        p, rem = 1.0, Z
        for i in order:
            p *= w[i] / rem
            rem -= w[i]
        total += p
    return total
