"""Flat ``key=value`` run configuration shared by the CLI and checkpoints."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetSpec
from .model import DiffusionModel, build_config


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = "blobs"
    H: int = 8
    W: int = 8
    C: int = 1
    n_train: int = 1024
    n_eval: int = 256
    data_seed: int = 0
    # model
    schedule: str = "polynomial"
    latent: str = "subset"
    m: int = 50
    k: int = 15
    param_kind: str = "eps"
    hidden: int = 128
    temb_dim: int = 16
    sched_hidden: int = 64
    mono_hidden: int = 8
    enc_hidden: int = 0
    noise: str = "sog"
    tau: float = 1.0
    s_terms: int = 10
    gamma_min: float = -13.30
    gamma_max: float = 5.0
    denoiser: str = "mlp"
    analytic_scale: float = 1.0
    sigma_dec: float = 1.0
    # training
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    ema_rate: float = 0.9999
    ema_warmup: bool = True
    batch_size: int = 64
    steps: int = 5000
    loss_mode: str = "continuous"
    T_train: int = 0
    seed: int = 0
    eval_every: int = 500
    eval_T: int = 128
    grad_clip: float = 0.0
    record_wallclock: bool = True

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.dataset, self.H, self.W, self.C, self.n_train, self.n_eval, self.data_seed)

    def model(self) -> DiffusionModel:
        d = self.H * self.W * self.C
        m = 0 if self.latent == "none" else self.m
        return DiffusionModel(build_config(
            d, m=m, k=self.k if m else 1, latent=self.latent, schedule=self.schedule,
            param_kind=self.param_kind, hidden=self.hidden, temb_dim=self.temb_dim,
            sched_hidden=self.sched_hidden, mono_hidden=self.mono_hidden, enc_hidden=self.enc_hidden,
            noise=self.noise, tau=self.tau, s_terms=self.s_terms, gamma_min=self.gamma_min,
            gamma_max=self.gamma_max, denoiser=self.denoiser, analytic_scale=self.analytic_scale,
            sigma_dec=self.sigma_dec,
        ))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, text):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def parse(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, val)
    return RunConfig(**values)


def serialize(cfg: RunConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name}={repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))
