"""AdamW + EMA training on the NELBO, with checkpoints and a metrics CSV.

Every step draws its batch and noise from a generator seeded by
``(seed, step)``, so a resumed run replays exactly what an uninterrupted
run would have done.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import losses
from . import nn
from . import tensor as T
from .data import read_container, write_container

EVAL_STREAM = 0xE7A1
METRICS_HEADER = ("step", "train_bpd", "eval_bpd", "wallclock_s")


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainState:
    params: dict
    ema: dict
    opt: AdamState
    step: int = 0
    metrics: list = field(default_factory=list)


def adamw_step(params, grads, opt: AdamState, lr=2e-4, beta1=0.9, beta2=0.99, weight_decay=0.01, eps=1e-8):
    """One bias-corrected Adam update with decoupled weight decay; returns new params."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    opt.step += 1
    c1 = 1.0 - beta1**opt.step
    c2 = 1.0 - beta2**opt.step
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * opt.m[k] + (1 - beta1) * g
        v = beta2 * opt.v[k] + (1 - beta2) * g * g
        opt.m[k] = m.astype(p.dtype)
        opt.v[k] = v.astype(p.dtype)
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        out[k] = (p - lr * upd - lr * weight_decay * p).astype(p.dtype)
    return out


def ema_update(shadow, params, rate):
    out = {}
    for k, s in shadow.items():
        p = params[k]
        if np.shape(s) != np.shape(p):
            raise ValueError(f"EMA shape mismatch for {k!r}: {np.shape(s)} vs {np.shape(p)}")
        out[k] = (rate * s + (1.0 - rate) * p).astype(s.dtype)
    return out


def ema_rate_at(rate, step, warmup=True):
    """Warmup caps the rate at (1 + step) / (10 + step) so short runs still track."""
    return min(rate, (1.0 + step) / (10.0 + step)) if warmup else rate


def clip_by_global_norm(grads, max_norm):
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: (g * s).astype(g.dtype) for k, g in grads.items()}


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def _loss_kwargs(cfg: C.RunConfig):
    if cfg.loss_mode == "continuous":
        return dict(mode="continuous", T_steps=None)
    if cfg.loss_mode == "discrete":
        return dict(mode="discrete", T_steps=cfg.T_train)
    raise ValueError(f"unknown loss mode {cfg.loss_mode!r}")


def batch_loss(model, P, x0, rng, mode="continuous", T_steps=None):
    """Mean total bpd over the batch, as a differentiable scalar."""
    noise = losses.draw_noise(model, x0.shape[0], rng, mode, T_steps)
    terms = losses.nelbo_terms(model, P, x0, noise, mode, T_steps)
    return T.mean(terms.total) * (1.0 / (model.d * losses.LN2))


def eval_vlb(model, params, x, seed, T_steps=128, chunk=32) -> np.ndarray:
    """Per-example discrete NELBO in bpd, summed over all T-1 steps, fixed noise."""
    rng = np.random.default_rng([seed, EVAL_STREAM])
    P = nn.as_tensors(params)
    out = []
    for i in range(0, x.shape[0], chunk):
        xb = x[i : i + chunk]
        noise = losses.draw_noise(model, xb.shape[0], rng, "discrete", T_steps, full_sum=True)
        terms = losses.nelbo_terms(model, P, xb, noise, "discrete", T_steps)
        out.append(losses.per_example_bpd(terms, model.d))
    return np.concatenate(out)


def init_state(model, seed) -> TrainState:
    params = model.init_params(seed)
    return TrainState(params, {k: v.copy() for k, v in params.items()}, AdamState.zeros(params))


def train_step(model, state: TrainState, x_train, cfg: C.RunConfig, dump_dir=None) -> float:
    rng = step_rng(cfg.seed, state.step)
    idx = rng.integers(0, x_train.shape[0], size=cfg.batch_size)
    xb = x_train[idx]
    try:
        loss, grads = T.value_and_grad(lambda P: batch_loss(model, P, xb, rng, **_loss_kwargs(cfg)), state.params)
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss")
    except (FloatingPointError, ZeroDivisionError) as exc:
        where = ""
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            path = Path(dump_dir) / f"nonfinite_step{state.step}.mltn"
            write_container(path, xb)
            where = f"; batch written to {path}"
        raise TrainingError(f"step {state.step}: {exc}{where}") from exc
    grads = clip_by_global_norm(grads, cfg.grad_clip)
    state.params = adamw_step(state.params, grads, state.opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    state.step += 1
    state.ema = ema_update(state.ema, state.params, ema_rate_at(cfg.ema_rate, state.step, cfg.ema_warmup))
    return loss


def train(cfg: C.RunConfig, data=None, out_dir=None, state: TrainState | None = None, steps=None, log=None) -> TrainState:
    """Run ``steps`` (default ``cfg.steps``) optimizer steps from ``state`` or a fresh init.

    Writes ``metrics.csv`` and a checkpoint into ``out_dir`` when given.
    """
    from .data import generate

    model = cfg.model()
    if data is None:
        data = generate(cfg.dataset_spec())
    if data.train.shape[1] != model.d:
        raise ValueError(f"data dimension {data.train.shape[1]} does not match model d={model.d}")
    state = state or init_state(model, cfg.seed)
    end = cfg.steps if steps is None else state.step + steps
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None

    def record(train_bpd):
        ev = float(np.mean(eval_vlb(model, state.ema, data.eval, cfg.seed, cfg.eval_T)))
        wall = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
        row = (state.step, train_bpd, ev, wall)
        state.metrics.append(row)
        if log:
            log(f"step {state.step:6d}  train {train_bpd:.4f} bpd  eval {ev:.4f} bpd  {wall:.1f}s")

    if state.step == 0 and not state.metrics:
        rng = step_rng(cfg.seed, 0)
        xb = data.train[rng.integers(0, data.train.shape[0], size=cfg.batch_size)]
        init_loss = batch_loss(model, nn.as_tensors(state.params), xb, rng, **_loss_kwargs(cfg)).item()
        record(init_loss)
    window = []
    while state.step < end:
        window.append(train_step(model, state, data.train, cfg, dump_dir=out))
        if state.step % cfg.eval_every == 0 or state.step == end:
            record(float(np.mean(window)))
            window = []
    if out is not None:
        save_checkpoint(out, cfg, state)
        write_metrics(out / "metrics.csv", state.metrics)
    return state


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for step, tr, ev, wall in rows:
            w.writerow([step, repr(float(tr)), repr(float(ev)), f"{wall:.3f}"])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    return [(int(s), float(a), float(b), float(c)) for s, a, b, c in rows[1:]]


# -- checkpoints ------------------------------------------------------------

_GROUPS = ("param", "ema", "adam_m", "adam_v")


def save_checkpoint(out_dir, cfg: C.RunConfig, state: TrainState) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for group, tensors in zip(_GROUPS, (state.params, state.ema, state.opt.m, state.opt.v)):
        for name, arr in tensors.items():
            write_container(out / f"{group}.{name}.mltn", arr)
    meta = [f"step={state.step}", f"adam_step={state.opt.step}", C.serialize(cfg).rstrip("\n")]
    (out / "meta.txt").write_text("\n".join(meta) + "\n")
    write_metrics(out / "metrics.csv", state.metrics)


def load_checkpoint(ckpt_dir):
    """Return ``(cfg, state)``; raises FileNotFoundError if the directory is not a checkpoint."""
    ckpt = Path(ckpt_dir)
    meta_path = ckpt / "meta.txt"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt} (missing meta.txt)")
    lines = meta_path.read_text().splitlines()
    counters = {}
    rest = []
    for line in lines:
        key = line.split("=", 1)[0].strip()
        if key in ("step", "adam_step"):
            counters[key] = int(line.split("=", 1)[1])
        else:
            rest.append(line)
    cfg = C.parse("\n".join(rest))
    groups = {g: {} for g in _GROUPS}
    for path in sorted(ckpt.glob("*.mltn")):
        group, _, name = path.stem.partition(".")
        if group in groups:
            groups[group][name] = read_container(path)
    state = TrainState(groups["param"], groups["ema"], AdamState(groups["adam_m"], groups["adam_v"], counters.get("adam_step", 0)),
                       counters.get("step", 0))
    metrics = ckpt / "metrics.csv"
    if metrics.is_file():
        state.metrics = read_metrics(metrics)
    return cfg, state
