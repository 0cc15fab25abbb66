"""``mulan`` command line: train, eval, sample, plot-schedule, schedule-swap.

Exit codes: 0 on success, 2 on usage or config errors, 3 on runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(np.mean(x)), se


def _load(ckpt):
    from .train import load_checkpoint

    cfg, state = load_checkpoint(ckpt)
    return cfg, state, cfg.model()


def _eval_data(cfg, n):
    from .data import generate

    x = generate(cfg.dataset_spec()).eval
    return x[:n] if n else x


# -- commands ---------------------------------------------------------------


def cmd_train(args):
    from . import config as C
    from .train import train

    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = C.load(path)
    except C.ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    train(cfg, out_dir=args.out, log=None if args.quiet else print)
    print(f"checkpoint written to {args.out}")


def cmd_eval(args):
    from . import nn
    from .ode import dequant_bound_iw, dequant_bound_tn, log_likelihood_ode, nats_to_bpd, quantize, write_eval_csv
    from .train import eval_vlb

    cfg, state, model = _load(args.ckpt)
    params = state.ema if args.weights == "ema" else state.params
    x = _eval_data(cfg, args.n)
    seed = cfg.seed if args.seed is None else args.seed
    if args.mode == "vlb":
        if args.dequant != "none":
            raise UsageError("--dequant applies to --mode ode only")
        bpd = eval_vlb(model, params, x, seed, args.T)
        nfe = args.T
    else:
        rng = np.random.default_rng([seed, 0x0DE])
        P = nn.as_tensors(params)
        nfe_total = [0]

        def log_p(xx):
            r = log_likelihood_ode(model, P, xx, rng, K=1, divergence_mode=args.divergence)
            nfe_total[0] += r.nfe
            return r.log_px

        if args.dequant == "none":
            lp = log_p(x)
        elif args.dequant == "tn":
            lp = dequant_bound_tn(log_p, quantize(x), rng)
        else:
            lp = dequant_bound_iw(log_p, quantize(x), args.K, rng)
        bpd = nats_to_bpd(lp, model.d)
        nfe = nfe_total[0]
    mean, se = _mean_se(bpd)
    mode = args.mode if args.mode == "vlb" else f"ode-{args.dequant}"
    out = Path(args.out) if args.out else Path(args.ckpt) / f"eval_{mode}.csv"
    write_eval_csv(out, bpd, nfe, mode)
    print(f"{mode}: {mean:.5f} +/- {se:.5f} bpd over {len(bpd)} examples (per-example CSV: {out})")


def cmd_sample(args):
    from .data import write_container
    from .ode import flow_sample
    from .reverse import ancestral_sample
    from . import nn

    cfg, state, model = _load(args.ckpt)
    rng = np.random.default_rng([cfg.seed if args.seed is None else args.seed, 0x5A])
    z = model.prior_latent(args.n, rng)
    if args.ode:
        from . import tensor as T

        zt = T.Tensor(z) if model.m else None
        x = flow_sample(model, nn.as_tensors(state.ema), zt, rng, args.n)
    else:
        x = ancestral_sample(model, state.ema, z, args.T, rng)
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise RuntimeError("sampler produced non-finite values")
    write_container(args.out, x)
    print(f"wrote {x.shape[0]} samples of dimension {x.shape[1]} to {args.out}")


def schedule_curves(model, params, n_z, rng, n_t=129):
    """nu(z, t) for ``n_z`` prior draws: returns (t_grid, nu[n_z, n_t, d])."""
    from . import nn
    from . import tensor as T

    P = nn.as_tensors(nn.cast_params(params, np.float64))
    z = model.prior_latent(n_z, rng)
    zt = T.Tensor(z.astype(np.float64)) if model.m else None
    t_grid = np.linspace(0.0, 1.0, n_t)
    nu = np.empty((n_z, n_t, model.d))
    for j, t in enumerate(t_grid):
        g = model.gamma(P, zt, np.full(n_z, t), np.float64).gamma.data
        nu[:, j, :] = np.broadcast_to(np.exp(-g), (n_z, model.d))
    return t_grid, nu


def write_svg(path, t_grid, curves, title, ylabel):
    """Polyline plot, one line per column of ``curves`` (shape (n_t, k))."""
    W, H, pad = 640, 400, 50
    y = np.asarray(curves, dtype=np.float64)
    lo, hi = float(y.min()), float(y.max())
    if hi - lo < 1e-300:
        hi = lo + 1.0
    sx = lambda t: pad + (W - 2 * pad) * t
    sy = lambda v: H - pad - (H - 2 * pad) * (v - lo) / (hi - lo)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">t</text>',
        f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{ylabel}</text>',
        f'<text x="{pad - 5}" y="{H - pad}" text-anchor="end">{lo:.3g}</text>',
        f'<text x="{pad - 5}" y="{pad + 4}" text-anchor="end">{hi:.3g}</text>',
    ]
    k = y.shape[1]
    for j in range(k):
        hue = int(360 * j / max(k, 1))
        pts = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in zip(t_grid, y[:, j]))
        lines.append(f'<polyline fill="none" stroke="hsl({hue},70%,45%)" stroke-width="1" points="{pts}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_plot_schedule(args):
    from .schedules import write_snr_csv

    cfg, state, model = _load(args.ckpt)
    rng = np.random.default_rng([cfg.seed if args.seed is None else args.seed, 0x9107])
    t_grid, nu = schedule_curves(model, state.ema, args.n_z, rng)
    out = Path(args.out)
    stem = out.with_suffix("")
    csv_path = out if out.suffix == ".csv" else stem.with_suffix(".csv")
    write_snr_csv(csv_path, t_grid, nu.mean(axis=0))
    var = nu.var(axis=0)
    var_path = Path(f"{stem}_variance.csv")
    with open(var_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dim", "var_nu"])
        for i, t in enumerate(t_grid):
            for j in range(var.shape[1]):
                w.writerow([f"{t:.6f}", j, repr(float(var[i, j]))])
    write_svg(stem.with_suffix(".svg"), t_grid, var, f"variance of nu across {args.n_z} z ~ p(z)", "var nu")
    write_svg(Path(f"{stem}_log_nu.svg"), t_grid, np.log10(nu.mean(axis=0)), "mean log10 nu per dimension", "log10 nu")
    print(f"wrote {csv_path}, {var_path} and SVG plots; max variance {float(var.max()):.4g}")


def swap_model(model, family):
    from .model import swapped

    return model if family == "original" else swapped(model, family)


def cmd_schedule_swap(args):
    from .train import eval_vlb

    cfg, state, model = _load(args.ckpt)
    x = _eval_data(cfg, args.n)
    seed = cfg.seed if args.seed is None else args.seed
    base = eval_vlb(model, state.ema, x, seed, args.T)
    alt = eval_vlb(swap_model(model, args.schedule), state.ema, x, seed, args.T)
    m0, s0 = _mean_se(base)
    m1, s1 = _mean_se(alt)
    dm, ds = _mean_se(alt - base)
    print(f"original ({cfg.schedule}): {m0:.5f} +/- {s0:.5f} bpd")
    print(f"swapped  ({args.schedule}): {m1:.5f} +/- {s1:.5f} bpd")
    print(f"difference: {dm:+.5f} +/- {ds:.5f} bpd ({dm / ds if ds > 0 else 0.0:+.2f} paired SE)")
    return dm, ds


# -- parser -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mulan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bits/dim by the T-step bound or the flow ODE")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=("vlb", "ode"), default="vlb")
    e.add_argument("--T", type=int, default=128)
    e.add_argument("--dequant", choices=("none", "tn", "iw"), default="none")
    e.add_argument("--K", type=int, default=1)
    e.add_argument("--divergence", choices=("exact", "hutchinson"), default="exact")
    e.add_argument("--weights", choices=("ema", "raw"), default="ema")
    e.add_argument("--n", type=int, default=0, help="evaluate the first n eval examples (0 = all)")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples into an MLTN container")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--T", type=int, default=256)
    g.add_argument("--ode", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    pl = sub.add_parser("plot-schedule", help="per-dimension SNR curves and their variance over z")
    pl.add_argument("--ckpt", required=True)
    pl.add_argument("--n-z", type=int, default=128)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot_schedule)

    sw = sub.add_parser("schedule-swap", help="re-evaluate a frozen denoiser under another schedule")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--schedule", choices=("linear", "scalar", "original"), required=True)
    sw.add_argument("--T", type=int, default=128)
    sw.add_argument("--n", type=int, default=0)
    sw.add_argument("--seed", type=int)
    sw.set_defaults(func=cmd_schedule_swap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name in ("n", "K", "T", "n_z"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "n" else 1):
            parser.print_usage(sys.stderr)
            print(f"mulan: error: --{name.replace('_', '-')} out of range", file=sys.stderr)
            return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mulan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mulan: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, FloatingPointError, OSError) as exc:
        print(f"mulan: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
