"""Small MLP building blocks over :mod:`mulan.tensor`.

Parameters live in flat ``{name: array}`` dicts so the optimizer, the EMA
and the checkpoint writer never need to know the network structure.
"""

import math

import numpy as np

from . import tensor as T


def dense_init(rng, fan_in, fan_out, scale=1.0):
    """LeCun-normal weights and zero bias, float32."""
    w = rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(max(fan_in, 1)))
    return w.astype(np.float32), np.zeros(fan_out, dtype=np.float32)


def mlp_init(rng, prefix, sizes, final_scale=1.0):
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        w, b = dense_init(rng, sizes[i], sizes[i + 1], final_scale if i == n - 1 else 1.0)
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = b
    return params


def mlp_apply(params, prefix, x, n_layers, act=T.swish):
    h = x
    for i in range(n_layers):
        h = T.add(T.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def as_tensors(params, dtype=None):
    return {k: v if isinstance(v, T.Tensor) else T.Tensor(v, dtype=dtype) for k, v in params.items()}


def cast_params(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
