"""Central finite differences over every network parameter."""
import numpy as np

from sdcnet import net


def numeric_grads(loss_fn, params: net.MLPParams, h: float = 1e-5) -> net.MLPParams:
    out = params.zeros_like()
    for name, arr in params.items():
        g = getattr(out, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn(params)
            arr[idx] = old - h
            down = loss_fn(params)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
    return out


def max_relative_error(analytic: net.MLPParams, numeric: net.MLPParams, floor: float = 1e-8) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = getattr(numeric, name)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def tiny_params(seed: int = 0, dims=(6, 4, 4, 3)) -> net.MLPParams:
    """6-4-4-3 network with positive biases so no unit sits on a ReLU kink."""
    rng = np.random.default_rng(seed)
    p = net.init_params(dims[0], dims[1:3], dims[3], rng)
    p.b1 = rng.uniform(0.2, 0.5, dims[1])
    p.b2 = rng.uniform(0.2, 0.5, dims[2])
    p.bc = rng.uniform(-0.1, 0.1, dims[3])
    return p
