"""Two-layer ReLU feature extractor with a linear softmax head, in numpy.

Forward and backward are written out by hand.  Upstream gradients may enter
both at the logits (classification) and at the second hidden layer ``h2``
(every alignment and similarity loss works on ``h2``).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wc", "bc")
CHECKPOINT_MAGIC = "SDCNET-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class MLPParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self) -> "MLPParams":
        return MLPParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def zeros_like(self) -> "MLPParams":
        return MLPParams(*(np.zeros_like(getattr(self, n)) for n in PARAM_NAMES))

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.Wc.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.W2.shape[1]


# Gradients share the parameter layout.
Gradients = MLPParams


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    mask1: Optional[np.ndarray]
    mask2: Optional[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class OptimizerState:
    velocity: MLPParams
    learning_rate: float
    momentum: float = 0.9


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(input_dim: int, hidden_dims, num_classes: int,
                rng: np.random.Generator) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    h1, h2 = hidden_dims
    shapes = [(input_dim, h1), (h1, h2), (h2, num_classes)]
    ws = [rng.uniform(-glorot_bound(*s), glorot_bound(*s), size=s) for s in shapes]
    return MLPParams(ws[0], np.zeros(h1), ws[1], np.zeros(h2), ws[2], np.zeros(num_classes))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(rng, shape, p):
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def forward(params: MLPParams, batch: np.ndarray, mode: str = "eval",
            rng: Optional[np.random.Generator] = None, dropout: float = 0.25) -> ForwardCache:
    """Run the network.  ``mode='train'`` applies inverted dropout after each ReLU."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"batch must be [B x {params.input_dim}], got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train" and dropout > 0
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")

    z1 = x @ params.W1 + params.b1
    h1 = np.maximum(z1, 0.0)
    mask1 = None
    if train:
        mask1 = _dropout_mask(rng, h1.shape, dropout)
        h1 = h1 * mask1
    z2 = h1 @ params.W2 + params.b2
    h2 = np.maximum(z2, 0.0)
    mask2 = None
    if train:
        mask2 = _dropout_mask(rng, h2.shape, dropout)
        h2 = h2 * mask2
    logits = h2 @ params.Wc + params.bc
    return ForwardCache(x, z1, h1, z2, h2, mask1, mask2, logits, softmax(logits))


def cross_entropy_loss(cache: ForwardCache, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != cache.probs.shape[0]:
        raise ValueError("labels and batch size differ")
    if np.any(labels < 0) or np.any(labels >= cache.probs.shape[1]):
        raise ValueError("label out of range")
    rows = np.arange(b)
    # log-softmax directly from logits stays finite for confident predictions
    z = cache.logits - cache.logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[rows, labels].mean())
    grad = cache.probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / b


def backward(params: MLPParams, cache: ForwardCache, d_logits: Optional[np.ndarray] = None,
             d_h2: Optional[np.ndarray] = None) -> Gradients:
    """Chain rule from logits and/or ``h2`` back to every parameter."""
    if cache.x.shape[1] != params.input_dim or cache.h2.shape[1] != params.embedding_dim:
        raise ValueError("cache does not match params")
    grads = params.zeros_like()
    g_h2 = np.zeros_like(cache.h2) if d_h2 is None else np.array(d_h2, dtype=np.float64)
    if g_h2.shape != cache.h2.shape:
        raise ValueError("d_h2 shape mismatch")
    if d_logits is not None:
        if d_logits.shape != cache.logits.shape:
            raise ValueError("d_logits shape mismatch")
        grads.Wc = cache.h2.T @ d_logits
        grads.bc = d_logits.sum(axis=0)
        g_h2 = g_h2 + d_logits @ params.Wc.T
    if cache.mask2 is not None:
        g_h2 = g_h2 * cache.mask2
    g_z2 = g_h2 * (cache.z2 > 0)
    grads.W2 = cache.h1.T @ g_z2
    grads.b2 = g_z2.sum(axis=0)
    g_h1 = g_z2 @ params.W2.T
    if cache.mask1 is not None:
        g_h1 = g_h1 * cache.mask1
    g_z1 = g_h1 * (cache.z1 > 0)
    grads.W1 = cache.x.T @ g_z1
    grads.b1 = g_z1.sum(axis=0)
    return grads


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    return MLPParams(*(getattr(a, n) + getattr(b, n) for n in PARAM_NAMES))


def init_optimizer(params: MLPParams, learning_rate: float, momentum: float = 0.9) -> OptimizerState:
    return OptimizerState(params.zeros_like(), learning_rate, momentum)


def sgd_step(params: MLPParams, grads: Gradients, state: OptimizerState,
             learning_rate: Optional[float] = None) -> tuple[MLPParams, OptimizerState]:
    """Heavy-ball update ``v = mu v + g; theta = theta - lr v``."""
    lr = state.learning_rate if learning_rate is None else learning_rate
    new_v, new_p = {}, {}
    for name in PARAM_NAMES:
        v = state.momentum * getattr(state.velocity, name) + getattr(grads, name)
        new_v[name] = v
        new_p[name] = getattr(params, name) - lr * v
    return MLPParams(**new_p), OptimizerState(MLPParams(**new_v), state.learning_rate, state.momentum)


def embed(params: MLPParams, x: np.ndarray, batch_rows: int = 4096) -> np.ndarray:
    """Eval-mode ``h2`` for every row of ``x``."""
    if len(x) == 0:
        return np.zeros((0, params.embedding_dim))
    return np.vstack([forward(params, x[i:i + batch_rows]).h2
                      for i in range(0, len(x), batch_rows)])


def predict_proba(params: MLPParams, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, params.num_classes))
    return forward(params, x).probs


# ----------------------------------------------------------------------------
# Checkpoints
#
# Text file.  Line 1: "SDCNET-CHECKPOINT <version>".  Then blocks of
#   "<name> <rows> <cols>" followed by rows*cols values, one per line,
# in row-major order, printed with 17 significant digits so reload is exact.
# Block names: the six parameters, optionally "velocity.<param>" and the
# input standardisation "input_mean" / "input_scale".  Vectors use cols=1.
# ----------------------------------------------------------------------------

def save_checkpoint(path, params: MLPParams, extras: Optional[dict] = None) -> None:
    blocks = [(n, a) for n, a in params.items()]
    for name, arr in (extras or {}).items():
        blocks.append((name, np.asarray(arr, dtype=np.float64)))
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for name, arr in blocks:
        mat = arr.reshape(arr.shape[0], -1) if arr.ndim else arr.reshape(1, 1)
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(format(float(v), ".17g") for v in mat.ravel())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[MLPParams, dict]:
    from .datamodel import FormatError

    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: line 1: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {head[1]}")
    blocks = {}
    i = 1
    while i < len(lines):
        try:
            name, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            vals = np.array([float(v) for v in lines[i + 1:i + 1 + rows * cols]])
        except ValueError:
            raise FormatError(f"{path}: line {i + 1}: bad block") from None
        if vals.size != rows * cols:
            raise FormatError(f"{path}: line {i + 1}: block {name} truncated")
        blocks[name] = vals.reshape(rows, cols)
        i += 1 + rows * cols
    missing = [n for n in PARAM_NAMES if n not in blocks]
    if missing:
        raise FormatError(f"{path}: missing parameter blocks {missing}")
    params = MLPParams(**{n: blocks.pop(n) if n.startswith("W") else blocks.pop(n).ravel()
                          for n in PARAM_NAMES})
    extras = {n: (a.ravel() if a.shape[1] == 1 and ".W" not in n else a)
              for n, a in blocks.items()}
    return params, extras
