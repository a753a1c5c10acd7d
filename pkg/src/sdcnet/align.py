"""Multi-kernel Gaussian MMD, confidence-gated pseudo-labels and class-conditional MMD.

All discrepancies use the biased (V-statistic) estimator and return
closed-form gradients with respect to both embedding sets.  Bandwidths are
constants: no gradient flows through them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class KernelBank:
    bandwidths: tuple
    weights: tuple = None

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        if not bw or min(bw) <= 0:
            raise ValueError("need at least one positive bandwidth")
        w = (1.0 / len(bw),) * len(bw) if self.weights is None else tuple(float(x) for x in self.weights)
        if len(w) != len(bw) or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative, one per bandwidth, summing to 1")
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)

    @classmethod
    def around(cls, sigma: float, count: int = 5) -> "KernelBank":
        """Bandwidths ``sigma * 2**k`` for ``count`` exponents centred on 0."""
        exps = np.arange(count) - (count - 1) / 2.0
        return cls(tuple(sigma * 2.0 ** exps))


@dataclass
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def median_heuristic(emb: np.ndarray) -> float:
    """Median pairwise Euclidean distance over ``i < j``; 1.0 if it is zero."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[:, None]
    if emb.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 rows")
    iu = np.triu_indices(emb.shape[0], k=1)
    d = np.sqrt(_sq_dists(emb, emb)[iu])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def mmd2(source: np.ndarray, target: np.ndarray, bank: KernelBank):
    """Biased multi-kernel MMD^2 and its gradients ``(value, d_source, d_target)``."""
    xs = np.asarray(source, dtype=np.float64)
    xt = np.asarray(target, dtype=np.float64)
    n, m = xs.shape[0], xt.shape[0]
    if n == 0 or m == 0:
        raise ValueError("MMD needs non-empty source and target")
    z = np.vstack([xs, xt])
    a = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    d2 = _sq_dists(z, z)
    aa = np.outer(a, a)
    value = 0.0
    # gradient of sum_ij a_i a_j k(z_i, z_j) wrt z_p is
    # -2/s^2 * sum_j a_p a_j k_pj (z_p - z_j)
    coef = np.zeros_like(d2)
    for s, w in zip(bank.bandwidths, bank.weights):
        k = np.exp(-d2 / (2.0 * s * s))
        mk = k * aa
        value += w * mk.sum()
        coef += (w * -2.0 / (s * s)) * mk
    grad = coef.sum(1)[:, None] * z - coef @ z
    return max(float(value), 0.0), grad[:n], grad[n:]


def filter_pseudo_labels(target_probs: np.ndarray, tau: float) -> PseudoLabelSet:
    """Accept row ``i`` iff ``max_c p_ic >= tau``; label = first argmax."""
    p = np.asarray(target_probs, dtype=np.float64)
    conf = p.max(axis=1) if p.size else np.zeros(p.shape[0])
    labels = p.argmax(axis=1) if p.size else np.zeros(p.shape[0], dtype=np.int64)
    keep = np.flatnonzero(conf >= tau)
    return PseudoLabelSet(keep, labels[keep].astype(np.int64), conf[keep])


@dataclass
class CMMDResult:
    value: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    classes: int


def cmmd2(source: np.ndarray, source_labels, target: np.ndarray, pseudo: PseudoLabelSet,
          bank: KernelBank, num_classes: int, class_mean: bool = False,
          class_weights: Optional[np.ndarray] = None) -> CMMDResult:
    """Sum over classes present on both sides of the per-class MMD^2.

    ``target`` is the whole target batch; ``pseudo`` selects rows of it.
    ``class_mean`` divides by the number of participating classes;
    ``class_weights`` scales each class term (e.g. by a class prior).
    """
    xs = np.asarray(source, dtype=np.float64)
    xt = np.asarray(target, dtype=np.float64)
    ys = np.asarray(source_labels, dtype=np.int64)
    if np.any(ys >= num_classes) or np.any(pseudo.labels >= num_classes):
        raise ValueError("label out of range")
    gs = np.zeros_like(xs)
    gt = np.zeros_like(xt)
    value = 0.0
    used = 0
    for c in range(num_classes):
        si = np.flatnonzero(ys == c)
        ti = pseudo.indices[pseudo.labels == c]
        if si.size == 0 or ti.size == 0:
            continue
        v, g1, g2 = mmd2(xs[si], xt[ti], bank)
        w = 1.0 if class_weights is None else float(class_weights[c])
        value += w * v
        gs[si] += w * g1
        np.add.at(gt, ti, w * g2)
        used += 1
    if class_mean and used:
        value /= used
        gs /= used
        gt /= used
    return CMMDResult(value, gs, gt, used)
