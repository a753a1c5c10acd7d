"""Pairwise cosine-similarity consistency on source (label-supervised) and target (self-inferred)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-7


@dataclass
class PairSelection:
    i: np.ndarray
    j: np.ndarray
    zeta: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    @property
    def positives(self) -> int:
        return int(self.zeta.sum())

    @property
    def negatives(self) -> int:
        return len(self) - self.positives

    @property
    def pairs(self):
        return list(zip(self.i.tolist(), self.j.tolist(), self.zeta.tolist()))


def _unit_rows(emb: np.ndarray):
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    # zero rows stay zero, so their cosine with anything is 0
    return emb / safe[:, None], norms, safe


def cosine_matrix(emb: np.ndarray) -> np.ndarray:
    u, _, _ = _unit_rows(np.asarray(emb, dtype=np.float64))
    return u @ u.T


def similarity_unit(a, b, clamp: bool = False) -> float:
    """``(cos(a, b) + 1) / 2``.  A zero vector has cosine 0 with everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    s = 0.0 if na == 0 or nb == 0 else float(a @ b) / (na * nb)
    s = min(max(s, -1.0), 1.0)
    sp = (s + 1.0) / 2.0
    return min(max(sp, BCE_EPS), 1.0 - BCE_EPS) if clamp else sp


def bce(t, s):
    return -t * np.log(s) - (1.0 - t) * np.log(1.0 - s)


def _pair_loss(emb: np.ndarray, weight: np.ndarray, zeta: np.ndarray):
    """``sum_ij weight_ij * BCE(zeta_ij, clamp(S'_ij))`` and its gradient.

    ``weight`` is an arbitrary (not necessarily symmetric) matrix; entries
    that are zero contribute nothing.
    """
    u, norms, safe = _unit_rows(emb)
    s = u @ u.T
    sp = (s + 1.0) / 2.0
    spc = np.clip(sp, BCE_EPS, 1.0 - BCE_EPS)
    active = weight != 0
    loss = float(np.sum(np.where(active, weight * bce(zeta, spc), 0.0)))
    inside = (sp > BCE_EPS) & (sp < 1.0 - BCE_EPS)
    d_sp = np.where(active & inside, weight * (-zeta / spc + (1.0 - zeta) / (1.0 - spc)), 0.0)
    d_s = 0.5 * d_sp
    sym = d_s + d_s.T
    # d s_ij / d e_i = (u_j - s_ij u_i) / |e_i|
    du = sym @ u
    grad = (du - (du * u).sum(1, keepdims=True) * u) / safe[:, None]
    grad[norms == 0] = 0.0
    return loss, grad


def source_pairwise_loss(emb: np.ndarray, labels):
    """Mean BCE over ordered pairs ``i != j`` against same-label indicators."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    b = emb.shape[0]
    if b < 2:
        raise ValueError("source pairwise loss needs at least 2 samples")
    zeta = (labels[:, None] == labels[None, :]).astype(np.float64)
    weight = np.full((b, b), 1.0 / (b * (b - 1)))
    np.fill_diagonal(weight, 0.0)
    return _pair_loss(emb, weight, zeta)


def target_pair_selection(emb: np.ndarray, tau_pu: float, tau_pl: float,
                          restrict_to=None) -> PairSelection:
    """Unordered pairs with cosine ``>= tau_pu`` (positive) or ``< tau_pl`` (negative).

    ``restrict_to`` optionally limits candidates to the given row indices.
    """
    if not tau_pl < tau_pu:
        raise ValueError("need tau_pl < tau_pu")
    s = cosine_matrix(emb)
    iu, ju = np.triu_indices(s.shape[0], k=1)
    if restrict_to is not None:
        allowed = np.zeros(s.shape[0], dtype=bool)
        allowed[np.asarray(restrict_to, dtype=np.int64)] = True
        keep = allowed[iu] & allowed[ju]
        iu, ju = iu[keep], ju[keep]
    sv = s[iu, ju]
    pos = sv >= tau_pu
    neg = sv < tau_pl
    sel = pos | neg
    return PairSelection(iu[sel], ju[sel], pos[sel].astype(np.float64))


def target_pairwise_loss(emb: np.ndarray, selection: PairSelection):
    """Mean BCE over the selected pairs; ``(0, zeros)`` when nothing is selected."""
    emb = np.asarray(emb, dtype=np.float64)
    n = len(selection)
    if n == 0:
        return 0.0, np.zeros_like(emb)
    b = emb.shape[0]
    weight = np.zeros((b, b))
    zeta = np.zeros((b, b))
    np.add.at(weight, (selection.i, selection.j), 1.0 / n)
    zeta[selection.i, selection.j] = selection.zeta
    return _pair_loss(emb, weight, zeta)
