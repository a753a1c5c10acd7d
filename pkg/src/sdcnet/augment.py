"""Same-subject, same-trial Mixup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import FeatureTable

# keeps omega strictly inside (0, 1) after float rounding
_OMEGA_EDGE = 1e-12


@dataclass(frozen=True)
class MixPolicy:
    beta_param: float = 0.5
    augment_factor: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.beta_param <= 0:
            raise ValueError("beta_param must be > 0")
        if self.augment_factor < 0:
            raise ValueError("augment_factor must be >= 0")


def sample_mix_coefficient(policy: MixPolicy, rng: np.random.Generator, size=None):
    """Draw omega ~ Beta(a, a) with ``a = policy.beta_param``."""
    w = rng.beta(policy.beta_param, policy.beta_param, size=size)
    return np.clip(w, _OMEGA_EDGE, 1.0 - _OMEGA_EDGE)


def mix_pair(x_i: np.ndarray, x_j: np.ndarray, omega):
    """Convex combination ``omega * x_i + (1 - omega) * x_j``."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim:
        omega = omega[:, None]
    return omega * np.asarray(x_i) + (1.0 - omega) * np.asarray(x_j)


def ss_mix(table: FeatureTable, policy: MixPolicy, return_provenance: bool = False):
    """Append ``round(augment_factor * N)`` mixed records to ``table``.

    Partners are drawn from the anchor's own (subject, trial) group, so the
    mixed label is that trial's label.  Trials holding more than one label
    are rejected.  With ``return_provenance`` the result is
    ``(table, anchors, partners, omegas)`` indexing the input rows.
    """
    n = len(table)
    if n == 0:
        raise ValueError("cannot augment an empty table")
    if not table.is_labeled:
        raise ValueError("SS-Mix needs a fully labeled table")

    keys = table.subject * (int(table.trial.max()) + 1) + table.trial
    _, group = np.unique(keys, return_inverse=True)
    order = np.argsort(group, kind="stable")
    bounds = np.searchsorted(group[order], np.arange(group.max() + 2))
    for g in range(len(bounds) - 1):
        members = order[bounds[g]:bounds[g + 1]]
        if np.unique(table.labels[members]).size != 1:
            i = members[0]
            raise ValueError(f"trial (subject {table.subject[i]}, trial {table.trial[i]}) "
                             "mixes several labels")

    rng = np.random.default_rng(policy.rng_seed)
    m = int(round(policy.augment_factor * n))
    anchors = np.resize(rng.permutation(n), m) if m else np.zeros(0, dtype=np.int64)
    partners = np.empty(m, dtype=np.int64)
    for k, i in enumerate(anchors):
        g = group[i]
        members = order[bounds[g]:bounds[g + 1]]
        if members.size == 1:
            partners[k] = i
            continue
        r = rng.integers(members.size - 1)
        pos = np.searchsorted(members, i)
        # skip over the anchor itself
        partners[k] = members[r + (r >= pos)]
    omegas = sample_mix_coefficient(policy, rng, size=m)
    mixed = mix_pair(table.features[anchors], table.features[partners], omegas)

    # fresh window ids: count upward from each trial's largest original id
    next_window = np.zeros(group.max() + 1, dtype=np.int64)
    np.maximum.at(next_window, group, table.window + 1)
    new_window = np.empty(m, dtype=np.int64)
    for k, i in enumerate(anchors):
        new_window[k] = next_window[group[i]]
        next_window[group[i]] += 1

    out = FeatureTable(
        np.concatenate([table.subject, table.subject[anchors]]),
        np.concatenate([table.trial, table.trial[anchors]]),
        np.concatenate([table.window, new_window]),
        np.vstack([table.features, mixed]),
        np.concatenate([table.labels, table.labels[anchors]]),
        table.num_classes,
    )
    if return_provenance:
        return out, anchors, partners, omegas
    return out
