"""LOSO harness, confusion matrices, negative transfer, MI topography and embedding export."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import net
from .datamodel import ABLATION_FLAGS, FeatureTable, RunConfig, loso_splits
from .trainer import Standardizer, confusion_matrix, fit


def evaluate(params: net.MLPParams, table: FeatureTable,
             standardizer: Optional[Standardizer] = None) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows = true, columns = predicted)."""
    if len(table) == 0:
        raise ValueError("cannot evaluate an empty table")
    if not table.is_labeled:
        raise ValueError("evaluation needs labels")
    x = table.features if standardizer is None else standardizer(table.features)
    pred = np.argmax(net.predict_proba(params, x), axis=1)
    cm = confusion_matrix(table.labels, pred, table.num_classes)
    return float(np.trace(cm) / cm.sum()), cm


def detect_negative_transfer(accuracy: float, num_classes: int) -> bool:
    """True when accuracy falls strictly below chance ``1 / C``."""
    return accuracy < 1.0 / num_classes


# ----------------------------------------------------------------------------
# Mutual information
# ----------------------------------------------------------------------------

def _bin_codes(v: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape[0], dtype=np.int64)
    codes = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(codes, bins - 1)


def binned_mutual_information(x, y, bins: int = 10) -> float:
    """Plug-in MI in nats after equal-width binning of both variables."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("x and y must be equal-length 1-d arrays")
    cx, cy = _bin_codes(x, bins), _bin_codes(y, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (cx, cy), 1.0)
    joint /= x.size
    px = joint.sum(1, keepdims=True)
    py = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def mi_topography(features, probs: np.ndarray, bands: int, channels: int,
                  bins: int = 10) -> np.ndarray:
    """MI between every feature and every class probability, shaped ``[C, bands, channels]``.

    Feature ``channel * bands + band`` maps to cell ``[:, band, channel]``.
    The whole tensor is min-max scaled to [0, 1] (all zeros if constant).
    """
    x = features.features if isinstance(features, FeatureTable) else np.asarray(features)
    p = np.asarray(probs, dtype=np.float64)
    if x.shape[1] != bands * channels:
        raise ValueError(f"feature dim {x.shape[1]} != bands {bands} x channels {channels}")
    if p.shape[0] != x.shape[0]:
        raise ValueError("features and probabilities differ in row count")
    num_classes = p.shape[1]
    mi = np.zeros((num_classes, bands, channels))
    for c in range(num_classes):
        for ch in range(channels):
            for b in range(bands):
                mi[c, b, ch] = binned_mutual_information(x[:, ch * bands + b], p[:, c], bins)
    lo, hi = mi.min(), mi.max()
    if hi > lo:
        return (mi - lo) / (hi - lo)
    return np.zeros_like(mi)


def save_mi_csv(mi: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("class,band,channel,value\n")
        for c, b, ch in np.ndindex(*mi.shape):
            fh.write(f"{c},{b},{ch},{format(float(mi[c, b, ch]), '.17g')}\n")


# ----------------------------------------------------------------------------
# Embedding export
# ----------------------------------------------------------------------------

def export_embeddings(params: net.MLPParams, table: FeatureTable, path,
                      standardizer: Optional[Standardizer] = None) -> None:
    """Eval-mode ``h2`` per record, in table order."""
    x = table.features if standardizer is None else standardizer(table.features)
    emb = net.embed(params, x)
    header = ["subject", "trial", "window", "label"] + [f"e{k}" for k in range(emb.shape[1])]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(table)):
            vals = ",".join(format(float(v), ".17g") for v in emb[i])
            fh.write(f"{table.subject[i]},{table.trial[i]},{table.window[i]},{table.labels[i]},{vals}\n")


# ----------------------------------------------------------------------------
# Leave-one-subject-out
# ----------------------------------------------------------------------------

@dataclass
class RunReport:
    subjects: list
    fold_accuracies: list
    confusions: list
    num_classes: int
    epoch_logs: list = field(default_factory=list)
    mi: Optional[np.ndarray] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        # population standard deviation across folds
        return float(np.std(self.fold_accuracies))

    @property
    def negative_transfer_flags(self) -> list:
        return [detect_negative_transfer(a, self.num_classes) for a in self.fold_accuracies]

    @property
    def negative_transfer_count(self) -> int:
        return int(sum(self.negative_transfer_flags))

    def to_dict(self) -> dict:
        return {
            "subjects": self.subjects,
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "confusion_matrices": [np.asarray(c).tolist() for c in self.confusions],
            "negative_transfer_flags": self.negative_transfer_flags,
            "negative_transfer_count": self.negative_transfer_count,
            "num_classes": self.num_classes,
            "epoch_logs": self.epoch_logs,
            "mi": None if self.mi is None else self.mi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["subjects"], d["fold_accuracies"],
                   [np.array(c) for c in d["confusion_matrices"]], d["num_classes"],
                   d.get("epoch_logs", []), None if d.get("mi") is None else np.array(d["mi"]))

    def save(self, path) -> None:
        write_atomic(path, json.dumps(self.to_dict(), indent=1) + "\n")


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _run_fold(args):
    table, subject, config = args
    from .datamodel import split_for_subject

    split = split_for_subject(table, subject)
    params, rep = fit(split, config)
    target = split.evaluation_target()
    probs = net.predict_proba(params, rep.standardizer(target.features))
    return subject, rep, probs


def loso_run(table: FeatureTable, config: RunConfig, jobs: int = 1,
             bands: Optional[int] = 5) -> RunReport:
    """Fit every leave-one-subject-out split and aggregate.

    When the feature dimension is a multiple of ``bands`` the report also
    holds the MI topography of the pooled held-out predictions.
    """
    loso_splits(table)  # validates labels and subject count
    subjects = table.subjects
    tasks = [(table, s, config) for s in subjects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    accs = [r[1].target_accuracy for r in results]
    confs = [r[1].confusion for r in results]
    logs = [{"subject": s, "epochs": rep.epoch_logs} for s, rep, _ in results]
    mi = None
    if bands and table.dim % bands == 0:
        order = np.concatenate([np.flatnonzero(table.subject == s) for s in subjects])
        probs = np.vstack([r[2] for r in results])
        mi = mi_topography(table.features[order], probs, bands, table.dim // bands)
    return RunReport(subjects, accs, confs, table.num_classes, logs, mi)


ABLATION_ROWS = (
    ("without-SS-Mix", "no_ss_mix"),
    ("without-MMD", "no_mmd"),
    ("without-CMMD", "no_cmmd"),
    ("without-similarity-consistency-source", "no_dscl_source"),
    ("without-similarity-consistency-target", "no_dscl_target"),
    ("without-pseudo-confidence", "no_pseudo_confidence"),
    ("full-model", None),
)


def ablation_configs(config: RunConfig) -> list:
    base = config.replace(**{f: False for f in ABLATION_FLAGS})
    return [(name, base if flag is None else base.replace(**{flag: True}))
            for name, flag in ABLATION_ROWS]


def ablation_sweep(table: FeatureTable, config: RunConfig, jobs: int = 1) -> list:
    """Six single-component ablations plus the full model, as report rows."""
    rows = []
    for name, cfg in ablation_configs(config):
        rep = loso_run(table, cfg, jobs=jobs, bands=None)
        rows.append({
            "strategy": name,
            "mean_accuracy": rep.mean,
            "std_accuracy": rep.std,
            "fold_accuracies": rep.fold_accuracies,
            "negative_transfer_count": rep.negative_transfer_count,
        })
    return rows
