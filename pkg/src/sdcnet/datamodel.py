"""Feature tables, domain splits, run configuration and the synthetic generator.

A :class:`FeatureTable` stores its records column-wise in read-only numpy
arrays.  Unlabeled records carry the label ``-1``.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.linalg import expm

UNLABELED = -1


class FormatError(ValueError):
    """Malformed feature or config file."""


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class FeatureRecord:
    subject_id: int
    trial_id: int
    window_id: int
    features: np.ndarray
    label: Optional[int] = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureTable:
    subject: np.ndarray
    trial: np.ndarray
    window: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d array")
        n = feats.shape[0]
        cols = {}
        for name in ("subject", "trial", "window", "labels"):
            col = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if col.shape[0] != n:
                raise ValueError(f"column {name!r} has {col.shape[0]} rows, expected {n}")
            cols[name] = col
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if np.any(cols["labels"] >= self.num_classes) or np.any(cols["labels"] < UNLABELED):
            raise ValueError(f"labels must lie in [0, {self.num_classes}) or be {UNLABELED}")
        for name in ("subject", "trial", "window"):
            if np.any(cols[name] < 0):
                raise ValueError(f"{name} ids must be >= 0")
        object.__setattr__(self, "features", _readonly(feats))
        for name, col in cols.items():
            object.__setattr__(self, name, _readonly(col))

    @classmethod
    def from_records(cls, records, dim: int, num_classes: int) -> "FeatureTable":
        records = list(records)
        feats = np.zeros((len(records), dim))
        for i, r in enumerate(records):
            if len(r.features) != dim:
                raise ValueError(f"record {i} has {len(r.features)} features, expected {dim}")
            feats[i] = r.features
        return cls(
            subject=[r.subject_id for r in records],
            trial=[r.trial_id for r in records],
            window=[r.window_id for r in records],
            features=feats,
            labels=[UNLABELED if r.label is None else r.label for r in records],
            num_classes=num_classes,
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(self.labels != UNLABELED))

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject))

    @property
    def records(self) -> Iterator[FeatureRecord]:
        for i in range(len(self)):
            lab = int(self.labels[i])
            yield FeatureRecord(
                int(self.subject[i]), int(self.trial[i]), int(self.window[i]),
                self.features[i], None if lab == UNLABELED else lab,
            )

    def take(self, index) -> "FeatureTable":
        index = np.asarray(index)
        return FeatureTable(
            self.subject[index], self.trial[index], self.window[index],
            self.features[index], self.labels[index], self.num_classes,
        )

    def with_features(self, features: np.ndarray) -> "FeatureTable":
        return FeatureTable(self.subject, self.trial, self.window, features,
                            self.labels, self.num_classes)

    def without_labels(self) -> "FeatureTable":
        return FeatureTable(self.subject, self.trial, self.window, self.features,
                            np.full(len(self), UNLABELED), self.num_classes)

    def equals(self, other: "FeatureTable") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in ("subject", "trial", "window", "features", "labels"))
        )

    @staticmethod
    def concat(tables) -> "FeatureTable":
        tables = list(tables)
        return FeatureTable(
            np.concatenate([t.subject for t in tables]),
            np.concatenate([t.trial for t in tables]),
            np.concatenate([t.window for t in tables]),
            np.concatenate([t.features for t in tables]),
            np.concatenate([t.labels for t in tables]),
            tables[0].num_classes,
        )


class DomainSplit:
    """Labeled source plus a target whose labels are sealed for evaluation."""

    def __init__(self, source: FeatureTable, target: FeatureTable):
        if not source.is_labeled:
            raise ValueError("source domain must be fully labeled")
        if source.dim != target.dim or source.num_classes != target.num_classes:
            raise ValueError("source and target disagree on dim or num_classes")
        shared = set(source.subjects) & set(target.subjects)
        if shared:
            raise ValueError(f"subjects {sorted(shared)} appear in both source and target")
        self.source = source
        self.target = target.without_labels()
        self._target_labels = target.labels

    @property
    def target_subjects(self) -> list[int]:
        return self.target.subjects

    def evaluation_target(self) -> FeatureTable:
        """Target table with its true labels. For scoring only, never for training."""
        return FeatureTable(self.target.subject, self.target.trial, self.target.window,
                            self.target.features, self._target_labels, self.target.num_classes)


# ----------------------------------------------------------------------------
# Feature CSV
# ----------------------------------------------------------------------------

_ID_COLUMNS = ["subject", "trial", "window", "label"]


def save_feature_table(table: FeatureTable, path) -> None:
    path = Path(path)
    header = _ID_COLUMNS + [f"f{k}" for k in range(table.dim)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(table)):
            ids = (table.subject[i], table.trial[i], table.window[i], table.labels[i])
            vals = ",".join(format(float(v), ".17g") for v in table.features[i])
            fh.write(f"{ids[0]},{ids[1]},{ids[2]},{ids[3]}" + ("," + vals if vals else "") + "\n")


def load_feature_table(path, num_classes: Optional[int] = None) -> FeatureTable:
    """Read a feature CSV.

    ``num_classes`` defaults to one more than the largest label present.
    Errors name the offending 1-based line number.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: line 1: missing header") from None
        if header[:4] != _ID_COLUMNS:
            raise FormatError(f"{path}: line 1: header must start with {','.join(_ID_COLUMNS)}")
        dim = len(header) - 4
        if header[4:] != [f"f{k}" for k in range(dim)]:
            raise FormatError(f"{path}: line 1: feature columns must be f0..f{dim - 1}")
        ids, feats = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 4:
                raise FormatError(f"{path}: line {lineno}: expected {dim + 4} fields, got {len(row)}")
            try:
                rid = [int(v) for v in row[:4]]
                vec = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vec):
                raise FormatError(f"{path}: line {lineno}: non-finite feature value")
            if min(rid[:3]) < 0 or rid[3] < UNLABELED:
                raise FormatError(f"{path}: line {lineno}: negative id or label")
            if num_classes is not None and rid[3] >= num_classes:
                raise FormatError(f"{path}: line {lineno}: label {rid[3]} >= num_classes {num_classes}")
            ids.append(rid)
            feats.append(vec)
    ids_arr = np.array(ids, dtype=np.int64).reshape(-1, 4)
    if num_classes is None:
        num_classes = int(ids_arr[:, 3].max()) + 1 if len(ids_arr) else 1
        num_classes = max(num_classes, 1)
    return FeatureTable(
        ids_arr[:, 0], ids_arr[:, 1], ids_arr[:, 2],
        np.array(feats, dtype=np.float64).reshape(-1, dim),
        ids_arr[:, 3], num_classes,
    )


# ----------------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------------

ABLATION_FLAGS = ("no_ss_mix", "no_mmd", "no_cmmd", "no_dscl_source",
                  "no_dscl_target", "no_pseudo_confidence")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    dropout: float = 0.25
    hidden_dims: tuple = (64, 64)
    mix_beta_param: float = 0.5
    augment_factor: float = 1.0
    kernel_count: int = 5
    kernel_sample_max: int = 512
    tau_start: float = 0.80
    tau_end: float = 0.95
    tau_pu_start: float = 0.95
    tau_pu_end: float = 0.80
    tau_pl_start: float = 0.05
    tau_pl_end: float = 0.20
    alpha_start: float = 1.0
    alpha_end: float = 0.1
    rho0: float = 0.3
    rho1: float = 0.6
    lr_decay: float = 0.0
    standardize: bool = True
    swap_lambda_beta_pt: bool = False
    cmmd_class_mean: bool = False
    cmmd_prior_weighted: bool = False
    target_pairs_accepted_only: bool = False
    no_ss_mix: bool = False
    no_mmd: bool = False
    no_cmmd: bool = False
    no_dscl_source: bool = False
    no_dscl_target: bool = False
    no_pseudo_confidence: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if len(self.hidden_dims) != 2 or min(self.hidden_dims) < 1:
            raise ConfigError("hidden_dims must be two positive integers")
        if self.mix_beta_param <= 0:
            raise ConfigError("mix_beta_param must be > 0")
        if self.augment_factor < 0:
            raise ConfigError("augment_factor must be >= 0")
        if self.kernel_count < 1 or self.kernel_sample_max < 2:
            raise ConfigError("kernel_count must be >= 1 and kernel_sample_max >= 2")
        for name in ("tau_start", "tau_end", "tau_pu_start", "tau_pu_end",
                     "tau_pl_start", "tau_pl_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        # linear ramps keep the ordering at every epoch iff it holds at both ends
        if not (self.tau_pl_start < self.tau_pu_start and self.tau_pl_end < self.tau_pu_end):
            raise ConfigError("tau_pl must stay below tau_pu at every epoch")
        if not 0 < self.rho0 < self.rho1:
            raise ConfigError("need 0 < rho0 < rho1")
        if self.lr_decay < 0:
            raise ConfigError("lr_decay must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def source_only(self) -> bool:
        return all(getattr(self, f) for f in ABLATION_FLAGS)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def _parse_value(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return kind(raw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(kinds[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Synthetic covariate-shift data
# ----------------------------------------------------------------------------

def _random_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    skew = a - a.T
    norm = np.linalg.norm(skew, 2)
    if norm == 0 or angle == 0:
        return np.eye(dim)
    return expm(skew * (angle / norm))


def make_synthetic_dataset(num_subjects: int, trials_per_subject: int, windows_per_trial: int,
                           dim: int, num_classes: int, shift_strength: float,
                           noise_sigma: float, seed: int) -> FeatureTable:
    """Class clusters distorted by a per-subject rotation and translation.

    Class means are orthogonal directions scaled so every pair lies at least
    ``6 * noise_sigma`` (and at least sqrt(2)) apart.  Subject ``s`` maps a clean
    sample ``z`` to ``R_s z + t_s`` where ``R_s`` rotates by at most
    ``shift_strength`` radians and ``|t_s| = shift_strength``.  Each trial
    carries one label and a small trial-level offset; trial labels are
    balanced per subject to within one trial.
    """
    if min(num_subjects, trials_per_subject, windows_per_trial, dim, num_classes) < 1:
        raise ValueError("all counts must be >= 1")
    if dim < num_classes:
        raise ValueError("dim must be >= num_classes")
    if shift_strength < 0 or noise_sigma < 0:
        raise ValueError("shift_strength and noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    # orthogonal unit directions are sqrt(2) apart
    radius = max(1.0, 6.0 * noise_sigma / math.sqrt(2.0))
    means = radius * basis[:, :num_classes].T

    subj, tri, win, labs, rows = [], [], [], [], []
    for s in range(num_subjects):
        rot = _random_rotation(rng, dim, shift_strength)
        t = rng.standard_normal(dim)
        t *= shift_strength / max(np.linalg.norm(t), 1e-300)
        trial_labels = rng.permutation(np.arange(trials_per_subject) % num_classes)
        for k in range(trials_per_subject):
            c = int(trial_labels[k])
            offset = 0.5 * noise_sigma * rng.standard_normal(dim)
            clean = means[c] + offset + noise_sigma * rng.standard_normal((windows_per_trial, dim))
            rows.append(clean @ rot.T + t)
            subj += [s] * windows_per_trial
            tri += [k] * windows_per_trial
            win += list(range(windows_per_trial))
            labs += [c] * windows_per_trial
    return FeatureTable(subj, tri, win, np.vstack(rows), labs, num_classes)


def loso_splits(table: FeatureTable) -> list[DomainSplit]:
    if not table.is_labeled:
        raise ValueError("leave-one-subject-out needs a fully labeled table")
    subjects = table.subjects
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    return [split_for_subject(table, s) for s in subjects]


def split_for_subject(table: FeatureTable, subject_id: int) -> DomainSplit:
    mask = table.subject == subject_id
    if not mask.any():
        raise ValueError(f"subject {subject_id} not present in table (have {table.subjects})")
    return DomainSplit(table.take(np.flatnonzero(~mask)), table.take(np.flatnonzero(mask)))
