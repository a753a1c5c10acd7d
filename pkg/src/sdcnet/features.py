"""Differential-entropy band features from raw multichannel signals."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import UNLABELED, FeatureTable, FormatError

BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma")
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class BandDefinition:
    name: str
    low_hz: float
    high_hz: float

    def __post_init__(self):
        if self.name not in BAND_NAMES:
            raise ValueError(f"unknown band {self.name!r}")
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(f"band {self.name}: need 0 < low_hz < high_hz")


DEFAULT_BANDS = (
    BandDefinition("delta", 1.0, 4.0),
    BandDefinition("theta", 4.0, 8.0),
    BandDefinition("alpha", 8.0, 13.0),
    BandDefinition("beta", 13.0, 30.0),
    BandDefinition("gamma", 30.0, 50.0),
)


@dataclass(frozen=True)
class SpectralConfig:
    window_seconds: float = 1.0
    hop_seconds: float = 1.0
    taper: str = "hann"
    bands: tuple = DEFAULT_BANDS

    def __post_init__(self):
        if not 0 < self.hop_seconds <= self.window_seconds:
            raise ValueError("need 0 < hop_seconds <= window_seconds")
        if self.taper not in ("hann", "rectangular"):
            raise ValueError(f"unknown taper {self.taper!r}")


@dataclass(frozen=True, eq=False)
class EEGTrial:
    subject_id: int
    trial_id: int
    sample_rate_hz: float
    signal: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        sig = np.asarray(self.signal, dtype=np.float64)
        if sig.ndim != 2:
            raise ValueError("signal must be [channels x samples]")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be > 0")
        if not np.all(np.isfinite(sig)):
            raise ValueError("signal contains NaN or Inf")
        object.__setattr__(self, "signal", sig)

    @property
    def channels(self) -> int:
        return self.signal.shape[0]


def _taper(kind: str, n: int) -> np.ndarray:
    if kind == "rectangular":
        return np.ones(n)
    # periodic Hann: a bin-centred tone leaks into its two neighbours only
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def band_variance(trial: EEGTrial, config: SpectralConfig = SpectralConfig()) -> np.ndarray:
    """Band-limited variance per window, channel and band.

    Each window is demeaned, tapered and transformed; one-sided power is
    normalised by the taper energy so that summing every bin recovers the
    window's mean square.  A band takes the bins with
    ``low_hz <= f < high_hz``.  Returns ``[windows, channels, bands]``.
    """
    fs = trial.sample_rate_hz
    nyquist = fs / 2.0
    for band in config.bands:
        if band.high_hz >= nyquist:
            raise ValueError(f"band {band.name} ({band.high_hz} Hz) reaches Nyquist {nyquist} Hz")
    win = int(round(config.window_seconds * fs))
    hop = int(round(config.hop_seconds * fs))
    n_samples = trial.signal.shape[1]
    if win < 2 or n_samples < win:
        raise ValueError(f"signal of {n_samples} samples is shorter than one {win}-sample window")
    n_windows = (n_samples - win) // hop + 1

    starts = hop * np.arange(n_windows)
    idx = starts[:, None] + np.arange(win)[None, :]
    segs = trial.signal[:, idx]  # [channels, windows, win]
    segs = segs - segs.mean(axis=-1, keepdims=True)
    w = _taper(config.taper, win)
    spectrum = np.fft.rfft(segs * w, axis=-1)
    power = np.abs(spectrum) ** 2 / (win * np.sum(w * w))
    # one-sided spectrum: double every bin that has a negative-frequency twin
    if win % 2 == 0:
        power[..., 1:-1] *= 2.0
    else:
        power[..., 1:] *= 2.0
    freqs = np.fft.rfftfreq(win, d=1.0 / fs)

    out = np.empty((n_windows, trial.channels, len(config.bands)))
    for b, band in enumerate(config.bands):
        sel = (freqs >= band.low_hz) & (freqs < band.high_hz)
        out[:, :, b] = power[..., sel].sum(axis=-1).T
    return out


def differential_entropy(variance):
    """Gaussian differential entropy ``0.5 * ln(2 pi e variance)`` in nats."""
    v = np.asarray(variance, dtype=np.float64)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("differential entropy needs a finite positive variance")
    de = 0.5 * np.log(2.0 * np.pi * np.e * v)
    return float(de) if de.ndim == 0 else de


def extract_de_features(trials, config: SpectralConfig = SpectralConfig(),
                        num_classes: Optional[int] = None) -> FeatureTable:
    """One record per (trial, window); feature index is ``channel * bands + band``."""
    trials = list(trials)
    if not trials:
        raise ValueError("no trials given")
    channels = trials[0].channels
    fs = trials[0].sample_rate_hz
    for t in trials:
        if t.channels != channels or t.sample_rate_hz != fs:
            raise ValueError("all trials must share channel count and sample rate")
    n_bands = len(config.bands)
    subj, tri, win, labs, rows = [], [], [], [], []
    for t in trials:
        var = band_variance(t, config)
        de = differential_entropy(np.maximum(var, VARIANCE_FLOOR))
        n = de.shape[0]
        rows.append(de.reshape(n, channels * n_bands))
        subj += [t.subject_id] * n
        tri += [t.trial_id] * n
        win += list(range(n))
        labs += [UNLABELED if t.label is None else t.label] * n
    if num_classes is None:
        num_classes = max(max(labs) + 1, 1)
    return FeatureTable(subj, tri, win, np.vstack(rows), labs, num_classes)


# ----------------------------------------------------------------------------
# Raw trial CSV
#
#   subject,trial,label,sample_rate,channels,samples      <- file header, once
#   3,0,1,200,2,400                                        <- per-trial metadata
#   x_00,x_01,...,x_0{samples-1}                           <- one row per channel
#   x_10,...
# ----------------------------------------------------------------------------

RAW_HEADER = "subject,trial,label,sample_rate,channels,samples"


def save_raw_trials(trials, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(RAW_HEADER + "\n")
        for t in trials:
            label = UNLABELED if t.label is None else t.label
            fh.write(f"{t.subject_id},{t.trial_id},{label},{t.sample_rate_hz!r},"
                     f"{t.channels},{t.signal.shape[1]}\n")
            for row in t.signal:
                fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def load_raw_trials(path) -> list[EEGTrial]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != RAW_HEADER:
        raise FormatError(f"{path}: line 1: header must be {RAW_HEADER!r}")
    trials = []
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        meta_line = i + 1
        try:
            subj, trial, label, fs, ch, ns = lines[i].split(",")
            subj, trial, label, ch, ns = int(subj), int(trial), int(label), int(ch), int(ns)
            fs = float(fs)
        except ValueError:
            raise FormatError(f"{path}: line {meta_line}: bad trial metadata") from None
        if ch < 1 or ns < 1 or i + ch > len(lines) - 1:
            raise FormatError(f"{path}: line {meta_line}: expected {ch} channel rows")
        sig = np.empty((ch, ns))
        for c in range(ch):
            lineno = i + 2 + c
            parts = lines[i + 1 + c].split(",")
            if len(parts) != ns:
                raise FormatError(f"{path}: line {lineno}: expected {ns} samples, got {len(parts)}")
            try:
                sig[c] = [float(v) for v in parts]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
        try:
            trials.append(EEGTrial(subj, trial, fs, sig, None if label == UNLABELED else label))
        except ValueError as exc:
            raise FormatError(f"{path}: line {meta_line}: {exc}") from None
        i += 1 + ch
    return trials


def synthetic_trials(num_subjects: int, trials_per_subject: int, channels: int,
                     seconds: float, sample_rate_hz: float, num_classes: int,
                     seed: int) -> list[EEGTrial]:
    """Noise plus class-dependent band tones; handy for exercising ``extract``."""
    rng = np.random.default_rng(seed)
    centres = [2.5, 6.0, 10.0, 20.0, 40.0]
    n = int(round(seconds * sample_rate_hz))
    tt = np.arange(n) / sample_rate_hz
    out = []
    for s in range(num_subjects):
        gain = rng.uniform(0.5, 2.0, size=channels)
        for k in range(trials_per_subject):
            c = k % num_classes
            sig = rng.standard_normal((channels, n))
            f = centres[c % len(centres)]
            sig += 3.0 * np.sin(2 * math.pi * f * tt + rng.uniform(0, 2 * math.pi, (channels, 1)))
            out.append(EEGTrial(s, k, sample_rate_hz, sig * gain[:, None], c))
    return out
