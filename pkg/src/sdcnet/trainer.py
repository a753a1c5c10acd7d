"""Loss composition, weight schedules and the training loop.

Total objective per step::

    L = L_ds + alpha * L_mmd + beta * L_cmmd + beta * L_pt + lambda * L_ps

``swap_lambda_beta_pt`` exchanges the coefficients of the two pairwise terms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import net
from .align import KernelBank, PseudoLabelSet, cmmd2, filter_pseudo_labels, median_heuristic, mmd2
from .augment import MixPolicy, ss_mix
from .datamodel import DomainSplit, FeatureTable, RunConfig
from .dscl import PairSelection, source_pairwise_loss, target_pair_selection, target_pairwise_loss

RNG_STREAMS = ("init", "mix", "source_order", "target_order", "dropout", "kernel")


# ----------------------------------------------------------------------------
# Schedules
# ----------------------------------------------------------------------------

def _ramp(start: float, end: float, e: int, epochs: int) -> float:
    frac = 0.0 if epochs <= 1 else e / (epochs - 1)
    v = start + (end - start) * frac
    return min(max(v, min(start, end)), max(start, end))


def alpha_schedule(e: int, config: RunConfig) -> float:
    return _ramp(config.alpha_start, config.alpha_end, e, config.epochs)


def heaviside(x: float) -> float:
    return 1.0 if x >= 0 else 0.0


def beta_from_loss(l_ds: float, rho0: float, rho1: float) -> float:
    """Step-function weight gated on the current classification loss.

    1 below ``rho0``, 0.5 on ``(rho0, rho1]``, 0 above ``rho1``; exactly at
    ``rho0`` both steps fire and the value is 1.5.
    """
    return heaviside(rho0 - l_ds) + 0.5 * heaviside(l_ds - rho0) * heaviside(rho1 - l_ds)


def lambda_schedule(e: int, epochs: int) -> float:
    return 2.0 * e / epochs


def tau_schedules(e: int, config: RunConfig) -> tuple[float, float, float]:
    """(pseudo-label gate, upper pair threshold, lower pair threshold) at epoch ``e``."""
    return (
        _ramp(config.tau_start, config.tau_end, e, config.epochs),
        _ramp(config.tau_pu_start, config.tau_pu_end, e, config.epochs),
        _ramp(config.tau_pl_start, config.tau_pl_end, e, config.epochs),
    )


# ----------------------------------------------------------------------------
# Objective
# ----------------------------------------------------------------------------

@dataclass
class LossWeights:
    alpha: float
    beta: float
    lam: float


@dataclass
class LossBreakdown:
    l_ds: float
    l_mmd: float
    l_cmmd: float
    l_ps: float
    l_pt: float
    weights: LossWeights
    swap_lambda_beta_pt: bool = False
    accepted_pseudo: int = 0
    target_size: int = 0
    cmmd_classes: int = 0
    positive_pairs: int = 0
    negative_pairs: int = 0
    dead_embeddings: int = 0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.weighted_total()

    def weighted_total(self) -> float:
        w = self.weights
        w_pt, w_ps = (w.lam, w.beta) if self.swap_lambda_beta_pt else (w.beta, w.lam)
        return (self.l_ds + w.alpha * self.l_mmd + w.beta * self.l_cmmd
                + w_pt * self.l_pt + w_ps * self.l_ps)


@dataclass
class ObjectiveResult:
    breakdown: LossBreakdown
    grads: net.Gradients
    pseudo: Optional[PseudoLabelSet]
    selection: Optional[PairSelection]


def needs_target(config: RunConfig) -> bool:
    return not (config.no_mmd and config.no_cmmd and config.no_dscl_target)


def compute_objective(params: net.MLPParams, config: RunConfig, xs: np.ndarray, ys: np.ndarray,
                      xt: np.ndarray, bank: KernelBank, epoch: int, *, mode: str = "train",
                      rng: Optional[np.random.Generator] = None,
                      pseudo: Optional[PseudoLabelSet] = None,
                      selection: Optional[PairSelection] = None,
                      beta: Optional[float] = None) -> ObjectiveResult:
    """Evaluate every enabled loss and its parameter gradient for one batch pair.

    ``pseudo`` and ``selection`` may be supplied to freeze the pseudo-label
    gate and target pair selection (both are otherwise derived from the
    current parameters); ``beta`` likewise overrides the loss-gated weight.
    """
    dropout = config.dropout if mode == "train" else 0.0
    cache_s = net.forward(params, xs, mode, rng, dropout)
    l_ds, d_logits = net.cross_entropy_loss(cache_s, ys)
    if beta is None:
        beta = beta_from_loss(l_ds, config.rho0, config.rho1)
    weights = LossWeights(alpha_schedule(epoch, config), beta,
                          lambda_schedule(epoch, config.epochs))
    w_pt, w_ps = (weights.lam, beta) if config.swap_lambda_beta_pt else (beta, weights.lam)
    tau, tau_pu, tau_pl = tau_schedules(epoch, config)

    hs = cache_s.h2
    d_hs = np.zeros_like(hs)
    l_mmd = l_cmmd = l_ps = l_pt = 0.0
    stats = dict(target_size=len(xt))

    if not config.no_dscl_source and len(xs) >= 2:
        l_ps, g = source_pairwise_loss(hs, ys)
        d_hs += w_ps * g

    cache_t = None
    if needs_target(config):
        cache_t = net.forward(params, xt, mode, rng, dropout)
        ht = cache_t.h2
        d_ht = np.zeros_like(ht)
        want_pseudo = not config.no_cmmd or (config.target_pairs_accepted_only
                                             and not config.no_dscl_target)
        if pseudo is None and want_pseudo:
            gate = 0.0 if config.no_pseudo_confidence else tau
            pseudo = filter_pseudo_labels(net.forward(params, xt, "eval").probs, gate)
        if pseudo is not None:
            stats["accepted_pseudo"] = len(pseudo)
        if not config.no_mmd:
            l_mmd, gs, gt = mmd2(hs, ht, bank)
            d_hs += weights.alpha * gs
            d_ht += weights.alpha * gt
        if not config.no_cmmd:
            prior = None
            if config.cmmd_prior_weighted:
                prior = np.bincount(ys, minlength=params.num_classes) / len(ys)
            res = cmmd2(hs, ys, ht, pseudo, bank, params.num_classes,
                        class_mean=config.cmmd_class_mean, class_weights=prior)
            l_cmmd = res.value
            d_hs += beta * res.grad_source
            d_ht += beta * res.grad_target
            stats["cmmd_classes"] = res.classes
        if not config.no_dscl_target:
            if selection is None:
                restrict = pseudo.indices if config.target_pairs_accepted_only else None
                selection = target_pair_selection(ht, tau_pu, tau_pl, restrict)
            l_pt, g = target_pairwise_loss(ht, selection)
            d_ht += w_pt * g
            stats["positive_pairs"] = selection.positives
            stats["negative_pairs"] = selection.negatives
        stats["dead_embeddings"] = int(np.sum(~np.any(ht != 0, axis=1)))

    grads = net.backward(params, cache_s, d_logits, d_hs if np.any(d_hs) else None)
    if cache_t is not None:
        grads = net.add_gradients(grads, net.backward(params, cache_t, None, d_ht))
    stats["dead_embeddings"] = stats.get("dead_embeddings", 0) + int(np.sum(~np.any(hs != 0, axis=1)))
    bd = LossBreakdown(l_ds, l_mmd, l_cmmd, l_ps, l_pt, weights,
                       swap_lambda_beta_pt=config.swap_lambda_beta_pt, **stats)
    return ObjectiveResult(bd, grads, pseudo, selection)


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainState:
    config: RunConfig
    params: net.MLPParams
    optimizer: net.OptimizerState
    rngs: dict
    bank: KernelBank = field(default_factory=lambda: KernelBank((1.0,)))
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def schedule(self) -> dict:
        tau, tau_pu, tau_pl = tau_schedules(self.epoch, self.config)
        return dict(alpha=alpha_schedule(self.epoch, self.config),
                    lam=lambda_schedule(self.epoch, self.config.epochs),
                    tau=tau, tau_pu=tau_pu, tau_pl=tau_pl)


def make_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


def init_state(config: RunConfig, input_dim: int, num_classes: int) -> TrainState:
    rngs = make_rngs(config.seed)
    params = net.init_params(input_dim, config.hidden_dims, num_classes, rngs["init"])
    opt = net.init_optimizer(params, config.learning_rate, config.momentum)
    return TrainState(config, params, opt, rngs)


def learning_rate_at(config: RunConfig, epoch: int) -> float:
    return config.learning_rate / (1.0 + config.lr_decay * epoch)


def train_step(state: TrainState, source_batch, target_batch) -> tuple[TrainState, LossBreakdown]:
    """One SGD step.  ``source_batch`` is ``(features, labels)``; ``target_batch`` features only."""
    xs, ys = source_batch
    res = compute_objective(state.params, state.config, xs, ys, target_batch, state.bank,
                            state.epoch, mode="train", rng=state.rngs["dropout"])
    state.params, state.optimizer = net.sgd_step(
        state.params, res.grads, state.optimizer, learning_rate_at(state.config, state.epoch))
    state.step += 1
    return state, res.breakdown


def refresh_kernel_bank(state: TrainState, source_x: np.ndarray) -> KernelBank:
    cfg = state.config
    n = len(source_x)
    if n > cfg.kernel_sample_max:
        rows = np.sort(state.rngs["kernel"].choice(n, cfg.kernel_sample_max, replace=False))
        sample = source_x[rows]
    else:
        sample = source_x
    sigma = median_heuristic(net.embed(state.params, sample)) if len(sample) >= 2 else 1.0
    state.bank = KernelBank.around(sigma, cfg.kernel_count)
    return state.bank


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 0, sd, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


@dataclass
class FitReport:
    """Outcome of one training run on one split."""
    epoch_logs: list
    steps: int
    target_accuracy: float
    confusion: np.ndarray
    standardizer: Standardizer
    source_size: int
    optimizer: Optional[net.OptimizerState] = None

    def to_dict(self) -> dict:
        return dict(epoch_logs=self.epoch_logs, steps=self.steps,
                    target_accuracy=self.target_accuracy,
                    confusion=self.confusion.tolist(), source_size=self.source_size)


_LOSS_KEYS = ("l_ds", "l_mmd", "l_cmmd", "l_ps", "l_pt", "total")


def _epoch_entry(epoch: int, state: TrainState, rows: list, accuracy: float) -> dict:
    mean = lambda vals: float(np.mean(vals)) if vals else 0.0
    sched = state.schedule
    target_seen = sum(r.target_size for r in rows)
    entry = {"epoch": epoch, "steps": len(rows)}
    for k in _LOSS_KEYS:
        entry[k] = mean([getattr(r, k) for r in rows])
    entry.update(
        alpha=sched["alpha"],
        beta=mean([r.weights.beta for r in rows]),
        lambda_=sched["lam"],
        tau=sched["tau"], tau_pu=sched["tau_pu"], tau_pl=sched["tau_pl"],
        pseudo_accept_rate=(sum(r.accepted_pseudo for r in rows) / target_seen) if target_seen else 0.0,
        positive_pairs=mean([r.positive_pairs for r in rows]),
        negative_pairs=mean([r.negative_pairs for r in rows]),
        dead_embeddings=int(sum(r.dead_embeddings for r in rows)),
        kernel_sigma=float(state.bank.bandwidths[len(state.bank.bandwidths) // 2]),
        target_accuracy=accuracy,
    )
    return entry


def prepare_source(split: DomainSplit, config: RunConfig, rngs: dict) -> FeatureTable:
    if config.no_ss_mix:
        return split.source
    seed = int(rngs["mix"].integers(2 ** 63))
    return ss_mix(split.source, MixPolicy(config.mix_beta_param, config.augment_factor, seed))


def fit(split: DomainSplit, config: RunConfig, log_path=None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[net.MLPParams, FitReport]:
    """Train on ``split`` for ``config.epochs`` epochs of ``ceil(n_source / batch)`` steps.

    ``n_source`` counts the source after augmentation.  Target batches of
    the same size are drawn from an independently reshuffled cycle.  Target
    labels are read only to log per-epoch accuracy.
    """
    state = init_state(config, split.source.dim, split.source.num_classes)
    source = prepare_source(split, config, state.rngs)
    std = (Standardizer.fit(split.source.features) if config.standardize
           else Standardizer.identity(split.source.dim))
    xs_all = std(source.features)
    ys_all = source.labels
    xt_all = std(split.target.features)
    eval_target = split.evaluation_target()
    b = config.batch_size
    n_s, n_t = len(xs_all), len(xt_all)
    if n_s == 0 or n_t == 0:
        raise ValueError("source and target must be non-empty")
    use_target = needs_target(config)
    use_kernels = not (config.no_mmd and config.no_cmmd)

    target_order = np.zeros(0, dtype=np.int64)
    target_pos = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    logs = []
    try:
        for e in range(config.epochs):
            state.epoch = e
            if use_kernels:
                refresh_kernel_bank(state, xs_all)
            order = state.rngs["source_order"].permutation(n_s)
            rows = []
            for start in range(0, n_s, b):
                idx = order[start:start + b]
                tgt = None
                if use_target:
                    need = len(idx)
                    parts = []
                    while need:
                        if target_pos >= len(target_order):
                            target_order = state.rngs["target_order"].permutation(n_t)
                            target_pos = 0
                        take = target_order[target_pos:target_pos + need]
                        target_pos += len(take)
                        need -= len(take)
                        parts.append(take)
                    tgt = xt_all[np.concatenate(parts)]
                else:
                    tgt = xt_all[:0]
                state, bd = train_step(state, (xs_all[idx], ys_all[idx]), tgt)
                rows.append(bd)
            acc = float(np.mean(np.argmax(net.predict_proba(state.params, xt_all), 1)
                                == eval_target.labels))
            entry = _epoch_entry(e, state, rows, acc)
            logs.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if on_epoch:
                on_epoch(entry)
    finally:
        if log_fh:
            log_fh.close()

    pred = np.argmax(net.predict_proba(state.params, xt_all), 1)
    cm = confusion_matrix(eval_target.labels, pred, split.source.num_classes)
    acc = float(np.trace(cm) / cm.sum())
    state.history = logs
    return state.params, FitReport(logs, state.step, acc, cm, std, n_s, state.optimizer)


def fit_supervised(split: DomainSplit, config: RunConfig) -> net.MLPParams:
    """Plain source-only ERM with the same seeding as :func:`fit`; no target, no mixing."""
    rngs = make_rngs(config.seed)
    params = net.init_params(split.source.dim, config.hidden_dims,
                             split.source.num_classes, rngs["init"])
    opt = net.init_optimizer(params, config.learning_rate, config.momentum)
    std = (Standardizer.fit(split.source.features) if config.standardize
           else Standardizer.identity(split.source.dim))
    x = std(split.source.features)
    y = split.source.labels
    for e in range(config.epochs):
        order = rngs["source_order"].permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            cache = net.forward(params, x[idx], "train", rngs["dropout"], config.dropout)
            _, d_logits = net.cross_entropy_loss(cache, y[idx])
            grads = net.backward(params, cache, d_logits)
            params, opt = net.sgd_step(params, grads, opt, learning_rate_at(config, e))
    return params
