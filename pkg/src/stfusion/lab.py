"""Pipeline orchestration: warmup + variational DropPath training, posterior
strategy sampling, training-free evaluation, ranking against the exhaustive
standalone oracle, and layer-level preference reporting.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import data as D
from . import gates as G
from . import tensor as T
from .errors import ContractError, TrainingDiverged
from .gates import GateParams, GateSample, ObjectiveConfig, objective
from .model import (
    FusionStrategy,
    FusionUnitKind,
    Subnetwork,
    TemplateNetwork,
    materialize_strategy,
    recover_strategy,
    unit_name,
)
from .tensor import SGD, Tensor, backward, softmax_cross_entropy


@dataclass
class TrainSchedule:
    warmup_epochs: int = 10
    main_epochs: int = 30
    batch_size: int = 16
    lr: float = 0.05
    lr_decay_epochs: tuple = (20,)
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.main_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ContractError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e in self.lr_decay_epochs:
            if epoch >= e:
                lr *= self.lr_decay_factor
        return lr


@dataclass
class StrategyEvaluation:
    strategy: FusionStrategy
    val_accuracy: float
    active_param_count: int
    mult_add_proxy: int


def _accuracy(forward_fn, dataset: D.ClipDataset, batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        clips = dataset.clips[start:start + batch_size].astype(np.float64)
        labels = dataset.labels[start:start + batch_size]
        logits = forward_fn(Tensor(clips))
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return correct / len(dataset)


def template_accuracy(net: TemplateNetwork, dataset: D.ClipDataset) -> float:
    """Ungated template accuracy in eval mode."""
    gates = GateSample.all_on(net.config)
    return _accuracy(lambda x: net.forward(x, gates, training=False), dataset)


def train_template(
    net: TemplateNetwork,
    params: GateParams,
    train: D.ClipDataset,
    val: D.ClipDataset,
    schedule: TrainSchedule,
    cfg: ObjectiveConfig,
) -> list:
    """Warmup (all gates on), then joint weight/gate training on the full objective.

    Returns per-epoch history records (phase, epoch, objective breakdown,
    val accuracy) as JSON-ready dicts.
    """
    if len(train) == 0:
        raise ContractError("training dataset is empty")
    history = []
    gate_rng = np.random.default_rng([schedule.seed, 777])
    all_on = GateSample.all_on(net.config)

    opt_w = SGD(net.parameters(), schedule.lr, momentum=0.9)
    epoch = 0
    for _ in range(schedule.warmup_epochs):
        opt_w.lr = schedule.lr_at(epoch)
        nlls = []
        for clips, labels in D.batches(train, schedule.batch_size, schedule.seed, epoch):
            logits = net.forward(Tensor(clips), all_on, training=True)
            loss = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch)
            backward(loss)
            opt_w.step()
        # epoch-level breakdown at the (fixed) initial gate parameters
        nll_epoch = _epoch_nll(net, all_on, train, schedule)
        bd = objective(Tensor(np.float64(nll_epoch)), params, net.gated_parameters(), cfg)
        history.append(_record("warmup", epoch, bd, template_accuracy(net, val)))
        epoch += 1

    opt = SGD(net.parameters() + params.trainable_tensors(), schedule.lr, momentum=0.9)
    for main_epoch in range(schedule.main_epochs):
        params.tau = G.temperature_schedule(main_epoch, max(schedule.main_epochs - 1, 1))
        opt.lr = schedule.lr_at(epoch)
        bds = []
        for clips, labels in D.batches(train, schedule.batch_size, schedule.seed, epoch):
            sample = G.sample_gates_concrete(params, gate_rng)
            logits = net.forward(Tensor(clips), sample, training=True)
            nll = softmax_cross_entropy(logits, labels)
            bd = objective(nll, params, net.gated_parameters(), cfg)
            if not np.isfinite(bd.total):
                raise TrainingDiverged(epoch)
            backward(bd.total_tensor)
            opt.step()
            bds.append(bd)
        mean = lambda key: float(np.mean([getattr(b, key) for b in bds]))
        record = {
            "phase": "main",
            "epoch": epoch,
            "nll": mean("nll"),
            "entropy_term": mean("entropy_term"),
            "weight_term": mean("weight_term"),
            "total": mean("total"),
            "tau": params.tau,
            "val_accuracy": template_accuracy(net, val),
        }
        history.append(record)
        epoch += 1
    return history


def _epoch_nll(net, gates, train, schedule) -> float:
    losses = []
    weights = []
    for start in range(0, len(train), 64):
        clips = train.clips[start:start + 64].astype(np.float64)
        labels = train.labels[start:start + 64]
        logits = net.forward(Tensor(clips), gates, training=False)
        losses.append(softmax_cross_entropy(logits, labels).item())
        weights.append(len(labels))
    return float(np.average(losses, weights=weights))


def _record(phase, epoch, bd, val_acc):
    return {
        "phase": phase,
        "epoch": epoch,
        "nll": bd.nll,
        "entropy_term": bd.entropy_term,
        "weight_term": bd.weight_term,
        "total": bd.total,
        "val_accuracy": val_acc,
    }


# ---------------------------------------------------------------------------
# posterior sampling and training-free evaluation
# ---------------------------------------------------------------------------

def sample_strategies(net: TemplateNetwork, params: GateParams, count: int, rng) -> list:
    """i.i.d. posterior strategy draws (with replacement; duplicates allowed)."""
    return [recover_strategy(G.sample_gates_hard(params, rng)) for _ in range(count)]


def evaluate_strategy(
    net: TemplateNetwork,
    strategy: FusionStrategy,
    val: D.ClipDataset,
    recalibrate: D.ClipDataset | None = None,
) -> StrategyEvaluation:
    """Training-free evaluation of a materialized strategy on held-out data.

    If `recalibrate` is given, batch-norm running statistics are re-estimated
    over one pass of that dataset for this evaluation only; the template's
    stored statistics are restored afterwards.
    """
    if len(val) == 0:
        raise ContractError("validation dataset is empty")
    sub = materialize_strategy(net, strategy)
    snapshot = None
    if recalibrate is not None:
        snapshot = [bn.state() for bn in net.batch_norms()]
        for bn in net.batch_norms():
            bn.initialized = False
        for start in range(0, len(recalibrate), 64):
            clips = recalibrate.clips[start:start + 64].astype(np.float64)
            sub.forward(Tensor(clips), training=True)
    try:
        acc = _accuracy(lambda x: sub.forward(x, training=False), val)
    finally:
        if snapshot is not None:
            for bn, state in zip(net.batch_norms(), snapshot):
                bn.load_state(state)
    return StrategyEvaluation(
        strategy=strategy,
        val_accuracy=acc,
        active_param_count=sub.active_param_count(),
        mult_add_proxy=sub.mult_add_proxy(),
    )


def select_best(evals: list) -> StrategyEvaluation:
    """Argmax accuracy; ties broken by cheaper compute, then fewer params."""
    if not evals:
        raise ContractError("select_best requires a nonempty list")
    best = evals[0]
    for ev in evals[1:]:
        if ev.val_accuracy > best.val_accuracy:
            best = ev
        elif ev.val_accuracy == best.val_accuracy:
            if (ev.mult_add_proxy, ev.active_param_count) < (best.mult_add_proxy, best.active_param_count):
                best = ev
    return best


# ---------------------------------------------------------------------------
# standalone oracle
# ---------------------------------------------------------------------------

def train_standalone(
    strategy: FusionStrategy,
    config,
    train: D.ClipDataset,
    val: D.ClipDataset,
    schedule: TrainSchedule,
) -> float:
    """Ground-truth oracle: train a fresh network holding only the strategy's
    branches and return the best validation accuracy seen."""
    from .model import build_template

    if len(train) == 0:
        raise ContractError("training dataset is empty")
    net = build_template(config, seed=schedule.seed)
    sub = materialize_strategy(net, strategy)
    opt = SGD(sub.active_parameters(), schedule.lr, momentum=0.9)
    total_epochs = schedule.warmup_epochs + schedule.main_epochs
    best = 0.0
    for epoch in range(total_epochs):
        opt.lr = schedule.lr_at(epoch)
        for clips, labels in D.batches(train, schedule.batch_size, schedule.seed, epoch):
            logits = sub.forward(Tensor(clips), training=True)
            loss = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch)
            backward(loss)
            opt.step()
        best = max(best, _accuracy(lambda x: sub.forward(x, training=False), val))
    return best


def rank_correlation(a, b) -> float:
    """Spearman rho with average ranks for ties.

    A constant input carries no rank information; that case is reported as 0.0
    rather than NaN so downstream comparisons stay well-defined.
    """
    if len(a) != len(b):
        raise ContractError(f"rank_correlation needs equal lengths, got {len(a)} and {len(b)}")
    if len(a) < 2:
        raise ContractError("rank_correlation needs at least 2 points")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# layer preference report
# ---------------------------------------------------------------------------

@dataclass
class LayerPreference:
    layer: int
    p_edge: float
    p_S: float
    p_ST: float
    eq7_S: float
    eq7_ST: float
    freq_S: float
    freq_ST: float
    freq_SST: float
    freq_skip: float
    chosen_unit: str


@dataclass
class PreferenceReport:
    rows: list

    CSV_HEADER = [
        "layer", "p_edge", "p_S", "p_ST", "eq7_S", "eq7_ST",
        "freq_S", "freq_ST", "freq_SST", "freq_skip", "chosen_unit",
    ]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_HEADER)
            for r in self.rows:
                writer.writerow([
                    r.layer, repr(r.p_edge), repr(r.p_S), repr(r.p_ST),
                    repr(r.eq7_S), repr(r.eq7_ST),
                    repr(r.freq_S), repr(r.freq_ST), repr(r.freq_SST), repr(r.freq_skip),
                    r.chosen_unit,
                ])


def layer_preference_report(params: GateParams, best: FusionStrategy) -> PreferenceReport:
    rows = []
    for i, ((p_edge, p_s, p_st), layer) in enumerate(zip(params.drop_probs(), best.layers), start=1):
        comp = G.unit_composition(p_s, p_st)
        rows.append(LayerPreference(
            layer=i,
            p_edge=p_edge,
            p_S=p_s,
            p_ST=p_st,
            eq7_S=G.marginal_eq7(p_s),
            eq7_ST=G.marginal_eq7(p_st),
            freq_S=comp["S"],
            freq_ST=comp["ST"],
            freq_SST=comp["S+ST"],
            freq_skip=comp["skip"],
            chosen_unit=unit_name(layer.u),
        ))
    return PreferenceReport(rows=rows)


def write_evaluations_csv(evals: list, path):
    """Evaluations sorted by accuracy (best first, tie rule matching select_best)."""
    ordered = sorted(
        evals,
        key=lambda ev: (-ev.val_accuracy, ev.mult_add_proxy, ev.active_param_count),
    )
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy_json", "val_accuracy", "active_params", "mult_adds"])
        for ev in ordered:
            writer.writerow([
                json.dumps(ev.strategy.to_json(), sort_keys=True),
                repr(ev.val_accuracy),
                ev.active_param_count,
                ev.mult_add_proxy,
            ])
