"""Training strategies: schedules over loss terms and P/threshold computation.

Strategy summary (E = total epochs):
  ts1  cross-entropy only for epochs 1..E/2, then compute P (activation
       frequency) and thresholds and continue with both loss terms.
  ts2  P (activation frequency) and thresholds from the initial weights,
       both loss terms from the start.
  ts3  as ts2 but P is drawn at random.
  ts4  as ts3 with the cross-entropy term disabled.
  ts5  as ts3 but thresholds are skipped: the sigmoid sees raw norms.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, cross_entropy, images_to_tensor, labels_to_tensor
from .dataset import DatasetSplit
from .sparsity import (
    METHOD_ACTIVATION_FREQUENCY,
    METHOD_RANDOM,
    FilterProbabilityMatrix,
    SparsityConfig,
    ThresholdTensor,
    compute_P_method1,
    compute_P_method2,
    compute_thresholds,
    sigmoid_activations,
    sparsity_loss,
    total_loss,
)

STRATEGIES = ("ts1", "ts2", "ts3", "ts4", "ts5")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, message: str, model: Backbone, log: "TrainLog", epoch: int):
        super().__init__(message)
        self.model = model
        self.log = log
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Optimizer / schedule settings plus the sparsity hyperparameters."""

    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    l2_reg: float = 0.005
    decay_factor: float = 0.5
    patience: int = 10
    seed: int = 0
    image_size: int = 32
    num_filters: int = 16
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)

    def __post_init__(self):
        if isinstance(self.sparsity, dict):
            self.sparsity = SparsityConfig(**self.sparsity)
        for name in ("epochs", "batch_size", "learning_rate", "l2_reg", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.patience < self.epochs:
            raise ValueError("patience must be in (0, epochs)")


@dataclass
class Phase:
    """Contiguous epoch range with a fixed set of active loss terms."""

    start_epoch: int  # 1-based, inclusive
    end_epoch: int
    use_cross_entropy: bool
    use_sparsity: bool


@dataclass
class StrategySchedule:
    strategy: str
    phases: list[Phase]
    p_method: str
    p_compute_epoch: int  # P/thresholds computed after this many epochs (0 = before training)
    thresholds_enabled: bool

    def phase_at(self, epoch: int) -> tuple[int, Phase]:
        for i, phase in enumerate(self.phases):
            if phase.start_epoch <= epoch <= phase.end_epoch:
                return i, phase
        raise ValueError(f"epoch {epoch} not covered by any phase")


def build_schedule(strategy_id: str, config: TrainConfig) -> StrategySchedule:
    """Expand a strategy id into explicit phases and P/threshold timing."""
    strategy = strategy_id.lower()
    epochs = config.epochs
    if strategy == "ts1":
        boundary = epochs // 2
        return StrategySchedule(
            strategy,
            phases=[Phase(1, boundary, True, False), Phase(boundary + 1, epochs, True, True)],
            p_method=METHOD_ACTIVATION_FREQUENCY,
            p_compute_epoch=boundary,
            thresholds_enabled=True,
        )
    if strategy == "ts2":
        return StrategySchedule(
            strategy, [Phase(1, epochs, True, True)], METHOD_ACTIVATION_FREQUENCY, 0, True
        )
    if strategy == "ts3":
        return StrategySchedule(strategy, [Phase(1, epochs, True, True)], METHOD_RANDOM, 0, True)
    if strategy == "ts4":
        return StrategySchedule(strategy, [Phase(1, epochs, False, True)], METHOD_RANDOM, 0, True)
    if strategy == "ts5":
        return StrategySchedule(strategy, [Phase(1, epochs, True, True)], METHOD_RANDOM, 0, False)
    raise ValueError(f"unknown strategy {strategy_id!r}; expected one of {STRATEGIES}")


@dataclass
class TrainLog:
    """Header plus one record per epoch; serializable as JSON lines."""

    header: dict
    records: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def add_epoch(self, **fields) -> None:
        self.records.append(fields)

    def add_event(self, what: str, **fields) -> None:
        self.events.append({"what": what, **fields})

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "header", **self.header}) + "\n")
            for ev in self.events:
                fh.write(json.dumps({"type": "event", **ev}) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"type": "epoch", **rec}) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainLog":
        header, records, events = {}, [], []
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                header = rec
            elif kind == "event":
                events.append(rec)
            else:
                records.append(rec)
        return cls(header, records, events)


@dataclass
class TrainResult:
    model: Backbone
    p_matrix: FilterProbabilityMatrix
    thresholds: ThresholdTensor | None
    log: TrainLog
    diverged: bool = False


def _compute_p_and_thresholds(
    schedule: StrategySchedule,
    dataset: DatasetSplit,
    model: Backbone,
    config: TrainConfig,
) -> tuple[FilterProbabilityMatrix, ThresholdTensor | None]:
    sp = config.sparsity
    if schedule.p_method == METHOD_ACTIVATION_FREQUENCY:
        p_matrix, _ = compute_P_method1(dataset.train, model, sp.filters_per_class)
    else:
        p_matrix = compute_P_method2(
            model.config.num_classes, model.config.num_filters, sp.filters_per_class, sp.seed
        )
    thresholds = None
    if schedule.thresholds_enabled:
        thresholds = compute_thresholds(dataset.train, model, sp.h1, sp.h2)
    return p_matrix, thresholds


def run_strategy(
    schedule: StrategySchedule, dataset: DatasetSplit, config: TrainConfig
) -> TrainResult:
    """Train a backbone under the given strategy schedule.

    Adam with L2 regularization via weight decay; the learning rate is
    multiplied by ``decay_factor`` whenever the validation total loss fails
    to improve for ``patience`` consecutive epochs. Fully deterministic for
    a fixed config and seed.
    """
    if not dataset.train or not dataset.validation:
        raise ValueError("run_strategy needs non-empty train and validation splits")

    backbone_config = BackboneConfig(
        image_size=config.image_size,
        num_filters=config.num_filters,
        num_classes=dataset.num_classes,
    )
    model = Backbone.create(backbone_config, config.seed)

    x_train = images_to_tensor(dataset.train)
    y_train = labels_to_tensor(dataset.train)
    x_val = images_to_tensor(dataset.validation)
    y_val = labels_to_tensor(dataset.validation)
    weights = torch.from_numpy(dataset.class_weights).to(torch.float32)

    log = TrainLog(
        header={
            "strategy": schedule.strategy,
            "seed": config.seed,
            "config": asdict(config),
            "num_classes": dataset.num_classes,
        }
    )

    p_matrix: FilterProbabilityMatrix | None = None
    thresholds: ThresholdTensor | None = None
    if schedule.p_compute_epoch == 0:
        p_matrix, thresholds = _compute_p_and_thresholds(schedule, dataset, model, config)
        log.add_event("compute_P", epoch=0, method=schedule.p_method,
                      thresholds=schedule.thresholds_enabled)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, weight_decay=config.l2_reg
    )
    shuffle_rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    best_val = float("inf")
    epochs_since_improvement = 0
    alpha, beta = config.sparsity.alpha, config.sparsity.beta
    last_good_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.epochs + 1):
        phase_index, phase = schedule.phase_at(epoch)

        order = shuffle_rng.permutation(len(x_train))
        model.train()
        sums = {"ce": 0.0, "sp": 0.0, "total": 0.0}
        act_min, act_max = float("inf"), float("-inf")
        n_seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            xb, yb = x_train[idx], y_train[idx]
            optimizer.zero_grad()
            fm, logits = model(xb)

            ce_val = cross_entropy(logits.detach(), yb, weights)
            terms = []
            if phase.use_cross_entropy:
                terms.append(alpha * cross_entropy(logits, yb, weights))
            if phase.use_sparsity:
                assert p_matrix is not None, "sparsity phase before P was computed"
                sp = sparsity_loss(fm, yb, p_matrix, thresholds)
                terms.append(beta * sp)
                with torch.no_grad():
                    acts = sigmoid_activations(fm, thresholds)
                    act_min = min(act_min, float(acts.min()))
                    act_max = max(act_max, float(acts.max()))
            else:
                sp = torch.tensor(0.0)
            loss = sum(terms) if terms else torch.zeros(1, requires_grad=True).sum()

            if not torch.isfinite(loss):
                model.load_state_dict(last_good_state)
                log.add_event("diverged", epoch=epoch)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; restored epoch {epoch - 1} weights",
                    model=model, log=log, epoch=epoch,
                )
            loss.backward()
            optimizer.step()

            bsize = len(idx)
            sums["ce"] += float(ce_val) * bsize
            sums["sp"] += float(sp.detach()) * bsize
            sums["total"] += float(loss.detach()) * bsize
            n_seen += bsize

        last_good_state = copy.deepcopy(model.state_dict())

        # validation total loss under the current phase's active terms
        model.eval()
        with torch.no_grad():
            fm_v, logits_v = model(x_val)
            ce_v = cross_entropy(logits_v, y_val, weights) if phase.use_cross_entropy else 0.0
            sp_v = (
                sparsity_loss(fm_v, y_val, p_matrix, thresholds) if phase.use_sparsity else 0.0
            )
            val_total = float(total_loss(ce_v, sp_v, alpha if phase.use_cross_entropy else 0.0, beta))

        record = {
            "epoch": epoch,
            "ce_loss": sums["ce"] / n_seen,
            "sparsity_loss": sums["sp"] / n_seen,
            "total": sums["total"] / n_seen,
            "val_total": val_total,
            "lr": lr,
            "phase": phase_index,
            "use_cross_entropy": phase.use_cross_entropy,
            "use_sparsity": phase.use_sparsity,
        }
        if phase.use_sparsity:
            record["act_min"] = act_min
            record["act_max"] = act_max
        log.add_epoch(**record)

        if val_total < best_val:
            best_val = val_total
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= config.patience:
                lr *= config.decay_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
                epochs_since_improvement = 0
                log.add_event("lr_decay", epoch=epoch, lr=lr)

        if schedule.p_compute_epoch == epoch:
            p_matrix, thresholds = _compute_p_and_thresholds(schedule, dataset, model, config)
            log.add_event("compute_P", epoch=epoch, method=schedule.p_method,
                          thresholds=schedule.thresholds_enabled)
            # the validation baseline changes meaning once the loss changes shape
            best_val = float("inf")
            epochs_since_improvement = 0

    assert p_matrix is not None
    return TrainResult(model=model, p_matrix=p_matrix, thresholds=thresholds, log=log)
