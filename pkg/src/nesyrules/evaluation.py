"""Accuracy/fidelity/size metrics, the multi-seed runner, and arithmetic
checks of the reference result tables committed as fixtures.

All report rounding is half-up to integers and happens exactly once, at
report emission; raw per-run values are kept unrounded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import run_model
from .binarization import binarize_dataset
from .dataset import DatasetSplit
from .inference import classify_table
from .rules import RuleSet, fold_sem, ruleset_size
from .training import TrainConfig, TrainingDiverged, build_schedule, run_strategy

DATASET_COLUMNS = ("P2", "P3.1", "P3.2", "P3.3", "P5", "P10", "GT43")


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def accuracy(predictions: Sequence[str | None], labels: Sequence[str]) -> float:
    """Percentage correct; abstentions (None) are incorrect."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels must have equal length")
    if not labels:
        raise ValueError("empty input")
    correct = sum(1 for p, l in zip(predictions, labels) if p is not None and p == l)
    return 100.0 * correct / len(labels)


def fidelity(nesy_predictions: Sequence[str | None], cnn_predictions: Sequence[str]) -> float:
    """Percentage of images where the rule-set agrees with the network."""
    if len(nesy_predictions) != len(cnn_predictions):
        raise ValueError("prediction vectors must have equal length")
    if not cnn_predictions:
        raise ValueError("empty input")
    matches = sum(
        1 for n, c in zip(nesy_predictions, cnn_predictions) if n is not None and n == c
    )
    return 100.0 * matches / len(cnn_predictions)


@dataclass
class RunResult:
    strategy: str
    dataset: str
    seed: int
    cnn_accuracy: float
    nesy_accuracy: float
    fidelity: float
    ruleset_size: int
    abstention_rate: float

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "RunResult":
        return cls(**payload)


@dataclass
class AggregateReport:
    strategy: str
    dataset: str
    n_runs: int
    runs: list[RunResult] = field(default_factory=list)
    failed_runs: list[dict] = field(default_factory=list)

    @property
    def missing(self) -> bool:
        return bool(self.failed_runs) or len(self.runs) < self.n_runs

    def rounded_means(self) -> dict | None:
        if self.missing:
            return None
        return {
            "cnn_accuracy": round_half_up(np.mean([r.cnn_accuracy for r in self.runs])),
            "nesy_accuracy": round_half_up(np.mean([r.nesy_accuracy for r in self.runs])),
            "fidelity": round_half_up(np.mean([r.fidelity for r in self.runs])),
            "ruleset_size": round_half_up(np.mean([r.ruleset_size for r in self.runs])),
            "abstention_rate": round_half_up(np.mean([r.abstention_rate for r in self.runs])),
        }

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "dataset": self.dataset,
            "n_runs": self.n_runs,
            "missing": self.missing,
            "means": self.rounded_means(),
            "runs": [r.to_json() for r in self.runs],
            "failed_runs": self.failed_runs,
        }


def evaluate_model(
    model, thresholds, rs: RuleSet, dataset: DatasetSplit
) -> dict:
    """Test-split metrics for one trained model + rule-set."""
    images = sorted(dataset.test, key=lambda im: im.id)
    if not images:
        raise ValueError("dataset has no test split")
    _, logits = run_model(model, images)
    cnn_predictions = [dataset.class_names[i] for i in np.argmax(logits, axis=1)]
    table = binarize_dataset(images, dataset.class_names, model, thresholds)
    nesy_predictions = classify_table(rs, table)
    labels = [dataset.class_names[im.label] for im in images]
    return {
        "cnn_accuracy": accuracy(cnn_predictions, labels),
        "nesy_accuracy": accuracy(nesy_predictions, labels),
        "fidelity": fidelity(nesy_predictions, cnn_predictions),
        "ruleset_size": ruleset_size(rs),
        "abstention_rate": 100.0 * sum(p is None for p in nesy_predictions) / len(labels),
    }


def run_once(
    strategy: str,
    dataset: DatasetSplit,
    config: TrainConfig,
    ratio: float,
    tail: float,
    seed: int,
    dataset_name: str = "synthetic",
) -> tuple[RunResult, RuleSet]:
    """Train, extract rules, and evaluate for a single seed."""
    cfg = replace(config, seed=seed, sparsity=replace(config.sparsity, seed=seed))
    schedule = build_schedule(strategy, cfg)
    outcome = run_strategy(schedule, dataset, cfg)
    train_images = sorted(dataset.train, key=lambda im: im.id)
    table = binarize_dataset(train_images, dataset.class_names, outcome.model, outcome.thresholds)
    rs = fold_sem(table, ratio=ratio, tail=tail)
    metrics = evaluate_model(outcome.model, outcome.thresholds, rs, dataset)
    return RunResult(strategy=strategy, dataset=dataset_name, seed=seed, **metrics), rs


def run_experiment(
    strategy: str,
    dataset: DatasetSplit,
    config: TrainConfig,
    ratio: float = 0.8,
    tail: float = 5e-3,
    n_runs: int = 1,
    base_seed: int = 0,
    dataset_name: str = "synthetic",
) -> AggregateReport:
    """The multi-seed protocol: seeds base_seed..base_seed+n_runs-1."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    report = AggregateReport(strategy=strategy, dataset=dataset_name, n_runs=n_runs)
    for k in range(n_runs):
        seed = base_seed + k
        try:
            result, _ = run_once(strategy, dataset, config, ratio, tail, seed, dataset_name)
        except TrainingDiverged as exc:
            report.failed_runs.append({"seed": seed, "error": str(exc)})
            continue
        report.runs.append(result)
    return report


# --- reference-table arithmetic ---

@dataclass
class ClaimCheck:
    name: str
    expected: float
    computed: float
    passed: bool

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: computed {self.computed} vs printed {self.expected}"


def _read_fixture(path: Path, value_keys: tuple[str, str]) -> dict[str, dict]:
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells = {}
            for ds in DATASET_COLUMNS + ("MS",):
                cells[ds] = tuple(int(row[f"{ds}_{k}"]) for k in value_keys)
            rows[row["strategy"]] = cells
    return rows


def default_fixture_dir() -> Path:
    return Path(str(files("nesyrules") / "fixtures"))


def check_paper_claims(fixture_dir: str | Path | None = None) -> list[ClaimCheck]:
    """Recompute mean columns and headline deltas from the committed
    transcriptions of the reference result tables."""
    fixture_dir = Path(fixture_dir) if fixture_dir else default_fixture_dir()
    t1 = _read_fixture(fixture_dir / "table1_accuracy_size.csv", ("acc", "size"))
    t2 = _read_fixture(fixture_dir / "table2_cnnacc_fidelity.csv", ("cnn", "fid"))

    checks: list[ClaimCheck] = []

    def add(name: str, expected: float, computed: float) -> None:
        checks.append(ClaimCheck(name, expected, computed, passed=computed == expected))

    # mean columns must reproduce from the per-dataset cells
    for strategy, cells in t1.items():
        acc_mean = round_half_up(np.mean([cells[d][0] for d in DATASET_COLUMNS]))
        size_mean = round_half_up(np.mean([cells[d][1] for d in DATASET_COLUMNS]))
        add(f"table1/{strategy}/mean_accuracy", cells["MS"][0], acc_mean)
        add(f"table1/{strategy}/mean_size", cells["MS"][1], size_mean)
    for strategy, cells in t2.items():
        cnn_mean = round_half_up(np.mean([cells[d][0] for d in DATASET_COLUMNS]))
        fid_mean = round_half_up(np.mean([cells[d][1] for d in DATASET_COLUMNS]))
        add(f"table2/{strategy}/mean_cnn_accuracy", cells["MS"][0], cnn_mean)
        add(f"table2/{strategy}/mean_fidelity", cells["MS"][1], fid_mean)

    ne_acc, ne_size = t1["NE"]["MS"]
    # headline gains over the baseline
    for strategy, acc_gain, size_red in (("TS3", 9, 53), ("TS2", 8, 33), ("TS4", 1, 61)):
        acc, size = t1[strategy]["MS"]
        add(f"{strategy.lower()}_accuracy_gain_vs_ne", acc_gain, acc - ne_acc)
        add(
            f"{strategy.lower()}_size_reduction_pct",
            size_red,
            round_half_up(100.0 * (ne_size - size) / ne_size),
        )

    # network-to-rules accuracy gap
    add("ne_cnn_nesy_gap", 12, t2["NE"]["MS"][0] - ne_acc)
    add("ts3_cnn_nesy_gap", 3, t2["TS3"]["MS"][0] - t1["TS3"]["MS"][0])

    # fidelity gain of the two high-fidelity strategies
    add("ts2_fidelity_gain_vs_ne", 7, t2["TS2"]["MS"][1] - t2["NE"]["MS"][1])
    add("ts3_fidelity_gain_vs_ne", 7, t2["TS3"]["MS"][1] - t2["NE"]["MS"][1])

    # many-class datasets
    for ds, gains in (("P10", {"TS2": (19, 46), "TS3": (17, 55)}),
                      ("GT43", {"TS2": (6, 32), "TS3": (10, 57)})):
        ne_a, ne_s = t1["NE"][ds]
        for strategy, (acc_gain, size_red) in gains.items():
            acc, size = t1[strategy][ds]
            add(f"{ds.lower()}_{strategy.lower()}_accuracy_gain", acc_gain, acc - ne_a)
            add(
                f"{ds.lower()}_{strategy.lower()}_size_reduction_pct",
                size_red,
                round_half_up(100.0 * (ne_s - size) / ne_s),
            )

    return checks
