"""Binarized filter-activation tables: the bridge from network to rules.

Each image becomes one row of F values in {0,1}: the sigmoid of its
(threshold-adjusted) filter norms, rounded half-up. The CSV schema
`image_id,f0,...,f{F-1},label` is the stable contract consumed by the
rule learner and by any external one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone, images_to_tensor
from .dataset import LabeledImage
from .sparsity import ThresholdTensor, sigmoid_activations


class TableError(ValueError):
    """Raised for malformed binarization tables or table files."""


@dataclass
class BinarizationTable:
    """Per-image binary feature rows, ordered by image id."""

    image_ids: list[str]
    features: np.ndarray  # (N, F) int64, values in {0,1}
    labels: list[str]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        if self.features.ndim != 2:
            raise TableError("features must be a 2-d array")
        n = len(self.image_ids)
        if len(self.labels) != n or self.features.shape[0] != n:
            raise TableError("image_ids, features, labels must have equal length")
        bad = ~np.isin(self.features, (0, 1))
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise TableError(f"non-binary feature value in row {row + 1}")
        if not self.class_names:
            self.class_names = sorted(set(self.labels))

    @property
    def num_rows(self) -> int:
        return len(self.image_ids)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinarizationTable):
            return NotImplemented
        return (
            self.image_ids == other.image_ids
            and self.labels == other.labels
            and self.class_names == other.class_names
            and np.array_equal(self.features, other.features)
        )


def _round_half_up(values: np.ndarray) -> np.ndarray:
    # np.round is round-half-even; the 0.5 boundary must go up
    return np.floor(values + 0.5).astype(np.int64)


def binarize_dataset(
    images: Sequence[LabeledImage],
    class_names: Sequence[str],
    model: Backbone,
    thresholds: ThresholdTensor | None,
    batch_size: int = 64,
) -> BinarizationTable:
    """Binarize one dataset split; rows come out sorted by image id."""
    if not images:
        raise TableError("cannot binarize an empty split")
    ordered = sorted(images, key=lambda im: im.id)
    rows = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ordered), batch_size):
            chunk = ordered[start : start + batch_size]
            fm, _ = model(images_to_tensor(chunk))
            rows.append(sigmoid_activations(fm, thresholds).numpy())
    activations = np.concatenate(rows, axis=0)
    return BinarizationTable(
        image_ids=[im.id for im in ordered],
        features=_round_half_up(activations),
        labels=[class_names[im.label] for im in ordered],
        class_names=list(class_names),
    )


def write_table(table: BinarizationTable, path: str | Path) -> None:
    header = ["image_id"] + [f"f{j}" for j in range(table.num_features)] + ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for image_id, feats, label in zip(table.image_ids, table.features, table.labels):
            writer.writerow([image_id, *(int(v) for v in feats), label])


def read_table(path: str | Path) -> BinarizationTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "image_id" or header[-1] != "label":
            raise TableError(f"{path}: bad header {header!r}")
        num_features = len(header) - 2
        expected = [f"f{j}" for j in range(num_features)]
        if header[1:-1] != expected:
            raise TableError(f"{path}: feature columns must be f0..f{num_features - 1}")

        image_ids, labels, rows = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise TableError(f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}")
            for cell in row[1:-1]:
                if cell not in ("0", "1"):
                    raise TableError(f"{path}: row {line_no} has non-binary cell {cell!r}")
            image_ids.append(row[0])
            rows.append([int(c) for c in row[1:-1]])
            labels.append(row[-1])
    if not rows:
        raise TableError(f"{path}: no data rows")
    return BinarizationTable(
        image_ids=image_ids,
        features=np.asarray(rows, dtype=np.int64),
        labels=labels,
    )
