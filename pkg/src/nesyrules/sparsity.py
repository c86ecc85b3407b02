"""Filter targets, binarization thresholds, and the binarizing sparsity loss.

The P matrix marks, for every class, the K filters whose activations should be
driven to 1 while all others are driven to 0. Thresholds shift per-filter L2
norms before the sigmoid so that weak filters can actually reach values below
0.5. The sparsity loss is the binary cross-entropy between the sigmoid of the
adjusted norms and the P-derived targets, averaged over images and filters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, images_to_tensor, l2_norm, mean_abs_norm

METHOD_ACTIVATION_FREQUENCY = "activation_frequency"
METHOD_RANDOM = "random"


@dataclass
class SparsityConfig:
    """Hyperparameters of the sparsity machinery."""

    filters_per_class: int = 2  # K
    h1: float = 0.6
    h2: float = 0.7
    alpha: float = 1.0
    beta: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.filters_per_class < 1:
            raise ValueError("filters_per_class must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


@dataclass
class FilterProbabilityMatrix:
    """(C, F) binary target matrix; every row has exactly K ones."""

    values: np.ndarray
    filters_per_class: int
    method: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("P matrix must be 2-D")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("P matrix entries must be 0 or 1")
        row_sums = self.values.sum(axis=1)
        if not (row_sums == self.filters_per_class).all():
            raise ValueError(
                f"every P row must sum to K={self.filters_per_class}, got {row_sums.tolist()}"
            )

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def num_filters(self) -> int:
        return self.values.shape[1]


@dataclass
class CumulativeActivationMatrix:
    """(C, F) sums of per-image mean-absolute norms, grouped by class."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("cumulative activations must be nonnegative")


@dataclass
class ThresholdTensor:
    """Per-filter threshold h1*mu + h2*sigma of training L2 norms.

    mu and sigma (population std) are retained so the linear form can be
    audited and reconstructed exactly.
    """

    mu: np.ndarray
    sigma: np.ndarray
    h1: float
    h2: float
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.values = self.h1 * self.mu + self.h2 * self.sigma

    def __len__(self) -> int:
        return len(self.values)


def _norms_over_images(model: Backbone, images, kind: str, batch_size: int = 64) -> np.ndarray:
    """(N, F) per-image filter norms, rows in the order of ``images``."""
    model.eval()
    fn = {"mean_abs": mean_abs_norm, "l2": l2_norm}[kind]
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images_to_tensor(images[start : start + batch_size])
            fm, _ = model(batch)
            out.append(fn(fm).numpy().astype(np.float64))
    return np.concatenate(out)


def compute_P_method1(
    train_images, model: Backbone, filters_per_class: int, batch_size: int = 64
) -> tuple[FilterProbabilityMatrix, CumulativeActivationMatrix]:
    """Pick each class's top-K filters by cumulative mean-absolute activation.

    Accumulates per-image normalized feature-map outputs into the class-filter
    matrix D, then marks the K highest columns per row. Ties are broken in
    favour of the lowest filter index.
    """
    num_classes = model.config.num_classes
    num_filters = model.config.num_filters
    if filters_per_class > num_filters:
        raise ValueError(f"K={filters_per_class} exceeds filter count F={num_filters}")
    labels = np.array([im.label for im in train_images])
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        missing = [c for c in range(num_classes) if counts[c] == 0]
        raise ValueError(f"classes without training images: {missing}")

    norms = _norms_over_images(model, train_images, "mean_abs", batch_size)
    cumulative = np.zeros((num_classes, num_filters), dtype=np.float64)
    for row, label in zip(norms, labels):
        cumulative[label] += row

    values = np.zeros((num_classes, num_filters), dtype=np.int64)
    for c in range(num_classes):
        top = np.argsort(-cumulative[c], kind="stable")[:filters_per_class]
        values[c, top] = 1
    return (
        FilterProbabilityMatrix(values, filters_per_class, METHOD_ACTIVATION_FREQUENCY),
        CumulativeActivationMatrix(cumulative),
    )


def compute_P_method2(
    num_classes: int, num_filters: int, filters_per_class: int, seed: int
) -> FilterProbabilityMatrix:
    """Assign K target filters per class uniformly at random without replacement."""
    if filters_per_class > num_filters:
        raise ValueError(f"K={filters_per_class} exceeds filter count F={num_filters}")
    rng = np.random.default_rng(seed)
    values = np.zeros((num_classes, num_filters), dtype=np.int64)
    for c in range(num_classes):
        values[c, rng.choice(num_filters, size=filters_per_class, replace=False)] = 1
    return FilterProbabilityMatrix(values, filters_per_class, METHOD_RANDOM)


def compute_thresholds(
    train_images, model: Backbone, h1: float, h2: float, batch_size: int = 64
) -> ThresholdTensor:
    """Per-filter mean/std of training L2 norms combined as h1*mu + h2*sigma."""
    if len(train_images) < 2:
        raise ValueError("need at least 2 training images to compute thresholds")
    norms = _norms_over_images(model, train_images, "l2", batch_size)
    return ThresholdTensor(mu=norms.mean(axis=0), sigma=norms.std(axis=0), h1=h1, h2=h2)


def sigmoid_activations(
    feature_maps: torch.Tensor, thresholds: ThresholdTensor | None
) -> torch.Tensor:
    """sigmoid(L2 norm - threshold) per image and filter, shape (N, F).

    With ``thresholds=None`` the sigmoid is applied to the raw norms; since
    norms are nonnegative every output is then >= 0.5.
    """
    norms = l2_norm(feature_maps)
    if thresholds is not None:
        if len(thresholds) != norms.shape[1]:
            raise ValueError(
                f"threshold length {len(thresholds)} != filter count {norms.shape[1]}"
            )
        t = torch.from_numpy(thresholds.values).to(norms.dtype)
        norms = norms - t
    return torch.sigmoid(norms)


def sparsity_loss(
    feature_maps: torch.Tensor,
    labels: torch.Tensor,
    p_matrix: FilterProbabilityMatrix,
    thresholds: ThresholdTensor | None,
) -> torch.Tensor:
    """BCE between sigmoid activations and each image's class row of P.

    Evaluated in logit space (the softplus form), so the loss stays finite
    even once activations saturate to exactly 0 or 1 in float32.
    """
    logits = l2_norm(feature_maps)
    if thresholds is not None:
        if len(thresholds) != logits.shape[1]:
            raise ValueError(
                f"threshold length {len(thresholds)} != filter count {logits.shape[1]}"
            )
        logits = logits - torch.from_numpy(thresholds.values).to(logits.dtype)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite norms in sparsity loss")
    targets = torch.from_numpy(p_matrix.values[labels.numpy()]).to(logits.dtype)
    # -t*log(sigmoid(x)) - (1-t)*log(1-sigmoid(x)) == softplus(x) - t*x
    bce = torch.nn.functional.softplus(logits) - targets * logits
    return bce.mean()


def total_loss(ce, sp, alpha: float, beta: float):
    """alpha * cross-entropy + beta * sparsity."""
    return alpha * ce + beta * sp


# ---------------------------------------------------------------------------
# CSV persistence: one row per class for P; one thresholds row with the
# hyperparameters (and mu/sigma, for audit) in comment lines.
# ---------------------------------------------------------------------------

def write_p_csv(p_matrix: FilterProbabilityMatrix, path: str | Path) -> None:
    lines = [f"# method={p_matrix.method} K={p_matrix.filters_per_class}"]
    lines += [",".join(str(v) for v in row) for row in p_matrix.values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_p_csv(path: str | Path) -> FilterProbabilityMatrix:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0]
    if not header.startswith("# method="):
        raise ValueError(f"{path}: missing method/K header comment")
    method_part, k_part = header[2:].split()
    method = method_part.split("=", 1)[1]
    k = int(k_part.split("=", 1)[1])
    values = np.array([[int(v) for v in line.split(",")] for line in lines[1:]])
    return FilterProbabilityMatrix(values, k, method)


def _float_row(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_thresholds_csv(thresholds: ThresholdTensor, path: str | Path) -> None:
    lines = [
        f"# h1={thresholds.h1!r},h2={thresholds.h2!r}",
        _float_row(thresholds.values),
        f"# mu={_float_row(thresholds.mu)}",
        f"# sigma={_float_row(thresholds.sigma)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_thresholds_csv(path: str | Path) -> ThresholdTensor:
    lines = Path(path).read_text().strip().splitlines()
    params = dict(part.split("=") for part in lines[0][2:].split(","))
    stored = np.array([float(v) for v in lines[1].split(",")])
    audit = {}
    for line in lines[2:]:
        key, _, row = line[2:].partition("=")
        audit[key] = np.array([float(v) for v in row.split(",")])
    tensor = ThresholdTensor(
        mu=audit["mu"], sigma=audit["sigma"], h1=float(params["h1"]), h2=float(params["h2"])
    )
    if not np.array_equal(tensor.values, stored):
        raise ValueError(f"{path}: stored thresholds disagree with h1*mu + h2*sigma")
    return tensor
