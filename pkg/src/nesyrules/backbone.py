"""Small convolutional backbone: last-layer feature maps, logits, norm primitives.

The reference architecture is conv(3->16)-ReLU-pool, conv(16->32)-ReLU-pool,
conv(32->F)-ReLU as the last convolutional layer, then global average pooling
and a linear head. Feature maps are taken post-ReLU, so they are nonnegative;
the mean-absolute norm still applies abs() as its definition states.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    """Architecture descriptor; serialized into every checkpoint."""

    image_size: int = 32
    in_channels: int = 3
    hidden1: int = 16
    hidden2: int = 32
    num_filters: int = 16
    num_classes: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class Backbone(nn.Module):
    """Three-conv-layer network exposing the final conv layer's activations."""

    # fixed input standardization; [0, 1] pixels come out roughly centered
    INPUT_MEAN = 0.5
    INPUT_STD = 0.25

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.conv1 = nn.Conv2d(config.in_channels, config.hidden1, 3, padding=1)
        self.conv2 = nn.Conv2d(config.hidden1, config.hidden2, 3, padding=1)
        self.conv3 = nn.Conv2d(config.hidden2, config.num_filters, 3, padding=1)
        self.head = nn.Linear(config.num_filters, config.num_classes)

    @classmethod
    def create(cls, config: BackboneConfig, seed: int) -> "Backbone":
        """Deterministically initialized model for the given seed.

        Convolutions get variance-preserving (He) init so last-layer norms
        start at a useful scale; thresholds derived from them then sit well
        above zero, which is what lets non-target activations be pushed
        toward 0 despite norms being nonnegative.
        """
        torch.manual_seed(seed)
        model = cls(config)
        for conv in (model.conv1, model.conv2, model.conv3):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        # small weights plus a positive bias keep every last-layer unit alive
        # at init, so the per-filter norm statistics (and the thresholds
        # derived from them) start well clear of zero
        with torch.no_grad():
            model.conv3.weight.mul_(0.1)
        nn.init.constant_(model.conv3.bias, 1.0)
        nn.init.zeros_(model.head.bias)
        return model

    @property
    def num_filters(self) -> int:
        return self.config.num_filters

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(feature_maps, logits) for a (N, C, S, S) batch.

        Feature maps are the post-ReLU activations of the last convolutional
        layer, shape (N, F, S/4, S/4); logits come from the linear head over
        their global average pool.
        """
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(
                f"expected input batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(images.shape)}"
            )
        x = (images - self.INPUT_MEAN) / self.INPUT_STD
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        feature_maps = F.relu(self.conv3(x))
        logits = self.head(feature_maps.mean(dim=(2, 3)))
        return feature_maps, logits


def mean_abs_norm(feature_maps: torch.Tensor) -> torch.Tensor:
    """Spatial mean of absolute activations, shape (N, F)."""
    return feature_maps.abs().mean(dim=(2, 3))


def l2_norm(feature_maps: torch.Tensor) -> torch.Tensor:
    """Spatial L2 norm per map, shape (N, F); subgradient 0 at all-zero maps."""
    sq = feature_maps.square().sum(dim=(2, 3))
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor | None = None
) -> torch.Tensor:
    """Class-weighted mean of -log softmax(logits)[label].

    The weighted mean divides by the sum of the per-sample weights, so unit
    weights reduce to the plain mean.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits passed to cross_entropy")
    log_probs = F.log_softmax(logits, dim=1)
    picked = -log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if class_weights is None:
        return picked.mean()
    w = class_weights.to(picked.dtype)[labels]
    return (w * picked).sum() / w.sum()


def images_to_tensor(images, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack LabeledImages into a (N, C, H, W) tensor."""
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def labels_to_tensor(images) -> torch.Tensor:
    return torch.tensor([im.label for im in images], dtype=torch.long)


@torch.no_grad()
def run_model(
    model: Backbone, images, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Feature maps (N, F, H, W) and logits (N, C) over a list of images."""
    model.eval()
    fms, logits = [], []
    for start in range(0, len(images), batch_size):
        batch = images_to_tensor(images[start : start + batch_size])
        fm, lg = model(batch)
        fms.append(fm.numpy())
        logits.append(lg.numpy())
    return np.concatenate(fms), np.concatenate(logits)


def save_checkpoint(model: Backbone, path: str | Path, metadata: dict | None = None) -> None:
    """Write a single zip archive: architecture.json + one .npy per parameter."""
    path = Path(path)
    descriptor = {"architecture": asdict(model.config), "metadata": metadata or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("architecture.json", json.dumps(descriptor, indent=2, sort_keys=True))
        for name, param in sorted(model.state_dict().items()):
            buf = io.BytesIO()
            np.save(buf, param.detach().cpu().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    """Rebuild a model (and its metadata) from a checkpoint archive."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        descriptor = json.loads(zf.read("architecture.json"))
        config = BackboneConfig.from_dict(descriptor["architecture"])
        model = Backbone(config)
        state = {}
        for name in model.state_dict():
            data = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
            state[name] = torch.from_numpy(data)
        model.load_state_dict(state)
    model.eval()
    return model, descriptor.get("metadata", {})
