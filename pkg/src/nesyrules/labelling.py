"""Semantic labelling of filters from segmentation-mask overlap.

A filter is labelled by looking at its most-activating images, keeping
the image region where its upsampled feature map exceeds half the map's
maximum, and counting which mask concepts fall inside that region.
Also exports heatmap-style overlays of top activations for inspection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone, images_to_tensor
from .dataset import LabeledImage
from .rules import Literal, Rule, RuleSet
from .sparsity import _norms_over_images


@dataclass
class ActivationOverlay:
    image_id: str
    norm: float
    overlay: np.ndarray  # (S, S, 3) float32 in [0, 1]


@dataclass
class FilterLabel:
    filter_id: int
    name: str
    concepts: list[tuple[str, float]]  # ranked by score, descending


def _upsampled_map(model: Backbone, image: LabeledImage, filter_id: int) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        fm, _ = model(images_to_tensor([image]))
    size = image.pixels.shape[0]
    up = torch.nn.functional.interpolate(
        fm[:, filter_id : filter_id + 1], size=(size, size), mode="bilinear", align_corners=False
    )
    return up[0, 0].numpy()


def _ranked_by_norm(
    model: Backbone, images: Sequence[LabeledImage], filter_id: int
) -> tuple[list[LabeledImage], list[float]]:
    norms = _norms_over_images(model, images, kind="l2")[:, filter_id]
    order = sorted(range(len(images)), key=lambda i: (-norms[i], images[i].id))
    return [images[i] for i in order], [float(norms[i]) for i in order]


def top_activations(
    model: Backbone, images: Sequence[LabeledImage], filter_id: int, m: int = 3
) -> list[ActivationOverlay]:
    """The m images with the largest filter norm, with heat overlays.

    Ties rank by image id. Asking for more images than exist returns all
    of them with a warning.
    """
    if not 0 <= filter_id < model.config.num_filters:
        raise ValueError(f"filter id {filter_id} out of range")
    if m > len(images):
        warnings.warn(f"requested {m} overlays but only {len(images)} images; returning all")
        m = len(images)
    ranked, norms = _ranked_by_norm(model, images, filter_id)

    result = []
    for image, norm in zip(ranked[:m], norms[:m]):
        heat = _upsampled_map(model, image, filter_id)
        peak = heat.max()
        weight = heat / peak if peak > 0 else np.zeros_like(heat)
        # blue-to-red ramp blended on the image, strongest at the peak
        heat_rgb = np.stack([weight, 0.1 * weight, 1.0 - weight], axis=-1)
        alpha = (0.6 * weight)[..., None]
        blended = (1.0 - alpha) * image.pixels + alpha * heat_rgb
        result.append(
            ActivationOverlay(
                image_id=image.id,
                norm=norm,
                overlay=np.clip(blended, 0.0, 1.0).astype(np.float32),
            )
        )
    return result


def rule_filter_ids(rs: RuleSet) -> list[int]:
    """Filter predicates appearing anywhere in the rule-set, sorted."""
    ids = set()
    for rule in rs.class_rules + rs.ab_rules:
        for lit in rule.body:
            if lit.predicate.isdigit():
                ids.add(int(lit.predicate))
    return sorted(ids)


def top_rule_filter(rs: RuleSet, class_name: str) -> int | None:
    """First non-negated filter predicate in the class's first rule."""
    for rule in rs.class_rules:
        if rule.head != class_name:
            continue
        for lit in rule.body:
            if not lit.negated and lit.predicate.isdigit():
                return int(lit.predicate)
        return None
    return None


def label_filters(
    model: Backbone,
    images: Sequence[LabeledImage],
    rs: RuleSet,
    concept_names: dict[int, str],
    top_m: int = 10,
    score_cutoff: float = 0.3,
    background_concept: str = "background",
) -> dict[int, FilterLabel]:
    """Label every filter predicate in the rule-set by mask-concept overlap.

    Scores are pixel fractions over the active regions of the filter's
    top_m images. Rendered names join the top non-background concepts
    above the cutoff, each with a global disambiguation suffix; the
    background concept is reported in scores but never used for naming.
    """
    missing = [im.id for im in images if im.mask is None]
    if missing:
        raise ValueError(
            f"{len(missing)} images have no segmentation mask (e.g. {missing[0]}); "
            "labelling needs masks - skip this step for mask-free datasets"
        )

    usage_counter: dict[str, int] = {}
    labels: dict[int, FilterLabel] = {}
    for filter_id in rule_filter_ids(rs):
        ranked, _ = _ranked_by_norm(model, images, filter_id)
        counts: dict[str, float] = {}
        for image in ranked[: min(top_m, len(ranked))]:
            heat = _upsampled_map(model, image, filter_id)
            peak = heat.max()
            if peak <= 0:
                continue
            active = heat >= 0.5 * peak
            region = image.mask[active]
            for concept_id in np.unique(region):
                name = concept_names.get(int(concept_id), f"concept{int(concept_id)}")
                counts[name] = counts.get(name, 0.0) + float((region == concept_id).sum())

        total = sum(counts.values())
        scored = sorted(
            ((name, c / total) for name, c in counts.items()),
            key=lambda item: (-item[1], item[0]),
        ) if total > 0 else []

        parts = [n for n, s in scored if n != background_concept and s > score_cutoff][:2]
        if not parts:
            non_bg = [n for n, _ in scored if n != background_concept]
            parts = non_bg[:1] if non_bg else [background_concept]
        rendered = []
        for part in parts:
            usage_counter[part] = usage_counter.get(part, 0) + 1
            rendered.append(f"{part}{usage_counter[part]}")
        labels[filter_id] = FilterLabel(
            filter_id=filter_id, name="_".join(rendered), concepts=scored
        )
    return labels


def apply_labels(rs: RuleSet, labels: dict[int, FilterLabel]) -> RuleSet:
    """Rename filter predicates to their quoted concept labels."""

    def rename(lit: Literal) -> Literal:
        if lit.predicate.isdigit() and int(lit.predicate) in labels:
            return Literal(f"'{labels[int(lit.predicate)].name}'", lit.negated)
        return lit

    def rename_rule(rule: Rule) -> Rule:
        return Rule(
            head=rule.head,
            body=[rename(lit) for lit in rule.body],
            kind=rule.kind,
            tp=rule.tp,
            fp=rule.fp,
        )

    return RuleSet(
        class_rules=[rename_rule(r) for r in rs.class_rules],
        ab_rules=[rename_rule(r) for r in rs.ab_rules],
        ratio=rs.ratio,
        tail=rs.tail,
        stats=dict(rs.stats),
    )


def relabel_facts(true_predicates: frozenset[str], labels: dict[int, FilterLabel]) -> frozenset[str]:
    """Rename a fact set consistently with apply_labels."""
    renamed = set()
    for pred in true_predicates:
        if pred.isdigit() and int(pred) in labels:
            renamed.add(f"'{labels[int(pred)].name}'")
        else:
            renamed.add(pred)
    return frozenset(renamed)


def labels_to_json(labels: dict[int, FilterLabel]) -> dict:
    return {
        str(j): {"name": lbl.name, "concepts": [[n, s] for n, s in lbl.concepts]}
        for j, lbl in sorted(labels.items())
    }
