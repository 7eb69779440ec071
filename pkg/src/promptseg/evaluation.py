"""Semantic-segmentation metrics: mIoU and mACC over foreground categories.

Background is not a scored category; it only enters other categories'
unions.  Categories absent from both ground truth and prediction are
excluded from the means rather than scored as 0 or 1.  mACC is per-category
pixel recall averaged over categories present in ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import Config, config_hash
from .data import PartDataset, gt_access
from .errors import EmptyEvaluation, ShapeMismatch
from .types import SemanticSegmentation


@dataclass
class ConfusionAccumulator:
    num_categories: int
    intersection: np.ndarray = field(init=False)
    union: np.ndarray = field(init=False)
    gt_pixels: np.ndarray = field(init=False)
    pred_pixels: np.ndarray = field(init=False)

    def __post_init__(self):
        zeros = lambda: np.zeros(self.num_categories, dtype=np.int64)
        self.intersection = zeros()
        self.union = zeros()
        self.gt_pixels = zeros()
        self.pred_pixels = zeros()

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_categories != self.num_categories:
            raise ShapeMismatch(f"cannot merge accumulators over "
                                f"{other.num_categories} vs {self.num_categories} categories")
        self.intersection += other.intersection
        self.union += other.union
        self.gt_pixels += other.gt_pixels
        self.pred_pixels += other.pred_pixels
        return self


def accumulate(acc: ConfusionAccumulator, gt, pred) -> ConfusionAccumulator:
    """Add one image's per-category intersection/union/pixel counts.

    gt and pred are integer label maps (or SemanticSegmentation) with
    background = num_categories.
    """
    gt = gt.labels if isinstance(gt, SemanticSegmentation) else np.asarray(gt)
    pred = pred.labels if isinstance(pred, SemanticSegmentation) else np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
    for c in range(acc.num_categories):
        gt_c = gt == c
        pred_c = pred == c
        acc.intersection[c] += int(np.count_nonzero(gt_c & pred_c))
        acc.union[c] += int(np.count_nonzero(gt_c | pred_c))
        acc.gt_pixels[c] += int(np.count_nonzero(gt_c))
        acc.pred_pixels[c] += int(np.count_nonzero(pred_c))
    return acc


def compute_miou(acc: ConfusionAccumulator) -> float:
    """Mean intersection/union over categories with nonzero union."""
    scored = acc.union > 0
    if not scored.any():
        raise EmptyEvaluation("no category appears in ground truth or predictions")
    return float(np.mean(acc.intersection[scored] / acc.union[scored]))


def compute_macc(acc: ConfusionAccumulator) -> float:
    """Mean per-category pixel recall over categories with ground-truth pixels."""
    scored = acc.gt_pixels > 0
    if not scored.any():
        raise EmptyEvaluation("no category has ground-truth pixels")
    return float(np.mean(acc.intersection[scored] / acc.gt_pixels[scored]))


def evaluate_dataset(dataset: PartDataset, predictor, cfg: Config) -> dict:
    """Stream predictions over the dataset and report per-category metrics.

    predictor maps a DatasetRecord to a SemanticSegmentation.  Ground-truth
    masks are only read here, inside the evaluation context.
    """
    acc = ConfusionAccumulator(dataset.num_categories)
    n = 0
    for record in dataset.records:
        if record.gt_mask is None:
            continue
        seg = predictor(record)
        with gt_access():
            accumulate(acc, record.gt_mask.labels, seg)
        n += 1
    if n == 0:
        raise EmptyEvaluation("dataset has no ground-truth masks")
    names = dataset.category_names or [f"category_{i}" for i in range(acc.num_categories)]
    per_category = []
    for c in range(acc.num_categories):
        union, gt_count = int(acc.union[c]), int(acc.gt_pixels[c])
        per_category.append({
            "id": c,
            "name": names[c],
            "iou": acc.intersection[c] / union if union else None,
            "acc": acc.intersection[c] / gt_count if gt_count else None,
            "gt_pixels": gt_count,
        })
    return {
        "per_category": per_category,
        "miou": compute_miou(acc),
        "macc": compute_macc(acc),
        "num_images": n,
        "config_hash": config_hash(cfg),
    }


def save_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
