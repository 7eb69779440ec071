"""Domain types passed between pipeline stages."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import OutOfBounds, ShapeMismatch


class LabelKind(enum.Enum):
    BOX = "box"
    POINT = "point"


@dataclass(frozen=True)
class WeakLabel:
    """A box or point annotation with its part category.

    Coordinates are absolute pixels in the image the label belongs to.
    """
    kind: LabelKind
    category: int
    box: tuple[float, float, float, float] | None = None  # x_min, y_min, x_max, y_max
    point: tuple[float, float] | None = None  # x, y

    def __post_init__(self):
        if self.kind is LabelKind.BOX:
            if self.box is None:
                raise ValueError("BOX label requires box coordinates")
            x0, y0, x1, y1 = self.box
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"box must satisfy x_min < x_max and y_min < y_max, got {self.box}")
        else:
            if self.point is None:
                raise ValueError("POINT label requires point coordinates")
        if self.category < 0:
            raise ValueError(f"category must be >= 0, got {self.category}")

    def center(self) -> tuple[float, float]:
        if self.kind is LabelKind.POINT:
            return self.point
        x0, y0, x1, y1 = self.box
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    def check_bounds(self, image_size: int) -> None:
        if self.kind is LabelKind.BOX:
            x0, y0, x1, y1 = self.box
            if x0 < 0 or y0 < 0 or x1 > image_size or y1 > image_size:
                raise OutOfBounds(f"box {self.box} outside image of size {image_size}")
        else:
            x, y = self.point
            if not (0 <= x <= image_size and 0 <= y <= image_size):
                raise OutOfBounds(f"point {self.point} outside image of size {image_size}")


def box_label(x0: float, y0: float, x1: float, y1: float, category: int) -> WeakLabel:
    return WeakLabel(LabelKind.BOX, category, box=(x0, y0, x1, y1))


def point_label(x: float, y: float, category: int) -> WeakLabel:
    return WeakLabel(LabelKind.POINT, category, point=(x, y))


@dataclass
class ImageTensor:
    """Resized image, float32 (H, W, 3), values in [0, 1]."""
    pixels: torch.Tensor
    original_size: tuple[int, int]

    def validate(self, image_size: int) -> "ImageTensor":
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) pixels, got {tuple(p.shape)}")
        if p.shape[0] != image_size or p.shape[1] != image_size:
            raise ShapeMismatch(
                f"expected {image_size}x{image_size} image, got {p.shape[0]}x{p.shape[1]}")
        if not torch.isfinite(p).all():
            raise ValueError("image contains non-finite values")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return self


@dataclass
class FeatureMap:
    """Frozen-encoder output, (h, w, d) with h == w == image_size // stride."""
    features: torch.Tensor
    stride: int


@dataclass
class MaskLogits:
    """One full-resolution logit plane per decoded token group, (N, size, size)."""
    logits: torch.Tensor

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class TeacherEmbedding:
    """Target prompt embedding produced by the frozen teacher."""
    vector: torch.Tensor  # (token_dim,)
    source_kind: LabelKind


@dataclass
class TargetSet:
    """Teacher targets padded to exactly S entries.

    categories[i] == no_part_index marks a pad; its embedding row is zero.
    """
    categories: torch.Tensor  # (S,) long
    embeddings: torch.Tensor  # (S, token_dim)
    num_real: int


@dataclass
class StudentOutput:
    class_logits: torch.Tensor  # (S, C + 1)
    prompt_tokens: torch.Tensor  # (S, token_dim)


@dataclass
class Assignment:
    """Permutation from Hungarian matching: target i -> prediction target_to_pred[i]."""
    target_to_pred: np.ndarray  # (S,) int64, a permutation of 0..S-1
    total_cost: float


@dataclass
class SemanticSegmentation:
    """Per-pixel category map; label num_categories is background."""
    labels: np.ndarray  # (size, size) int64 in [0, C]
    scores: np.ndarray | None = None  # optional per-pixel max mask probability


@dataclass
class LossBreakdown:
    """Total training loss with its classification/regression split.

    total stays a torch scalar so it can be backpropagated; cls and reg are
    detached scalars with total == cls + reg (both already carry their
    lambda weights and the 1/S normalization).
    """
    total: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor
    per_query: torch.Tensor | None = field(default=None, repr=False)
