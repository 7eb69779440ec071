"""Frozen teacher prompter: weak labels -> target prompt embeddings.

Each embedding token packs invertible geometry into its first four dims
(logit of normalized cx, cy, w, h, which the mock decoder reads back with a
sigmoid) and fills the rest with fixed sinusoidal features of the label
coordinates projected through seeded frozen matrices, plus a per-kind
constant vector.  Point labels carry their position but only a fixed default
extent, so box supervision is strictly more informative by construction.
"""

from __future__ import annotations

import math

import torch

from .config import Config
from .errors import DegenerateBox, TooManyParts
from .seeds import tensor_checksum, torch_generator
from .types import LabelKind, TargetSet, TeacherEmbedding, WeakLabel

# Normalized params are clamped away from {0, 1} so the logit map stays finite.
CLAMP_EPS = 1e-4
# Extent written for point labels (normalized), standing in for the unknown part shape.
POINT_EXTENT = 0.2
MIN_BOX_PIXELS = 2.0
# Amplitude of the non-geometry feature block relative to the O(1) geometry
# logits, and the per-octave amplitude decay of the sinusoids.  Low
# frequencies are monotone in the coordinates, so they both supervise
# geometry and keep the matching distance smooth; high frequencies are
# unresolvable from coarse features and are attenuated hard.
FEATURE_SCALE = 0.25
AMP_DECAY = 2.0 ** -0.5


class TeacherPrompter:
    """Deterministic frozen encoder of weak labels; no trainable state."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        d = cfg.embed_dim
        self._n_freq = d // 4
        feat_dim = d - 4
        gen = torch_generator(cfg.seed, "teacher")
        # Projections take [sin, cos] features of 4 box coordinates (width 2d)
        # or of a single (x, y) position (width d) down to the feature dims.
        self._proj_box = torch.randn(2 * d, feat_dim, generator=gen) / math.sqrt(2 * d)
        self._proj_point = torch.randn(d, feat_dim, generator=gen) / math.sqrt(d)
        self._type_vectors = {
            name: torch.randn(feat_dim, generator=gen)
            for name in ("box", "point", "box_a", "box_b", "point_a", "point_b")
        }

    # -- geometry helpers ----------------------------------------------------

    def _logit(self, values: list[float]) -> torch.Tensor:
        t = torch.tensor(values, dtype=torch.float64).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
        return torch.log(t / (1.0 - t))

    def _sin_features(self, coords: list[float]) -> torch.Tensor:
        """Sinusoids at frequencies 2^j * pi with geometric amplitude decay."""
        j = torch.arange(self._n_freq, dtype=torch.float64)
        freqs = torch.pi * 2.0**j
        amps = AMP_DECAY**j
        u = torch.tensor(coords, dtype=torch.float64)[:, None]
        feats = torch.cat([amps * torch.sin(freqs * u), amps * torch.cos(freqs * u)], dim=1)
        return feats.reshape(-1)

    def _token(self, geometry: torch.Tensor, features: torch.Tensor, proj: torch.Tensor,
               type_name: str) -> torch.Tensor:
        feat = features.to(torch.float32) @ proj + self._type_vectors[type_name]
        return torch.cat([geometry.to(torch.float32), FEATURE_SCALE * feat])

    # -- public encoding API -------------------------------------------------

    def encode_box(self, label: WeakLabel) -> TeacherEmbedding:
        """Encode a box label; K=2 emits the two corner tokens concatenated."""
        assert label.kind is LabelKind.BOX
        size = self.cfg.image_size
        label.check_bounds(size)
        x0, y0, x1, y1 = label.box
        if x1 - x0 < MIN_BOX_PIXELS or y1 - y0 < MIN_BOX_PIXELS:
            raise DegenerateBox(f"box {label.box} smaller than {MIN_BOX_PIXELS} pixels")
        cx, cy = (x0 + x1) / (2 * size), (y0 + y1) / (2 * size)
        w, h = (x1 - x0) / size, (y1 - y0) / size
        geom = self._logit([cx, cy, w, h])
        if self.cfg.tokens_per_part == 1:
            corners = self._sin_features([x0 / size, y0 / size, x1 / size, y1 / size])
            vector = self._token(geom, corners, self._proj_box, "box")
        else:
            first = self._token(geom, self._sin_features([x0 / size, y0 / size]),
                                self._proj_point, "box_a")
            geom2 = self._logit([x1 / size, y1 / size, w, h])
            second = self._token(geom2, self._sin_features([x1 / size, y1 / size]),
                                 self._proj_point, "box_b")
            vector = torch.cat([first, second])
        return TeacherEmbedding(vector=vector, source_kind=LabelKind.BOX)

    def encode_point(self, label: WeakLabel) -> TeacherEmbedding:
        """Encode a point label with the fixed default extent."""
        assert label.kind is LabelKind.POINT
        size = self.cfg.image_size
        label.check_bounds(size)
        x, y = label.point
        geom = self._logit([x / size, y / size, POINT_EXTENT, POINT_EXTENT])
        feats = self._sin_features([x / size, y / size])
        if self.cfg.tokens_per_part == 1:
            vector = self._token(geom, feats, self._proj_point, "point")
        else:
            vector = torch.cat([
                self._token(geom, feats, self._proj_point, "point_a"),
                self._token(geom, feats, self._proj_point, "point_b"),
            ])
        return TeacherEmbedding(vector=vector, source_kind=LabelKind.POINT)

    def encode(self, label: WeakLabel) -> TeacherEmbedding:
        if label.kind is LabelKind.BOX:
            return self.encode_box(label)
        return self.encode_point(label)

    def build_target_set(self, labels: list[WeakLabel]) -> TargetSet:
        """Pad encoded labels with no-part entries up to exactly S targets."""
        cfg = self.cfg
        if len(labels) > cfg.num_queries:
            raise TooManyParts(
                f"{len(labels)} labels exceed the query capacity S={cfg.num_queries}")
        for label in labels:
            if label.category >= cfg.num_categories:
                raise ValueError(
                    f"category {label.category} out of range [0, {cfg.num_categories})")
        categories = torch.full((cfg.num_queries,), cfg.no_part_index, dtype=torch.long)
        embeddings = torch.zeros(cfg.num_queries, cfg.token_dim)
        for i, label in enumerate(labels):
            categories[i] = label.category
            embeddings[i] = self.encode(label).vector
        return TargetSet(categories=categories, embeddings=embeddings, num_real=len(labels))

    def checksum(self) -> str:
        tensors = {"proj_box": self._proj_box, "proj_point": self._proj_point}
        tensors.update({f"type_{k}": v for k, v in self._type_vectors.items()})
        return tensor_checksum(tensors)
