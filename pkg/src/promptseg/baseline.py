"""Detector-plus-decoder baseline: an external part detector supplies boxes
that are teacher-encoded and decoded directly, with no student in the loop.

Real detectors plug in through the Detector protocol or a detections JSON
file; the built-in oracle detector degrades ground-truth boxes with corner
jitter and drops, which is enough to study how detector quality drives
downstream segmentation quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import Config
from .data import DatasetRecord
from .errors import MalformedAnnotation
from .inference import merge_semantic
from .seeds import derive_seed
from .teacher import TeacherPrompter
from .types import SemanticSegmentation, WeakLabel, box_label

Detection = tuple[WeakLabel, float]  # (BOX label, confidence in [0, 1])


@dataclass
class Detector:
    name: str
    detect: Callable[[DatasetRecord], list[Detection]]


def oracle_detector(record: DatasetRecord, jitter_sigma: float, drop_prob: float,
                    seed: int, image_size: int) -> list[Detection]:
    """Ground-truth boxes, each dropped with drop_prob and its corners shifted
    by Gaussian noise of std jitter_sigma * image size, clamped to bounds."""
    rng = np.random.default_rng(
        (derive_seed(seed, "oracle_detector"), record.image_id))
    scale = jitter_sigma * image_size
    detections = []
    for label in record.weak_labels:
        if rng.random() < drop_prob:
            continue
        x0, y0, x1, y1 = label.box
        if scale > 0:
            x0, y0, x1, y1 = np.array([x0, y0, x1, y1]) + rng.normal(0.0, scale, 4)
        x0, x1 = sorted((float(np.clip(x0, 0, image_size)),
                         float(np.clip(x1, 0, image_size))))
        y0, y1 = sorted((float(np.clip(y0, 0, image_size)),
                         float(np.clip(y1, 0, image_size))))
        if x1 - x0 < 2 or y1 - y0 < 2:
            continue  # degenerate after jitter; treat as a miss
        detections.append((box_label(x0, y0, x1, y1, label.category), 1.0))
    return detections


def make_oracle_detector(jitter_sigma: float, drop_prob: float, seed: int,
                         image_size: int) -> Detector:
    def detect(record: DatasetRecord) -> list[Detection]:
        return oracle_detector(record, jitter_sigma, drop_prob, seed, image_size)
    return Detector(name=f"oracle(jitter={jitter_sigma},drop={drop_prob})", detect=detect)


def load_detections_file(path, num_categories: int) -> Detector:
    """Detector backed by a JSON file: image id -> [{bbox, category, score}].

    bbox uses [x, y, width, height] like the annotation format.
    """
    with open(path) as fh:
        table = json.load(fh)
    parsed: dict[int, list[Detection]] = {}
    for image_id, entries in table.items():
        detections = []
        for i, entry in enumerate(entries):
            try:
                x, y, w, h = entry["bbox"]
                category = int(entry["category"])
                score = float(entry.get("score", 1.0))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedAnnotation(
                    f"detection {i} for image {image_id}: {exc}") from exc
            if not 0 <= category < num_categories:
                raise MalformedAnnotation(
                    f"detection {i} for image {image_id}: category {category} "
                    f"out of range")
            if not 0.0 <= score <= 1.0:
                raise MalformedAnnotation(
                    f"detection {i} for image {image_id}: score {score} not in [0, 1]")
            detections.append((box_label(x, y, x + w, y + h, category), score))
        parsed[int(image_id)] = detections

    def detect(record: DatasetRecord) -> list[Detection]:
        return parsed.get(record.image_id, [])

    return Detector(name=f"file:{path}", detect=detect)


def det_sam_predict(record: DatasetRecord, detector: Detector, teacher: TeacherPrompter,
                    backend, cfg: Config) -> SemanticSegmentation:
    """Detector boxes as prompts: encode each with the teacher, decode, merge
    with the detector confidences as token scores."""
    detections = detector.detect(record)
    with torch.no_grad():
        features = backend.encode_image(record.image)
        kept = [(i, label.category, score)
                for i, (label, score) in enumerate(detections)]
        if detections:
            tokens = torch.stack([teacher.encode_box(label).vector
                                  for label, _ in detections])
        else:
            tokens = torch.zeros(0, cfg.token_dim)
        masks = backend.decode_masks(features, tokens)
    return merge_semantic(masks, kept, cfg)
