"""End-to-end prediction: run the student, keep foreground prompt tokens,
decode masks and merge them into one semantic part map.

Also provides the oracle-prompt mode, where ground-truth weak labels are
teacher-encoded and fed straight to the decoder.  That path bypasses the
student entirely and upper-bounds what distillation can reach.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import Config
from .errors import ShapeMismatch
from .teacher import TeacherPrompter
from .types import ImageTensor, MaskLogits, SemanticSegmentation, StudentOutput, WeakLabel


def select_foreground(output: StudentOutput) -> list[tuple[int, int, float]]:
    """Queries whose most likely class is a real category.

    Returns (query index, category, probability) triples.  Ties in the class
    distribution resolve to the lowest class index, so a fully uniform row
    counts as foreground category 0.
    """
    probs = torch.softmax(output.class_logits.detach().double(), dim=1).numpy()
    no_part = probs.shape[1] - 1
    kept = []
    for i, row in enumerate(probs):
        best = int(np.argmax(row))
        if best != no_part:
            kept.append((i, best, float(row[best])))
    return kept


def merge_semantic(masks: MaskLogits, kept: list[tuple[int, int, float]],
                   cfg: Config) -> SemanticSegmentation:
    """Per-pixel argmax of sigmoid mask probability over kept tokens.

    A pixel gets the winning token's category when that probability clears
    cfg.mask_threshold, else the background label C.
    """
    if len(masks) != len(kept):
        raise ShapeMismatch(f"{len(masks)} masks for {len(kept)} kept tokens")
    size = cfg.image_size
    labels = np.full((size, size), cfg.no_part_index, dtype=np.int64)
    scores = np.zeros((size, size), dtype=np.float64)
    if not kept:
        return SemanticSegmentation(labels=labels, scores=scores)
    probs = torch.sigmoid(masks.logits.detach().double()).numpy()
    winner = probs.argmax(axis=0)
    best = probs[winner, np.arange(size)[:, None], np.arange(size)[None, :]]
    categories = np.array([category for _, category, _ in kept], dtype=np.int64)
    covered = best > cfg.mask_threshold
    labels[covered] = categories[winner[covered]]
    scores[covered] = best[covered]
    return SemanticSegmentation(labels=labels, scores=scores)


def predict_image(image: ImageTensor, state, backend, cfg: Config) -> SemanticSegmentation:
    """Full student pipeline: encode, prompt, select foreground, decode, merge."""
    with torch.no_grad():
        features = backend.encode_image(image)
        output = state.prompter.forward(features)
        kept = select_foreground(output)
        tokens = output.prompt_tokens[[i for i, _, _ in kept]]
        masks = backend.decode_masks(features, tokens)
    return merge_semantic(masks, kept, cfg)


def oracle_predict(image: ImageTensor, labels: list[WeakLabel],
                   teacher: TeacherPrompter, backend, cfg: Config) -> SemanticSegmentation:
    """Upper-bound mode: decode teacher embeddings of the true weak labels."""
    with torch.no_grad():
        features = backend.encode_image(image)
        embeddings = [teacher.encode(label) for label in labels]
        kept = [(i, label.category, 1.0) for i, label in enumerate(labels)]
        if embeddings:
            tokens = torch.stack([e.vector for e in embeddings])
        else:
            tokens = torch.zeros(0, cfg.token_dim)
        masks = backend.decode_masks(features, tokens)
    return merge_semantic(masks, kept, cfg)
