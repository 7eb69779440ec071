"""Dataset ingestion and generation.

Two sources: COCO-style part annotations (boxes + polygon/RLE masks) and a
synthetic rectangle-parts generator whose ground truth is exact by
construction, which makes end-to-end thresholds principled at desk scale.

Ground-truth masks are evaluation-only.  They are wrapped in GuardedMask and
can only be read inside a ``gt_access()`` context; the training and matching
code paths never enter one, so any accidental mask read raises.
"""

from __future__ import annotations

import colorsys
import contextlib
import contextvars
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Config
from .errors import GuardedMaskError, InvalidConfig, InvalidFraction, MalformedAnnotation, MissingImage
from .raster import decode_rle, rasterize_polygon
from .seeds import derive_seed
from .types import ImageTensor, LabelKind, WeakLabel, box_label, point_label

logger = logging.getLogger(__name__)

_GT_ALLOWED = contextvars.ContextVar("promptseg_gt_allowed", default=False)


@contextlib.contextmanager
def gt_access():
    """Context in which ground-truth masks may be read (evaluation, IO)."""
    token = _GT_ALLOWED.set(True)
    try:
        yield
    finally:
        _GT_ALLOWED.reset(token)


class GuardedMask:
    """Ground-truth label map that raises when touched outside gt_access()."""

    def __init__(self, labels: np.ndarray):
        self._labels = labels

    @property
    def labels(self) -> np.ndarray:
        if not _GT_ALLOWED.get():
            raise GuardedMaskError(
                "ground-truth masks are evaluation-only; wrap access in gt_access()")
        return self._labels


@dataclass
class DatasetRecord:
    image_id: int
    image: ImageTensor
    weak_labels: list[WeakLabel]
    gt_mask: GuardedMask | None = None


@dataclass
class PartDataset:
    records: list[DatasetRecord]
    num_categories: int
    image_size: int
    category_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def category_palette(num_categories: int) -> list[tuple[int, int, int]]:
    """Stable distinct RGB color per category id."""
    colors = []
    for i in range(num_categories):
        r, g, b = colorsys.hsv_to_rgb(i / max(num_categories, 1), 0.85, 0.9)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return colors


def derive_weak_labels(record: DatasetRecord, mode: LabelKind) -> list[WeakLabel]:
    """BOX passes annotations through; POINT reduces each box to its center."""
    if mode is LabelKind.BOX:
        return list(record.weak_labels)
    return [point_label(*label.center(), label.category) for label in record.weak_labels]


# -- synthetic rectangles --------------------------------------------------

MIN_PART_FRAC = 0.10
MAX_PART_FRAC = 0.35
EDGE_MARGIN = 2
NOISE_AMPLITUDE = 18  # uint8 counts


def generate_synthetic(n_images: int, n_categories: int, max_parts: int, size: int,
                       seed: int) -> PartDataset:
    """Images of 1..max_parts non-overlapping axis-aligned rectangles with
    category-colored noisy fills on a gray noise background.

    Boxes, centers and masks are exact by construction and integer-aligned;
    the whole dataset is a deterministic function of the seed.
    """
    records = []
    palette = category_palette(n_categories)
    for idx in range(n_images):
        rng = np.random.default_rng((derive_seed(seed, "synthetic"), idx))
        image = np.full((size, size, 3), 128, dtype=np.int16)
        image += rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=image.shape)
        gt = np.full((size, size), n_categories, dtype=np.int64)
        labels: list[WeakLabel] = []
        lo = max(2, int(round(MIN_PART_FRAC * size)))
        hi = max(lo + 1, int(round(MAX_PART_FRAC * size)))
        for _ in range(rng.integers(1, max_parts + 1)):
            for _attempt in range(40):
                w = int(rng.integers(lo, hi + 1))
                h = int(rng.integers(lo, hi + 1))
                x0 = int(rng.integers(EDGE_MARGIN, size - EDGE_MARGIN - w + 1))
                y0 = int(rng.integers(EDGE_MARGIN, size - EDGE_MARGIN - h + 1))
                if not _overlaps((x0, y0, x0 + w, y0 + h), [l.box for l in labels]):
                    break
            else:
                continue
            category = int(rng.integers(0, n_categories))
            fill = np.array(palette[category], dtype=np.int16)
            noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=(h, w, 3))
            image[y0:y0 + h, x0:x0 + w] = fill + noise
            gt[y0:y0 + h, x0:x0 + w] = category
            labels.append(box_label(x0, y0, x0 + w, y0 + h, category))
        pixels = torch.from_numpy(
            np.clip(image, 0, 255).astype(np.float32) / 255.0)
        records.append(DatasetRecord(
            image_id=idx,
            image=ImageTensor(pixels=pixels, original_size=(size, size)),
            weak_labels=labels,
            gt_mask=GuardedMask(gt),
        ))
    return PartDataset(records=records, num_categories=n_categories, image_size=size,
                       category_names=[f"part_{i}" for i in range(n_categories)])


def _overlaps(box, others) -> bool:
    x0, y0, x1, y1 = box
    for ox0, oy0, ox1, oy1 in others:
        if x0 < ox1 and ox0 < x1 and y0 < oy1 and oy0 < y1:
            return True
    return False


def split_dataset(dataset: PartDataset, fractions: tuple[float, float],
                  seed: int) -> tuple[PartDataset, PartDataset]:
    """Disjoint seeded split; same seed always yields the same split."""
    if len(fractions) != 2 or any(f < 0 for f in fractions):
        raise InvalidFraction(f"need two nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFraction(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(dataset.records))
    n_first = int(round(fractions[0] * len(order)))
    first = [dataset.records[i] for i in order[:n_first]]
    second = [dataset.records[i] for i in order[n_first:]]
    make = lambda recs: PartDataset(recs, dataset.num_categories, dataset.image_size,
                                    dataset.category_names)
    return make(first), make(second)


# -- directory persistence -------------------------------------------------

def save_dataset(dataset: PartDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    meta = {
        "image_size": dataset.image_size,
        "num_categories": dataset.num_categories,
        "category_names": dataset.category_names,
        "records": [],
    }
    palette = category_palette(dataset.num_categories)
    with gt_access():
        for rec in dataset.records:
            name = f"{rec.image_id:05d}.png"
            pixels = (rec.image.pixels.numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(pixels).save(out / "images" / name)
            if rec.gt_mask is not None:
                save_indexed_png(rec.gt_mask.labels, dataset.num_categories,
                                 out / "masks" / name, palette)
            meta["records"].append({
                "id": rec.image_id,
                "boxes": [[*label.box, label.category] for label in rec.weak_labels],
            })
    with open(out / "labels.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_dataset(data_dir) -> PartDataset:
    root = Path(data_dir)
    with open(root / "labels.json") as fh:
        meta = json.load(fh)
    size = meta["image_size"]
    records = []
    for entry in meta["records"]:
        name = f"{entry['id']:05d}.png"
        image_path = root / "images" / name
        if not image_path.exists():
            raise MissingImage(str(image_path))
        pixels = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
        labels = [box_label(x0, y0, x1, y1, int(cat))
                  for x0, y0, x1, y1, cat in entry["boxes"]]
        mask_path = root / "masks" / name
        gt = None
        if mask_path.exists():
            gt = GuardedMask(np.asarray(Image.open(mask_path), dtype=np.int64))
        records.append(DatasetRecord(
            image_id=entry["id"],
            image=ImageTensor(pixels=torch.from_numpy(pixels), original_size=(size, size)),
            weak_labels=labels,
            gt_mask=gt,
        ))
    return PartDataset(records=records, num_categories=meta["num_categories"],
                       image_size=size, category_names=meta["category_names"])


def save_indexed_png(labels: np.ndarray, num_categories: int, path,
                     palette: list[tuple[int, int, int]] | None = None) -> None:
    """Single-channel indexed PNG; palette index = category id, background last."""
    if palette is None:
        palette = category_palette(num_categories)
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = []
    for color in palette:
        flat.extend(color)
    flat.extend((0, 0, 0))  # background entry
    img.putpalette(flat)
    img.save(path)


# -- COCO-style ingestion --------------------------------------------------

_COCO_KEYS = ("images", "annotations", "categories")


def load_coco_parts(annotation_path, image_dir, cfg: Config) -> PartDataset:
    """Load COCO-style part annotations: boxes become weak labels, segmentation
    (polygon or RLE) becomes the evaluation-only mask.  Images and labels are
    rescaled to cfg.image_size."""
    with open(annotation_path) as fh:
        payload = json.load(fh)
    for key in _COCO_KEYS:
        if key not in payload:
            raise MalformedAnnotation(f"missing top-level key {key!r}")
    extra = sorted(set(payload) - set(_COCO_KEYS) - {"info", "licenses"})
    if extra:
        logger.warning("ignoring unrecognized top-level keys: %s", ", ".join(extra))

    categories = sorted(payload["categories"], key=lambda c: c["id"])
    if len(categories) != cfg.num_categories:
        raise InvalidConfig(
            f"annotation file has {len(categories)} categories, "
            f"config expects {cfg.num_categories}")
    cat_index = {c["id"]: i for i, c in enumerate(categories)}
    names = [c.get("name", f"category_{c['id']}") for c in categories]

    by_image: dict[int, list[dict]] = {}
    for ann in payload["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    size = cfg.image_size
    records = []
    for info in payload["images"]:
        path = Path(image_dir) / info["file_name"]
        if not path.exists():
            raise MissingImage(str(path))
        with Image.open(path) as img:
            src = img.convert("RGB")
            w0, h0 = src.size
            resized = src.resize((size, size), Image.BILINEAR)
        pixels = np.asarray(resized, dtype=np.float32) / 255.0
        sx, sy = size / w0, size / h0
        labels: list[WeakLabel] = []
        gt = np.full((size, size), cfg.num_categories, dtype=np.int64)
        for ann in by_image.get(info["id"], []):
            ann_id = ann.get("id", "?")
            if ann["category_id"] not in cat_index:
                raise MalformedAnnotation(f"annotation {ann_id}: unknown category "
                                          f"{ann['category_id']}")
            category = cat_index[ann["category_id"]]
            box = _scaled_box(ann, ann_id, w0, h0, sx, sy)
            labels.append(box_label(*box, category))
            part = _annotation_mask(ann, ann_id, w0, h0, size, box)
            gt[part > 0] = category
        records.append(DatasetRecord(
            image_id=info["id"],
            image=ImageTensor(pixels=torch.from_numpy(pixels), original_size=(w0, h0)),
            weak_labels=labels,
            gt_mask=GuardedMask(gt),
        ))
    return PartDataset(records=records, num_categories=cfg.num_categories,
                       image_size=size, category_names=names)


def _scaled_box(ann: dict, ann_id, w0: int, h0: int, sx: float, sy: float):
    x, y, w, h = ann["bbox"]
    if w <= 0 or h <= 0:
        raise MalformedAnnotation(f"annotation {ann_id}: empty bbox {ann['bbox']}")
    if x < 0 or y < 0 or x + w > w0 or y + h > h0:
        raise MalformedAnnotation(
            f"annotation {ann_id}: bbox {ann['bbox']} outside {w0}x{h0} image")
    box = (x * sx, y * sy, (x + w) * sx, (y + h) * sy)
    if box[2] - box[0] < 2 or box[3] - box[1] < 2:
        raise MalformedAnnotation(
            f"annotation {ann_id}: bbox smaller than 2 pixels after resizing")
    return box


def _annotation_mask(ann: dict, ann_id, w0: int, h0: int, size: int, box) -> np.ndarray:
    seg = ann.get("segmentation")
    if seg is None:
        # Weak fallback: fill the scaled box.
        from .raster import rasterize_box
        return rasterize_box(box, size)
    if isinstance(seg, dict):
        try:
            mask = decode_rle(seg)
        except (KeyError, ValueError) as exc:
            raise MalformedAnnotation(f"annotation {ann_id}: bad RLE: {exc}") from exc
        if mask.shape != (h0, w0):
            raise MalformedAnnotation(
                f"annotation {ann_id}: RLE size {mask.shape} != image {h0}x{w0}")
        return _nearest_resize(mask, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    for poly in seg:
        if len(poly) < 6 or len(poly) % 2 != 0:
            raise MalformedAnnotation(f"annotation {ann_id}: bad polygon of {len(poly)} values")
        coords = np.array(poly, dtype=np.float64).reshape(-1, 2)
        coords[:, 0] *= size / w0
        coords[:, 1] *= size / h0
        mask |= rasterize_polygon(coords, size, size)
    return mask


def _nearest_resize(mask: np.ndarray, size: int) -> np.ndarray:
    h0, w0 = mask.shape
    rows = np.minimum((np.arange(size) + 0.5) * h0 / size, h0 - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) + 0.5) * w0 / size, w0 - 1).astype(np.int64)
    return mask[rows[:, None], cols[None, :]]
