"""Detector-driven baseline: oracle detector statistics and the prompt path."""

import json
import math

import numpy as np
import pytest
import torch

import promptseg as ps
from promptseg.baseline import (
    det_sam_predict,
    load_detections_file,
    make_oracle_detector,
    oracle_detector,
)
from promptseg.data import DatasetRecord, gt_access
from promptseg.errors import MalformedAnnotation
from promptseg.evaluation import evaluate_dataset
from promptseg.inference import oracle_predict
from promptseg.types import ImageTensor, box_label


def _record(image_id, boxes, size=128):
    return DatasetRecord(
        image_id=image_id,
        image=ImageTensor(pixels=torch.zeros(size, size, 3), original_size=(size, size)),
        weak_labels=[box_label(*b) for b in boxes],
    )


def test_identity_oracle_returns_exact_boxes():
    rec = _record(0, [(10, 20, 40, 50, 1), (60, 60, 90, 100, 2)])
    detections = oracle_detector(rec, jitter_sigma=0.0, drop_prob=0.0, seed=3,
                                 image_size=128)
    assert [(d.box, d.category) for d, _ in detections] == \
        [((10.0, 20.0, 40.0, 50.0), 1), ((60.0, 60.0, 90.0, 100.0), 2)]
    assert all(score == 1.0 for _, score in detections)


def test_drop_one_empties_detections():
    rec = _record(0, [(10, 20, 40, 50, 0)] )
    assert oracle_detector(rec, 0.0, 1.0, seed=3, image_size=128) == []


def test_oracle_detector_seeded():
    rec = _record(5, [(30, 30, 94, 90, 0)])
    a = oracle_detector(rec, 0.05, 0.0, seed=1, image_size=128)
    b = oracle_detector(rec, 0.05, 0.0, seed=1, image_size=128)
    c = oracle_detector(rec, 0.05, 0.0, seed=2, image_size=128)
    assert a == b
    assert a != c


def test_jitter_displacement_matches_folded_normal_mean():
    # corners move by |N(0, sigma*size)|; for the folded normal the mean is
    # sigma*size*sqrt(2/pi) and the std is sigma*size*sqrt(1 - 2/pi)
    sigma, size, n = 0.05, 128, 100
    scale = sigma * size
    displacements = []
    for image_id in range(n):
        rec = _record(image_id, [(30, 30, 94, 90, 0)], size)
        (label, _), = oracle_detector(rec, sigma, 0.0, seed=11, image_size=size)
        displacements.extend(abs(a - b) for a, b in zip(label.box, (30, 30, 94, 90)))
    mean = float(np.mean(displacements))
    expected = scale * math.sqrt(2 / math.pi)
    tolerance = 3 * scale * math.sqrt(1 - 2 / math.pi) / math.sqrt(len(displacements))
    assert abs(mean - expected) < tolerance


def test_heavy_jitter_boxes_stay_valid():
    for image_id in range(50):
        rec = _record(image_id, [(4, 4, 20, 20, 0), (100, 100, 124, 120, 1)])
        for label, _ in oracle_detector(rec, 0.2, 0.0, seed=7, image_size=128):
            x0, y0, x1, y1 = label.box
            assert 0 <= x0 and x1 <= 128 and 0 <= y0 and y1 <= 128
            assert x1 - x0 >= 2 and y1 - y0 >= 2


def test_det_sam_identity_equals_oracle_predict(desk_cfg, desk_backend, desk_teacher):
    ds = ps.generate_synthetic(3, 3, 4, 128, seed=31)
    detector = make_oracle_detector(0.0, 0.0, seed=0, image_size=128)
    for rec in ds.records:
        via_detector = det_sam_predict(rec, detector, desk_teacher, desk_backend, desk_cfg)
        via_oracle = oracle_predict(rec.image, rec.weak_labels, desk_teacher,
                                    desk_backend, desk_cfg)
        assert np.array_equal(via_detector.labels, via_oracle.labels)
        assert np.array_equal(via_detector.scores, via_oracle.scores)


def test_det_sam_empty_detections_all_background(desk_cfg, desk_backend, desk_teacher):
    ds = ps.generate_synthetic(1, 3, 2, 128, seed=32)
    detector = make_oracle_detector(0.0, 1.0, seed=0, image_size=128)
    seg = det_sam_predict(ds.records[0], detector, desk_teacher, desk_backend, desk_cfg)
    assert (seg.labels == desk_cfg.no_part_index).all()


def test_det_sam_degrades_with_jitter(desk_cfg, desk_backend, desk_teacher):
    ds = ps.generate_synthetic(20, 3, 4, 128, seed=33)
    def miou_at(sigma):
        detector = make_oracle_detector(sigma, 0.0, seed=1, image_size=128)
        predictor = lambda rec: det_sam_predict(rec, detector, desk_teacher,
                                                desk_backend, desk_cfg)
        return evaluate_dataset(ds, predictor, desk_cfg)["miou"]
    clean, noisy = miou_at(0.0), miou_at(0.1)
    assert clean > 0.95
    assert noisy < clean


def test_detections_file_round_trip(tmp_path, desk_cfg):
    table = {
        "0": [{"bbox": [10, 20, 30, 30], "category": 1, "score": 0.75}],
        "2": [{"bbox": [5, 5, 10, 12], "category": 0}],
    }
    path = tmp_path / "det.json"
    path.write_text(json.dumps(table))
    detector = load_detections_file(path, num_categories=3)
    rec0 = _record(0, [])
    (label, score), = detector.detect(rec0)
    assert label.box == (10.0, 20.0, 40.0, 50.0) and label.category == 1
    assert score == 0.75
    (label2, score2), = detector.detect(_record(2, []))
    assert score2 == 1.0  # default score
    assert detector.detect(_record(1, [])) == []  # unlisted image


@pytest.mark.parametrize("entry, fragment", [
    ({"bbox": [1, 2, 3], "category": 0}, "image 4"),
    ({"bbox": [1, 2, 3, 4]}, "detection 0"),
    ({"bbox": [1, 2, 3, 4], "category": 9}, "out of range"),
    ({"bbox": [1, 2, 3, 4], "category": 0, "score": 1.5}, "not in [0, 1]"),
])
def test_detections_file_malformed(tmp_path, entry, fragment):
    path = tmp_path / "det.json"
    path.write_text(json.dumps({"4": [entry]}))
    with pytest.raises(MalformedAnnotation) as err:
        load_detections_file(path, num_categories=3)
    assert fragment in str(err.value)
