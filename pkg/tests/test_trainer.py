"""Training loop: stepping, determinism, checkpoint format, resume."""

import csv
import math
import shutil
import struct

import numpy as np
import pytest
import torch

import promptseg as ps
from promptseg.errors import CorruptFile, NonFiniteLoss, VersionMismatch
from promptseg.trainer import (
    CHECKPOINT_MAGIC,
    TrainState,
    epoch_order,
    fit,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    step_on_features,
    train_step,
)
from promptseg.types import TargetSet


def _params(model):
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def _same_params(a, b):
    return all(torch.equal(a[k], b[k]) for k in a) and a.keys() == b.keys()


def _tiny_fit_parts(n=8, seed=5):
    cfg = ps.desk_config(num_categories=2, image_size=64, embed_dim=16,
                         num_queries=4, epochs=2, batch_size=4, lr=1e-3, seed=seed)
    ds = ps.generate_synthetic(n, 2, 2, 64, seed=seed)
    backend = ps.load_backend("mock", cfg)
    teacher = ps.TeacherPrompter(cfg)
    return cfg, ds, backend, teacher


def _batch(backend, teacher, records):
    return [(rec.image, teacher.build_target_set(rec.weak_labels)) for rec in records]


def test_zero_lr_leaves_params_unchanged():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    cfg = ps.with_overrides(cfg, lr=0.0)
    state = init_train_state(cfg)
    before = _params(state.prompter)
    train_step(state, _batch(backend, teacher, ds.records[:4]), backend)
    assert _same_params(before, _params(state.prompter))
    assert state.step == 1


def test_step_changes_params_and_not_frozen_modules():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    state = init_train_state(cfg)
    before = _params(state.prompter)
    backend_sum, teacher_sum = backend.checksum(), teacher.checksum()
    breakdown = train_step(state, _batch(backend, teacher, ds.records[:4]), backend)
    assert not _same_params(before, _params(state.prompter))
    assert float(breakdown.total) == pytest.approx(float(breakdown.cls) + float(breakdown.reg),
                                                   rel=1e-6)
    assert backend.checksum() == backend_sum
    assert teacher.checksum() == teacher_sum


def test_single_sample_overfit_drives_regression_down():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    state = init_train_state(cfg)
    rec = ds.records[0]
    features = backend.encode_image(rec.image).features.unsqueeze(0)
    targets = [teacher.build_target_set(rec.weak_labels)]
    for _ in range(200):
        breakdown = step_on_features(state, features, targets)
    assert float(breakdown.reg) < 1e-2


def test_non_finite_loss_aborts_with_diagnostics():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    state = init_train_state(cfg)
    # saturate the class head so cross-entropy overflows to inf while the
    # (float64, stably softmaxed) matching cost stays finite
    with torch.no_grad():
        bias = state.prompter.class_head.layers[-1].bias
        bias[0] = 3e38
        bias[1:] = -3e38
    rec = next(r for r in ds.records if any(l.category == 1 for l in r.weak_labels))
    features = backend.encode_image(rec.image).features.unsqueeze(0)
    targets = [teacher.build_target_set(rec.weak_labels)]
    with pytest.raises(NonFiniteLoss) as err:
        step_on_features(state, features, targets)
    assert "epoch 0" in str(err.value)


def test_epoch_order_is_stateless_and_epoch_dependent():
    a = epoch_order(3, 0, 20)
    b = epoch_order(3, 0, 20)
    c = epoch_order(3, 1, 20)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(a.tolist()) == list(range(20))


def test_fit_zero_epochs_returns_untouched_state():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    cfg = ps.with_overrides(cfg, epochs=0)
    state = fit(cfg, ds, backend, teacher)
    assert state.epoch == 0 and state.step == 0
    assert state.loss_history == []
    assert _same_params(_params(init_train_state(cfg).prompter), _params(state.prompter))


def test_fit_records_checksums_and_decreases_loss():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    cfg = ps.with_overrides(cfg, epochs=4)
    state = fit(cfg, ds, backend, teacher)
    assert state.backend_checksum == backend.checksum()
    assert state.teacher_checksum == teacher.checksum()
    assert len(state.loss_history) == 4
    assert state.loss_history[-1]["loss"] < state.loss_history[0]["loss"]
    assert state.step == 4 * 2  # 8 records / batch 4


def test_fit_deterministic_across_runs():
    cfg, ds, backend, teacher = _tiny_fit_parts()
    s1 = fit(cfg, ds, backend, teacher)
    s2 = fit(cfg, ds, backend, teacher)
    assert s1.loss_history == s2.loss_history
    assert _same_params(_params(s1.prompter), _params(s2.prompter))


def test_loss_log_csv_format(tmp_path):
    cfg, ds, backend, teacher = _tiny_fit_parts()
    fit(cfg, ds, backend, teacher, out_dir=tmp_path)
    with open(tmp_path / "loss_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "step", "total", "cls", "reg"]
    body = rows[1:]
    assert len(body) == cfg.epochs * 2  # ceil(8 / 4) batches per epoch
    assert [int(r[0]) for r in body] == [1, 1, 2, 2]
    assert [int(r[1]) for r in body] == [1, 2, 3, 4]
    for row in body:
        total, cls, reg = map(float, row[2:])
        assert math.isfinite(total)
        assert total == pytest.approx(cls + reg, rel=1e-6)
    assert (tmp_path / "config.txt").read_text() == ps.config_to_text(cfg)


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg, ds, backend, teacher = _tiny_fit_parts()
    state = fit(cfg, ds, backend, teacher, out_dir=tmp_path)
    path = tmp_path / "checkpoint_final.bin"
    loaded = load_checkpoint(path, expected_config=cfg)
    assert _same_params(_params(state.prompter), _params(loaded.prompter))
    assert loaded.epoch == state.epoch and loaded.step == state.step
    assert loaded.loss_history == state.loss_history
    assert loaded.backend_checksum == state.backend_checksum
    by_name = {id(p): n for n, p in state.prompter.named_parameters()}
    loaded_by_name = {n: s for (p, s) in loaded.optimizer.state.items()
                      for n in [dict((id(q), m) for m, q in loaded.prompter.named_parameters())[id(p)]]}
    for param, slots in state.optimizer.state.items():
        other = loaded_by_name[by_name[id(param)]]
        assert float(other["step"]) == float(slots["step"])
        assert torch.equal(other["exp_avg"], slots["exp_avg"])
        assert torch.equal(other["exp_avg_sq"], slots["exp_avg_sq"])


def test_checkpoint_wrong_config_is_version_mismatch(tmp_path):
    cfg, ds, backend, teacher = _tiny_fit_parts()
    state = init_train_state(cfg)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, state)
    other = ps.with_overrides(cfg, lr=0.5)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path, expected_config=other)
    loaded = load_checkpoint(path)  # no expectation: loads fine
    assert loaded.config == cfg


def test_checkpoint_corruption_detected(tmp_path):
    cfg, *_ = _tiny_fit_parts()
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, init_train_state(cfg))
    raw = path.read_bytes()

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptFile):
        load_checkpoint(truncated)

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"NOTACKPT" + raw[len(CHECKPOINT_MAGIC):])
    with pytest.raises(CorruptFile):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.bin"
    bad_version.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 99)
                            + raw[len(CHECKPOINT_MAGIC) + 4:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(bad_version)

    bad_header = tmp_path / "header.bin"
    pos = len(CHECKPOINT_MAGIC) + 4
    (header_len,) = struct.unpack_from("<Q", raw, pos)
    scrambled = bytearray(raw)
    scrambled[pos + 8: pos + 8 + 16] = b"{" * 16
    bad_header.write_bytes(bytes(scrambled))
    with pytest.raises(CorruptFile):
        load_checkpoint(bad_header)

    tiny = tmp_path / "tiny.bin"
    tiny.write_bytes(raw[:6])
    with pytest.raises(CorruptFile):
        load_checkpoint(tiny)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg, ds, backend, teacher = _tiny_fit_parts()
    cfg = ps.with_overrides(cfg, epochs=5)

    straight_dir = tmp_path / "straight"
    straight = fit(cfg, ds, backend, teacher, out_dir=straight_dir)

    resumed_dir = tmp_path / "resumed"
    fit(cfg, ds, backend, teacher, out_dir=resumed_dir, checkpoint_every=3)
    # rewind: reload the epoch-3 checkpoint and continue to epoch 5
    mid = load_checkpoint(resumed_dir / "checkpoint_last.bin", expected_config=cfg)
    assert mid.epoch == 3
    resumed = fit(cfg, ds, backend, teacher, out_dir=tmp_path / "resumed2",
                  resume_from=resumed_dir / "checkpoint_last.bin")

    assert resumed.epoch == straight.epoch == 5
    assert _same_params(_params(straight.prompter), _params(resumed.prompter))
    tail = [e["loss"] for e in straight.loss_history[3:]]
    assert [e["loss"] for e in resumed.loss_history[3:]] == tail


def test_resume_rejects_different_config(tmp_path):
    cfg, ds, backend, teacher = _tiny_fit_parts()
    fit(cfg, ds, backend, teacher, out_dir=tmp_path, checkpoint_every=1)
    other = ps.with_overrides(cfg, lr=2e-3)
    with pytest.raises(VersionMismatch):
        fit(other, ds, backend, teacher, resume_from=tmp_path / "checkpoint_last.bin")
