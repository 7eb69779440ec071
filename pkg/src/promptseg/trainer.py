"""Training loop for the student prompter.

Only the prompter learns; the backend and teacher are frozen and their
checksums are verified before and after a run.  Per-epoch data order is a
pure function of (config seed, epoch index), so a resumed run walks the
same trajectory as an uninterrupted one.

Checkpoints use a small self-describing binary format: magic, format
version, a JSON header (config text + hash, counters, loss history, tensor
manifest) and a raw little-endian tensor table.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backend import MockBackend
from .config import Config, config_from_text, config_hash, config_to_text
from .errors import CorruptFile, NonFiniteLoss, PromptsegError, VersionMismatch
from .matching import total_loss
from .prompter import StudentPrompter, init_prompter
from .seeds import derive_seed
from .teacher import TeacherPrompter
from .types import LabelKind, LossBreakdown, StudentOutput, TargetSet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    config: Config
    prompter: StudentPrompter
    optimizer: torch.optim.Adam
    epoch: int = 0
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)
    backend_checksum: str = ""
    teacher_checksum: str = ""


def make_optimizer(cfg: Config, prompter: StudentPrompter) -> torch.optim.Adam:
    return torch.optim.Adam(prompter.parameters(), lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def init_train_state(cfg: Config) -> TrainState:
    prompter = init_prompter(cfg, cfg.seed)
    return TrainState(config=cfg, prompter=prompter,
                      optimizer=make_optimizer(cfg, prompter))


def train_step(state: TrainState, batch: list[tuple], backend) -> LossBreakdown:
    """One optimizer step on a batch of (ImageTensor, TargetSet) pairs."""
    with torch.no_grad():
        features = torch.stack(
            [backend.encode_image(image).features for image, _ in batch])
    return step_on_features(state, features, [target for _, target in batch])


def step_on_features(state: TrainState, features: torch.Tensor,
                     targets: list[TargetSet]) -> LossBreakdown:
    """One optimizer step on a batch of precomputed feature maps."""
    cfg = state.config
    logits, tokens = state.prompter.forward_batch(features)
    totals, cls_terms, reg_terms = [], [], []
    for i, target in enumerate(targets):
        out = StudentOutput(class_logits=logits[i], prompt_tokens=tokens[i])
        part = total_loss(target, out, cfg)
        totals.append(part.total)
        cls_terms.append(part.cls)
        reg_terms.append(part.reg)
    loss = torch.stack(totals).mean()
    if not math.isfinite(loss.item()):
        raise NonFiniteLoss(
            f"non-finite loss at epoch {state.epoch} step {state.step}: "
            f"per-sample totals {[float(t.detach()) for t in totals]}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return LossBreakdown(total=loss.detach(),
                         cls=float(np.mean(cls_terms)),
                         reg=float(np.mean(reg_terms)))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, f"order.{epoch}"))
    return rng.permutation(n)


def fit(cfg: Config, dataset, backend, teacher: TeacherPrompter, *,
        out_dir=None, supervision: LabelKind = LabelKind.BOX,
        resume_from=None, checkpoint_every: int = 10) -> TrainState:
    """Train for cfg.epochs epochs over the dataset; returns the final state.

    Writes loss_log.csv, config.txt and periodic checkpoints when out_dir is
    set.  resume_from restarts from a checkpoint and reproduces the exact
    trajectory the uninterrupted run would have taken.
    """
    from .data import derive_weak_labels  # local import to avoid a cycle

    torch.set_num_threads(1)  # keep CPU reductions reproducible
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config=cfg)
    else:
        state = init_train_state(cfg)

    start_checksums = (backend.checksum(), teacher.checksum())
    if state.backend_checksum and state.backend_checksum != start_checksums[0]:
        raise CorruptFile("backend checksum differs from the checkpointed run")
    if state.teacher_checksum and state.teacher_checksum != start_checksums[1]:
        raise CorruptFile("teacher checksum differs from the checkpointed run")
    state.backend_checksum, state.teacher_checksum = start_checksums

    # The backend and teacher are frozen, so their outputs are precomputed
    # once; only the prompter runs inside the epoch loop.
    features = []
    targets = []
    with torch.no_grad():
        for record in dataset.records:
            features.append(backend.encode_image(record.image).features)
            labels = derive_weak_labels(record, supervision)
            targets.append(teacher.build_target_set(labels))
    features = torch.stack(features)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_to_text(cfg))

    n = len(dataset.records)
    log = _LossLog(out / "loss_log.csv") if out is not None else None
    for epoch in range(state.epoch, cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            breakdown = step_on_features(state, features[idx], [targets[i] for i in idx])
            row = (float(breakdown.total), breakdown.cls, breakdown.reg)
            if log is not None:
                log.write(epoch + 1, state.step, *row)
            sums += row
            batches += 1
        state.epoch = epoch + 1
        mean = (sums / max(batches, 1)).tolist()
        state.loss_history.append(
            {"epoch": state.epoch, "loss": mean[0], "cls": mean[1], "reg": mean[2]})
        logger.info("epoch %d/%d loss %.5f (cls %.5f reg %.5f)",
                    state.epoch, cfg.epochs, *mean)
        if out is not None:
            log.flush()
            if checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(out / "checkpoint_last.bin", state)

    if backend.checksum() != state.backend_checksum:
        raise PromptsegError("frozen backend drifted during training")
    if teacher.checksum() != state.teacher_checksum:
        raise PromptsegError("frozen teacher drifted during training")
    if out is not None:
        log.close()
        save_checkpoint(out / "checkpoint_final.bin", state)
    return state


class _LossLog:
    """Per-step CSV log: epoch, step, total, cls, reg.  Appends on resume."""

    def __init__(self, path: Path):
        new = not path.exists()
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(["epoch", "step", "total", "cls", "reg"])

    def write(self, epoch: int, step: int, total: float, cls: float, reg: float) -> None:
        self._writer.writerow([epoch, step, repr(total), repr(cls), repr(reg)])

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# -- checkpoint serialization ---------------------------------------------

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def save_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, torch.Tensor] = {
        f"model.{name}": param.detach()
        for name, param in state.prompter.named_parameters()
    }
    opt_steps: dict[str, float] = {}
    param_names = {id(p): name for name, p in state.prompter.named_parameters()}
    for param, slots in state.optimizer.state.items():
        name = param_names[id(param)]
        opt_steps[name] = float(slots["step"])
        tensors[f"optimizer.{name}.exp_avg"] = slots["exp_avg"]
        tensors[f"optimizer.{name}.exp_avg_sq"] = slots["exp_avg_sq"]

    manifest = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().numpy()
        data = array.tobytes()
        manifest.append({"name": name, "shape": list(array.shape),
                         "dtype": array.dtype.name, "offset": offset,
                         "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    config_text = config_to_text(state.config)
    header = {
        "config_hash": config_hash(state.config),
        "config_text": config_text,
        "epoch": state.epoch,
        "step": state.step,
        "loss_history": state.loss_history,
        "backend_checksum": state.backend_checksum,
        "teacher_checksum": state.teacher_checksum,
        "optimizer_steps": opt_steps,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: Config | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise CorruptFile(f"{path}: truncated checkpoint")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: bad magic bytes")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, pos + 4)
    data_start = pos + 12 + header_len
    if data_start > len(raw):
        raise CorruptFile(f"{path}: header length exceeds file size")
    try:
        header = json.loads(raw[pos + 12:data_start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header: {exc}") from exc

    cfg = config_from_text(header["config_text"])
    if config_hash(cfg) != header["config_hash"]:
        raise CorruptFile(f"{path}: config hash does not match embedded config")
    if expected_config is not None and config_hash(expected_config) != header["config_hash"]:
        raise VersionMismatch(
            f"checkpoint was trained with a different config "
            f"({header['config_hash'][:12]} != {config_hash(expected_config)[:12]})")

    tensors: dict[str, torch.Tensor] = {}
    data = raw[data_start:]
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CorruptFile(f"{path}: tensor {entry['name']} exceeds file size")
        if entry["dtype"] not in _DTYPES:
            raise CorruptFile(f"{path}: unknown dtype {entry['dtype']}")
        array = np.frombuffer(data[entry["offset"]:end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = torch.from_numpy(
            array.copy().reshape(entry["shape"]))

    prompter = init_prompter(cfg, cfg.seed)
    model_state = {name[len("model."):]: tensor for name, tensor in tensors.items()
                   if name.startswith("model.")}
    try:
        prompter.load_state_dict(model_state)
    except RuntimeError as exc:
        raise CorruptFile(f"{path}: model tensors do not fit this config: {exc}") from exc

    optimizer = make_optimizer(cfg, prompter)
    params = dict(prompter.named_parameters())
    for name, step_value in header["optimizer_steps"].items():
        optimizer.state[params[name]] = {
            "step": torch.tensor(step_value),
            "exp_avg": tensors[f"optimizer.{name}.exp_avg"],
            "exp_avg_sq": tensors[f"optimizer.{name}.exp_avg_sq"],
        }
    return TrainState(config=cfg, prompter=prompter, optimizer=optimizer,
                      epoch=header["epoch"], step=header["step"],
                      loss_history=list(header["loss_history"]),
                      backend_checksum=header["backend_checksum"],
                      teacher_checksum=header["teacher_checksum"])
