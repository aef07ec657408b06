"""SGD training with deterministic mini-batching and on-disk checkpoints.

Checkpoint directory layout::

    manifest.json          format_version, model_spec, train_config, entries
    ckpt_<epoch>.bin       one file per stored epoch
    label_shuffle.json     only when labels were shuffled

A ``ckpt_*.bin`` file is ``VOGCKPT\\0``, then little-endian ``u32`` format
version and ``u32`` tensor count, then per tensor ``u32`` ndim, ``u64`` dims,
``u64`` element count and the float64 data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from ._io import atomic_write_bytes, atomic_write_json
from .data import LabeledDataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"VOGCKPT\x00"
STAGES = ("early", "late", "all")


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr}")
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.1),)
    checkpoint_every: int = 1
    seed: int = 0
    shuffle_label_fraction: float = 0.0
    # additional epochs to store besides the regular cadence, e.g. (1, 2, 3)
    extra_checkpoints: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_schedule", tuple((int(e), float(lr)) for e, lr in self.lr_schedule))
        object.__setattr__(self, "extra_checkpoints", tuple(sorted({int(e) for e in self.extra_checkpoints})))
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.checkpoint_every < 1 or self.checkpoint_every > self.epochs:
            raise ValueError(f"checkpoint_every must be in [1, epochs={self.epochs}], got {self.checkpoint_every}")
        starts = [e for e, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"lr_schedule start epochs must begin at 0 and strictly increase, got {starts}")
        if not 0.0 <= self.shuffle_label_fraction <= 1.0:
            raise ValueError("shuffle_label_fraction must be in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        bad = [e for e in self.extra_checkpoints if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"extra_checkpoints must lie in [1, epochs={self.epochs}], got {bad}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based training epoch ``epoch``."""
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def checkpoint_epochs(self) -> list[int]:
        extra = set(self.extra_checkpoints)
        return [e for e in range(self.epochs + 1)
                if e % self.checkpoint_every == 0 or e == self.epochs or e in extra]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        d["extra_checkpoints"] = list(self.extra_checkpoints)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        d["lr_schedule"] = tuple(tuple(x) for x in d.get("lr_schedule", ((0, 0.1),)))
        d["extra_checkpoints"] = tuple(d.get("extra_checkpoints", ()))
        return cls(**d)


@dataclass
class LabelShuffleRecord:
    shuffled_indices: np.ndarray
    original_labels: np.ndarray
    new_labels: np.ndarray
    seed: int
    fraction: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "shuffled_indices": self.shuffled_indices.tolist(),
            "original_labels": self.original_labels.tolist(),
            "new_labels": self.new_labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LabelShuffleRecord":
        return cls(
            np.asarray(d["shuffled_indices"], dtype=np.int64),
            np.asarray(d["original_labels"], dtype=np.int64),
            np.asarray(d["new_labels"], dtype=np.int64),
            int(d["seed"]),
            float(d["fraction"]),
        )


def shuffle_labels(data: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabelShuffleRecord]:
    """Relabel ``round(fraction * n)`` random examples with labels drawn uniformly over all classes.

    A drawn label may coincide with the original one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = len(data)
    k = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng([seed, 0x5EED])
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    new = rng.integers(0, data.class_count, size=k)
    labels = data.labels.copy()
    record = LabelShuffleRecord(idx.astype(np.int64), labels[idx].copy(), new.astype(np.int64), seed, fraction)
    if k == 0:
        return data, record
    labels[idx] = new
    return data.with_labels(labels, f"{data.provenance}+shuffled({fraction}, seed={seed})"), record


def _digest(buf: bytes) -> str:
    return hashlib.blake2b(buf, digest_size=8).hexdigest()


def params_to_bytes(params: nn.Params) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.tensors))]
    for t in params.tensors:
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(struct.pack("<Q", t.size))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes, spec: nn.ModelSpec, name: str = "<bytes>") -> nn.Params:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointCorruptError(f"{name}: truncated at byte {pos} (need {n} more, have {len(buf) - pos})")
        out = buf[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(8) != MAGIC:
        raise CheckpointFormatError(f"{name}: not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{name}: format version {version}, expected {FORMAT_VERSION}")
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (size,) = struct.unpack("<Q", take(8))
        if size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointCorruptError(f"{name}: element count {size} does not match shape {shape}")
        tensors.append(np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape))
    if pos != len(buf):
        raise CheckpointCorruptError(f"{name}: {len(buf) - pos} trailing bytes")
    try:
        return nn.Params(spec, tuple(tensors))
    except nn.ShapeError as e:
        raise CheckpointFormatError(f"{name}: {e}") from None


@dataclass(frozen=True)
class CheckpointEntry:
    epoch: int
    path: Path
    checksum: str


@dataclass
class CheckpointSet:
    entries: list[CheckpointEntry]
    model_spec: nn.ModelSpec
    train_config: TrainConfig | None
    root: Path | None = None
    label_shuffle: LabelShuffleRecord | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        epochs = [e.epoch for e in self.entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise CheckpointError(f"checkpoint epochs must strictly increase, got {epochs}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def epochs(self) -> list[int]:
        return [e.epoch for e in self.entries]

    def load(self, i: int) -> nn.Params:
        return load_checkpoint(self.entries[i], self.model_spec)

    def manifest_dict(self) -> dict[str, Any]:
        root = self.root
        d: dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "model_spec": self.model_spec.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "entries": [
                {"epoch": e.epoch, "path": str(e.path.relative_to(root)) if root else str(e.path), "checksum": e.checksum}
                for e in self.entries
            ],
        }
        if self.label_shuffle is not None:
            d["label_shuffle"] = "label_shuffle.json"
        return d


def save_checkpoint(params: nn.Params, path: Path) -> str:
    buf = params_to_bytes(params)
    atomic_write_bytes(path, buf)
    return _digest(buf)


def load_checkpoint(entry: CheckpointEntry, spec: nn.ModelSpec) -> nn.Params:
    path = Path(entry.path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"checkpoint file not found: {path}")
    buf = path.read_bytes()
    if _digest(buf) != entry.checksum:
        raise CheckpointCorruptError(f"{path}: checksum {_digest(buf)} does not match manifest {entry.checksum}")
    return params_from_bytes(buf, spec, str(path))


def write_manifest(cs: CheckpointSet) -> Path:
    assert cs.root is not None
    path = cs.root / "manifest.json"
    atomic_write_json(path, cs.manifest_dict())
    return path


def parse_manifest(d: dict[str, Any], root: Path) -> CheckpointSet:
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"manifest format_version {d.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        spec = nn.ModelSpec.from_dict(d["model_spec"])
        cfg = TrainConfig.from_dict(d["train_config"]) if d.get("train_config") else None
        entries = [CheckpointEntry(int(e["epoch"]), root / e["path"], str(e["checksum"])) for e in d["entries"]]
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"malformed manifest: {e}") from None
    shuffle = None
    if d.get("label_shuffle"):
        shuffle = LabelShuffleRecord.from_dict(json.loads((root / d["label_shuffle"]).read_text()))
    return CheckpointSet(entries, spec, cfg, root, shuffle)


def read_manifest(checkpoint_dir: str | Path) -> CheckpointSet:
    root = Path(checkpoint_dir)
    path = root / "manifest.json"
    if not path.is_file():
        raise CheckpointNotFoundError(f"manifest not found: {path}")
    return parse_manifest(json.loads(path.read_text()), root)


def select_stage(cs: CheckpointSet, stage: str) -> CheckpointSet:
    """Early = first 3 stored checkpoints after epoch 0, late = last 3, all = everything after epoch 0."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    trained = [e for e in cs.entries if e.epoch != 0]
    need = 2 if stage == "all" else 3
    if len(trained) < need:
        raise ValueError(f"stage {stage!r} needs at least {need} checkpoints after epoch 0, have {len(trained)}")
    chosen = trained[:3] if stage == "early" else trained[-3:] if stage == "late" else trained
    return CheckpointSet(list(chosen), cs.model_spec, cs.train_config, cs.root, cs.label_shuffle)


def train(spec: nn.ModelSpec, data: LabeledDataset, cfg: TrainConfig, out_dir: str | Path) -> CheckpointSet:
    """Train with plain mini-batch SGD and write checkpoints plus ``manifest.json`` to ``out_dir``.

    Bit-reproducible for a given (seed, data, cfg).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.image_shape != spec.input_shape:
        raise nn.ShapeError(f"dataset images {data.image_shape} do not match model input {spec.input_shape}")
    if data.labels.min() < 0 or data.labels.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    shuffle = None
    if cfg.shuffle_label_fraction > 0:
        data, shuffle = shuffle_labels(data, cfg.shuffle_label_fraction, cfg.seed)
        atomic_write_json(out / "label_shuffle.json", shuffle.to_dict())

    params = nn.init_params(spec, cfg.seed)
    keep = set(cfg.checkpoint_epochs())
    entries = [CheckpointEntry(0, out / "ckpt_0.bin", save_checkpoint(params, out / "ckpt_0.bin"))]
    x, y = data.images, data.labels
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = nn.loss_and_grads_batch(params, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, b, lr, loss)
            params = nn.Params(spec, tuple(p - lr * g for p, g in zip(params.tensors, grads.tensors)), cfg.seed)
            total += loss * len(idx)
        log.info("epoch %d lr %g mean batch loss %.6f", epoch + 1, lr, total / n)
        if epoch + 1 in keep:
            path = out / f"ckpt_{epoch + 1}.bin"
            entries.append(CheckpointEntry(epoch + 1, path, save_checkpoint(params, path)))

    cs = CheckpointSet(entries, spec, cfg, out, shuffle)
    write_manifest(cs)
    return cs
