"""Datasets: Gaussian blobs, IDX image files, Gaussian-noise OoD sets and corruptions."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# label used for synthetic out-of-distribution examples; never a valid class
OOD_LABEL = -1


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images of shape ``(n, c, h, w)`` with integer labels; example ids are ``0..n-1``."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        validate(self)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def example_ids(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_labels(self, labels: np.ndarray, provenance: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.images, labels, self.class_count, self.split,
            self.provenance if provenance is None else provenance, dict(self.meta),
        )

    def with_images(self, images: np.ndarray, provenance: str) -> "LabeledDataset":
        return LabeledDataset(images, self.labels, self.class_count, self.split, provenance, dict(self.meta))

    def subset(self, idx: Iterable[int]) -> "LabeledDataset":
        idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.class_count, self.split,
            f"{self.provenance}[subset {len(idx)}]", dict(self.meta),
        )


def validate(ds: LabeledDataset) -> None:
    """Shared invariant check for every generator and loader."""
    if ds.images.ndim != 4:
        raise DataFormatError(f"images must be (n, c, h, w), got shape {ds.images.shape}")
    if ds.labels.ndim != 1 or ds.labels.shape[0] != ds.images.shape[0]:
        raise DataFormatError(f"{ds.labels.shape[0]} labels for {ds.images.shape[0]} images")
    if ds.class_count < 1:
        raise DataFormatError("class_count must be positive")
    labels = ds.labels
    ood = labels == OOD_LABEL
    if np.any(~ood & ((labels < 0) | (labels >= ds.class_count))):
        raise DataFormatError(f"labels outside [0, {ds.class_count})")
    if not np.all(np.isfinite(ds.images)):
        raise DataFormatError("images contain non-finite values")


# -- blobs -------------------------------------------------------------------


@dataclass(frozen=True)
class BlobConfig:
    n_points: int = 1000
    centers: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, -2.0), (2.0, 2.0))
    cluster_std: float = 1.0
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise ValueError(f"n_points must be >= 2, got {self.n_points}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not self.cluster_std > 0.0:
            raise ValueError(f"cluster_std must be > 0, got {self.cluster_std}")
        if len(self.centers) != 2 or any(len(c) != 2 for c in self.centers):
            raise ValueError("centers must be two points in R^2")


def make_blobs(cfg: BlobConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Two isotropic Gaussian clusters, labelled by cluster, split by a seeded shuffle.

    Points are returned as ``(1, 1, 2)`` images so they flow through the same
    network and gradient code as real images.
    """
    rng = np.random.default_rng(cfg.seed)
    counts = (cfg.n_points // 2, cfg.n_points - cfg.n_points // 2)
    pts, labels = [], []
    for cls, (center, n) in enumerate(zip(cfg.centers, counts)):
        pts.append(np.asarray(center, dtype=np.float64) + cfg.cluster_std * rng.standard_normal((n, 2)))
        labels.append(np.full(n, cls))
    x = np.concatenate(pts)
    y = np.concatenate(labels)
    order = rng.permutation(cfg.n_points)
    x, y = x[order], y[order]
    n_train = int(round(cfg.train_fraction * cfg.n_points))
    prov = f"blobs(n={cfg.n_points}, std={cfg.cluster_std}, seed={cfg.seed})"
    meta = {"kind": "blobs", "centers": [list(c) for c in cfg.centers]}
    train = LabeledDataset(x[:n_train].reshape(-1, 1, 1, 2), y[:n_train], 2, "train", prov, dict(meta))
    test = LabeledDataset(x[n_train:].reshape(-1, 1, 1, 2), y[n_train:], 2, "test", prov, dict(meta))
    return train, test


def blobs_to_csv(datasets: Iterable[LabeledDataset]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "x0", "x1", "label", "split"])
    for ds in datasets:
        pts = ds.images.reshape(len(ds), -1)
        if pts.shape[1] != 2:
            raise DataFormatError("blob CSV export needs 2-D points")
        for i, ((a, b), y) in enumerate(zip(pts, ds.labels)):
            w.writerow([i, repr(float(a)), repr(float(b)), int(y), ds.split])
    return buf.getvalue()


def write_blobs_csv(path: str | Path, datasets: Iterable[LabeledDataset]) -> None:
    atomic_write_text(path, blobs_to_csv(datasets))


def read_blobs_csv(path: str | Path, split: str) -> LabeledDataset:
    pts, labels = [], []
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        if row["split"] == split:
            pts.append((float(row["x0"]), float(row["x1"])))
            labels.append(int(row["label"]))
    if not pts:
        raise DataFormatError(f"{path}: no rows with split={split!r}")
    return LabeledDataset(
        np.asarray(pts).reshape(-1, 1, 1, 2), labels, 2, split, f"blobs-csv({Path(path).name})", {"kind": "blobs"}
    )


# -- IDX ---------------------------------------------------------------------


def _read_header(buf: bytes, path: Path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated header ({len(buf)} bytes, need {need})")
    got, *dims = struct.unpack(f">I{ndims}I", buf[:need])
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def read_idx_images(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    n, rows, cols = _read_header(buf, path, IDX_IMAGES_MAGIC, 3)
    body = buf[16:]
    if len(body) != n * rows * cols:
        raise DataFormatError(f"{path}: pixel data has {len(body)} bytes, header says {n}x{rows}x{cols}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    (n,) = _read_header(buf, path, IDX_LABELS_MAGIC, 1)
    body = buf[8:]
    if len(body) != n:
        raise DataFormatError(f"{path}: label data has {len(body)} bytes, header says count={n}")
    return np.frombuffer(body, dtype=np.uint8)


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train",
             class_count: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {raw.shape[0]} images vs {labels.shape[0]} labels")
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 10) if labels.size else 10
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(images, labels, class_count, split, f"idx({Path(images_path).name})", {"kind": "idx"})


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Quantize ``(n, 1, h, w)`` images in [0, 1] to bytes."""
    return np.rint(np.clip(images[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx(ds: LabeledDataset, images_path: str | Path, labels_path: str | Path) -> None:
    if ds.images.shape[1] != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    atomic_write_bytes(images_path, idx_images_bytes(to_uint8(ds.images)))
    atomic_write_bytes(labels_path, idx_labels_bytes(ds.labels))


# -- OoD and corruptions -----------------------------------------------------


def gaussian_ood(n: int, image_shape: tuple[int, int, int], seed: int, class_count: int = 10,
                 mean: float = 0.5, std: float = 1.0) -> LabeledDataset:
    """Pixels drawn i.i.d. from Normal(mean, std) and clipped to [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.clip(rng.normal(mean, std, size=(n, *image_shape)), 0.0, 1.0)
    prov = f"gaussian_ood(mean={mean}, std={std}, clipped=[0,1], seed={seed})"
    return LabeledDataset(images, np.full(n, OOD_LABEL), class_count, "ood", prov,
                          {"kind": "gaussian_ood", "mean": mean, "std": std, "std_is": "standard deviation"})


def _box_blur(images: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return images.copy()
    lo = (k - 1) // 2
    hi = k - 1 - lo
    pad = np.pad(images, ((0, 0), (0, 0), (lo, hi), (lo, hi)), mode="edge")
    c = pad.cumsum(axis=2).cumsum(axis=3)
    c = np.pad(c, ((0, 0), (0, 0), (1, 0), (1, 0)))
    h, w = images.shape[2:]
    s = c[:, :, k:k + h, k:k + w] - c[:, :, :h, k:k + w] - c[:, :, k:k + h, :w] + c[:, :, :h, :w]
    return s / (k * k)


def corrupt(ds: LabeledDataset, kind: str, seed: int = 0, *, sigma: float = 0.3, k: int = 3,
            shift: tuple[int, int] = (2, 2)) -> LabeledDataset:
    """Apply one corruption to every image; output is re-clipped to [0, 1].

    ``kind`` is one of ``translate`` (zero-filled shift), ``rotate90``,
    ``noise`` (additive Gaussian, std ``sigma``) or ``blur`` (box, size ``k``).
    """
    x = ds.images
    if kind == "translate":
        dy, dx = shift
        out = np.zeros_like(x)
        h, w = x.shape[2:]
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[:, :, yd, xd] = x[:, :, ys, xs]
        tag = f"translate{shift}"
    elif kind == "rotate90":
        if x.shape[2] != x.shape[3]:
            raise ValueError("rotate90 needs square images")
        out = np.rot90(x, k=1, axes=(2, 3)).copy()
        tag = "rotate90"
    elif kind == "noise":
        if sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {sigma}")
        rng = np.random.default_rng(seed)
        out = x + sigma * rng.standard_normal(x.shape) if sigma > 0 else x.copy()
        tag = f"noise(sigma={sigma}, seed={seed})"
    elif kind == "blur":
        if not isinstance(k, (int, np.integer)) or k < 1 or k > min(x.shape[2:]):
            raise ValueError(f"invalid blur kernel size {k!r}")
        out = _box_blur(x, int(k))
        tag = f"blur(k={k})"
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return ds.with_images(np.clip(out, 0.0, 1.0), f"{ds.provenance}+{tag}")
