"""Variance-of-gradients scoring over a set of training checkpoints.

For every example the engine takes the input gradient of the pre-softmax
score of one class, averages it over colour channels, and measures how much
that gradient map moves across the chosen checkpoints: the per-pixel
population standard deviation, averaged over pixels.  Scores are then
z-scored within each class.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from ._io import atomic_write_text
from .data import LabeledDataset
from .training import CheckpointSet, select_stage

LABEL_SOURCES = ("true", "predicted")
CSV_HEADER = ["example_id", "split", "true_label", "predicted_label", "raw_vog", "normalized_vog", "stage",
              "label_source"]
CHUNK = 512


@dataclass(frozen=True)
class GradientMatrix:
    example_id: int
    checkpoint_epoch: int
    values: np.ndarray  # (h, w)


@dataclass(frozen=True)
class VogRecord:
    example_id: int
    true_label: int
    predicted_label: int
    raw_vog: float
    normalized_vog: float = 0.0
    label_source: str = "true"
    stage: str = "late"
    split: str = "test"

    @property
    def group(self) -> int:
        return self.true_label if self.label_source == "true" else self.predicted_label


def gradient_matrices_batch(params: nn.Params, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Channel-averaged input gradients of score ``p_i``; shape ``(n, h, w)``."""
    return nn.input_gradients_batch(params, x, p).mean(axis=1)


def gradient_matrix(params: nn.Params, x: np.ndarray, p: int, example_id: int = 0,
                    epoch: int = -1) -> GradientMatrix:
    g = nn.input_gradient(params, x, p)
    return GradientMatrix(example_id, epoch, g.mean(axis=0))


def vog_from_stack(stack: np.ndarray) -> np.ndarray:
    """Raw VoG for gradient maps stacked as ``(K, n, h, w)``; returns ``(n,)``.

    The mean is taken as an offset from the first checkpoint so that
    identical maps give exactly zero.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise ValueError(f"expected a (K, n, h, w) stack, got shape {stack.shape}")
    if stack.shape[0] < 2:
        raise ValueError(f"VoG needs K >= 2 checkpoints, got K={stack.shape[0]}")
    dev = stack - stack[0]
    dev = dev - dev.mean(axis=0)
    per_pixel = np.sqrt((dev * dev).mean(axis=0))
    return per_pixel.mean(axis=(1, 2))


def vog_score(mats: Sequence[GradientMatrix]) -> float:
    if len(mats) < 2:
        raise ValueError(f"VoG needs K >= 2 gradient matrices, got K={len(mats)}")
    ids = {m.example_id for m in mats}
    if len(ids) != 1:
        raise ValueError(f"gradient matrices belong to several examples: {sorted(ids)}")
    shapes = {np.shape(m.values) for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"gradient matrices differ in shape: {sorted(shapes)}")
    stack = np.stack([np.asarray(m.values, dtype=np.float64) for m in mats])[:, None]
    return float(vog_from_stack(stack)[0])


def normalize_by_class(records: Sequence[VogRecord], reference: Sequence[VogRecord] | None = None) -> list[VogRecord]:
    """Z-score ``raw_vog`` within each class (population std).

    The grouping label follows each record's ``label_source``.  With
    ``reference``, class statistics come from the reference records instead
    (used to score OoD examples against in-distribution classes).  Classes
    with one member or zero spread map to 0.
    """
    if not records:
        raise ValueError("normalize_by_class needs at least one record")
    ref = records if reference is None else reference
    groups: dict[int, list[float]] = {}
    for r in ref:
        groups.setdefault(r.group, []).append(r.raw_vog)
    stats = {}
    for g, vals in groups.items():
        v = np.asarray(vals)
        stats[g] = (float(v.mean()), float(v.std()), len(v))
    out = []
    for r in records:
        mean, std, n = stats.get(r.group, (0.0, 0.0, 0))
        z = (r.raw_vog - mean) / std if n >= 2 and std > 0 else 0.0
        out.append(replace(r, normalized_vog=float(z)))
    return out


def class_mean_raw_vog(records: Iterable[VogRecord]) -> dict[int, float]:
    """Mean raw VoG per class (grouped per each record's label source)."""
    groups: dict[int, list[float]] = {}
    for r in records:
        groups.setdefault(r.group, []).append(r.raw_vog)
    return {g: float(np.mean(v)) for g, v in sorted(groups.items())}


def default_workers() -> int:
    env = os.environ.get("VOG_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunked(n: int) -> list[slice]:
    return [slice(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def predict_labels(params: nn.Params, images: np.ndarray, workers: int = 1) -> np.ndarray:
    out = np.empty(images.shape[0], dtype=np.int64)

    def work(sl: slice) -> None:
        out[sl] = np.argmax(nn.forward_batch(params, images[sl]), axis=1)

    _run(work, _chunked(images.shape[0]), workers)
    return out


def _run(fn, chunks: list[slice], workers: int) -> None:
    if workers <= 1 or len(chunks) <= 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, chunks))


def raw_vog_scores(checkpoints: Sequence[nn.Params], images: np.ndarray, index: np.ndarray,
                   workers: int = 1) -> np.ndarray:
    """Raw VoG for every image, differentiating score ``index[i]`` at every checkpoint.

    Work is split into fixed-size chunks, so the result does not depend on
    ``workers`` or on completion order.
    """
    if len(checkpoints) < 2:
        raise ValueError(f"VoG needs K >= 2 checkpoints, got K={len(checkpoints)}")
    out = np.empty(images.shape[0])

    def work(sl: slice) -> None:
        stack = np.stack([gradient_matrices_batch(p, images[sl], index[sl]) for p in checkpoints])
        out[sl] = vog_from_stack(stack)

    _run(work, _chunked(images.shape[0]), workers)
    return out


def compute_vog(cs: CheckpointSet, data: LabeledDataset, label_source: str, stage: str,
                workers: int | None = None, normalize: bool = True) -> list[VogRecord]:
    """Score every example in ``data``; one record per example in id order.

    Predicted labels always come from the final checkpoint of the full run
    and stay fixed across the stage's checkpoints.
    """
    if label_source not in LABEL_SOURCES:
        raise ValueError(f"label_source must be one of {LABEL_SOURCES}, got {label_source!r}")
    if len(cs) == 0:
        raise ValueError("checkpoint set is empty")
    workers = default_workers() if workers is None else max(1, int(workers))
    staged = select_stage(cs, stage)
    final = cs.load(len(cs) - 1)
    predicted = predict_labels(final, data.images, workers)
    if label_source == "true":
        if np.any(data.labels < 0):
            raise ValueError("label_source='true' needs ground-truth labels; use 'predicted'")
        index = data.labels
    else:
        index = predicted
    params = [staged.load(i) for i in range(len(staged))]
    raw = raw_vog_scores(params, data.images, index, workers)
    records = [
        VogRecord(int(i), int(t), int(p), float(v), 0.0, label_source, stage, data.split)
        for i, t, p, v in zip(data.example_ids, data.labels, predicted, raw)
    ]
    return normalize_by_class(records) if normalize else records


@dataclass
class VogRanking:
    records: list[VogRecord]

    @property
    def example_ids(self) -> list[int]:
        return [r.example_id for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


def rank(records: Sequence[VogRecord], key: str = "normalized_vog") -> VogRanking:
    """Ascending by score, ties by example id."""
    return VogRanking(sorted(records, key=lambda r: (getattr(r, key), r.example_id)))


def bucket_sizes(n: int, buckets: int) -> list[int]:
    base, extra = divmod(n, buckets)
    return [base + (1 if i < extra else 0) for i in range(buckets)]


def percentile_bucket(ranking: VogRanking, deciles: int = 10) -> list[list[VogRecord]]:
    """Contiguous equal-size slices of the ranking, lowest scores first; remainder goes to the lowest buckets."""
    if not ranking.records:
        raise ValueError("cannot bucket an empty ranking")
    out, start = [], 0
    for size in bucket_sizes(len(ranking), deciles):
        out.append(ranking.records[start:start + size])
        start += size
    return out


def scores_to_csv(records: Iterable[VogRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: r.example_id):
        w.writerow([r.example_id, r.split, r.true_label, r.predicted_label, f"{r.raw_vog:.12g}",
                    f"{r.normalized_vog:.12g}", r.stage, r.label_source])
    return buf.getvalue()


def write_scores_csv(path: str | Path, records: Iterable[VogRecord]) -> None:
    atomic_write_text(path, scores_to_csv(records))


def read_scores_csv(path: str | Path) -> list[VogRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            VogRecord(int(r["example_id"]), int(r["true_label"]), int(r["predicted_label"]), float(r["raw_vog"]),
                      float(r["normalized_vog"]), r["label_source"], r["stage"], r["split"])
            for r in reader
        ]
