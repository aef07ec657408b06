"""End-to-end experiments: toy boundary study, desk-scale digits runs,
memorization test and OoD detection.

Each runner trains into a caller-supplied directory, returns a result
object, and can serialize it as a JSON-ready dict.  Results depend only on
the config (and its seeds), never on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, nn
from .data import BlobConfig, LabeledDataset, gaussian_ood, make_blobs
from .digits import make_digits
from .engine import VogRecord, compute_vog, normalize_by_class, predict_labels, rank, raw_vog_scores
from .evaluation import (
    BoundaryAnalysis,
    DecileErrorTable,
    OodMetrics,
    QuartileRow,
    StabilityReport,
    StageFlipReport,
    WelchResult,
    boundary_distance_analysis,
    decile_error,
    msp_scores,
    ood_metrics,
    ood_percentile_representation,
    stability_report,
    stage_flip_report,
    vog_detection_scores,
    welch_ttest_samples,
)
from .training import CheckpointSet, TrainConfig, select_stage, train


def config_digest(config: dict) -> str:
    """Short stable hash of a JSON-serializable config."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canon.encode(), digest_size=8).hexdigest()


def report_header(config: dict, seed: int) -> dict:
    return {"tool_version": __version__, "config_digest": config_digest(config), "seed": int(seed)}


def _plain(cfg) -> dict:
    """dataclass -> dict with tuples turned into lists (JSON round-trip stable)."""
    def conv(v):
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(asdict(cfg))


def _from_plain(cls, d: dict):
    """Inverse of ``_plain`` for the flat config dataclasses below; unknown keys are rejected."""
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls, k, None)
        if isinstance(default, DigitsConfig):
            kw[k] = DigitsConfig.from_dict(v)
        elif isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kw[k] = v
    return cls(**kw)


def _error_percent(params: nn.Params, data: LabeledDataset) -> float:
    pred = predict_labels(params, data.images)
    return float(100.0 * np.mean(pred != data.labels))


# -- toy blobs -------------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    n_points: int = 1000
    cluster_std: float = 1.2
    hidden: int = 10
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 1
    stage: str = "late"

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        return _from_plain(cls, d)


@dataclass
class ToyResult:
    config: ToyConfig
    train_error_percent: float
    test_error_percent: float
    boundary: BoundaryAnalysis
    records: list[VogRecord]
    test: LabeledDataset

    def to_dict(self) -> dict:
        return {
            **report_header(self.config.to_dict(), self.config.seed),
            "config": self.config.to_dict(),
            "train_error_percent": self.train_error_percent,
            "test_error_percent": self.test_error_percent,
            "boundary": self.boundary.to_dict(),
        }


def run_toy(cfg: ToyConfig, out_dir: str | Path, workers: int | None = 1) -> ToyResult:
    """Two Gaussian blobs, a one-hidden-layer tanh MLP, and VoG against distance to the decision boundary."""
    train_ds, test_ds = make_blobs(BlobConfig(cfg.n_points, cluster_std=cfg.cluster_std, seed=cfg.seed))
    spec = nn.mlp((1, 1, 2), [cfg.hidden], 2, activation="tanh")
    tc = TrainConfig(cfg.epochs, cfg.batch_size, ((0, cfg.lr),), 1, cfg.seed)
    cs = train(spec, train_ds, tc, Path(out_dir) / "checkpoints")
    final = cs.load(len(cs) - 1)
    records = compute_vog(cs, test_ds, "true", cfg.stage, workers)
    boundary = boundary_distance_analysis(final, test_ds, records)
    return ToyResult(cfg, _error_percent(final, train_ds), _error_percent(final, test_ds), boundary, records,
                     test_ds)


# -- desk-scale digits -------------------------------------------------------------


@dataclass(frozen=True)
class DigitsConfig:
    n_train: int = 5000
    n_test: int = 2000
    seed: int = 100
    max_blend: float = 0.5
    distortion: float = 0.3

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DigitsConfig":
        return _from_plain(cls, d)

    def make(self) -> tuple[LabeledDataset, LabeledDataset]:
        tr = make_digits(self.n_train, self.seed, "train", max_blend=self.max_blend, distortion=self.distortion)
        te = make_digits(self.n_test, self.seed, "test", max_blend=self.max_blend, distortion=self.distortion)
        return tr, te


@dataclass(frozen=True)
class DeskConfig:
    """Digits run used for decile curves, stage flip and stability.

    A short low-learning-rate phase is stored epoch by epoch (the early
    stage); afterwards checkpoints are spaced ``checkpoint_every`` epochs.
    """

    digits: DigitsConfig = DigitsConfig()
    hidden: tuple[int, ...] = (128,)
    activation: str = "tanh"
    epochs: int = 30
    batch_size: int = 32
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-3), (3, 0.1))
    checkpoint_every: int = 5
    early_checkpoints: tuple[int, ...] = (1, 2, 3)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        return _from_plain(cls, d)

    def model_spec(self) -> nn.ModelSpec:
        return nn.mlp((1, 28, 28), list(self.hidden), 10, activation=self.activation)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr_schedule, self.checkpoint_every, self.seed,
                           extra_checkpoints=self.early_checkpoints)


@dataclass
class DeskResult:
    config: DeskConfig
    checkpoints: CheckpointSet
    test_error_percent: float
    late_records: list[VogRecord]
    late_table: DecileErrorTable
    flip: StageFlipReport

    def to_dict(self) -> dict:
        rho, p = self.late_table.trend()
        return {
            **report_header(self.config.to_dict(), self.config.seed),
            "config": self.config.to_dict(),
            "test_error_percent": self.test_error_percent,
            "late_decile": self.late_table.to_dict(),
            "late_top_exceeds_bottom": self.late_table.errors[-1] > self.late_table.errors[0],
            "late_trend_positive": bool(rho > 0 and p < 0.05),
            "stage_flip": self.flip.to_dict(),
        }


def run_desk(cfg: DeskConfig, out_dir: str | Path, workers: int | None = 1,
             data: tuple[LabeledDataset, LabeledDataset] | None = None) -> DeskResult:
    tr, te = data if data is not None else cfg.digits.make()
    cs = train(cfg.model_spec(), tr, cfg.train_config(), Path(out_dir) / "checkpoints")
    final = cs.load(len(cs) - 1)
    records = compute_vog(cs, te, "true", "late", workers)
    table = decile_error(rank(records), {r.example_id: r.true_label == r.predicted_label for r in records})
    flip = stage_flip_report(cs, te, "true", workers, correctness="stage")
    return DeskResult(cfg, cs, _error_percent(final, te), records, table, flip)


@dataclass
class FlipSweep:
    seeds: list[int]
    reports: list[StageFlipReport]

    @property
    def flips(self) -> int:
        return sum(r.flip_detected for r in self.reports)

    @property
    def majority(self) -> bool:
        return self.flips * 2 > len(self.reports)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "flip_detected": [r.flip_detected for r in self.reports],
            "early_spearman": [r.early.trend()[0] for r in self.reports],
            "late_spearman": [r.late.trend()[0] for r in self.reports],
            "flips": self.flips,
            "majority": self.majority,
        }


def stability_between(a: DeskResult, b: DeskResult) -> StabilityReport:
    return stability_report(a.late_records, b.late_records, a.late_table, b.late_table)


# -- memorization ------------------------------------------------------------------------


@dataclass(frozen=True)
class MemConfig:
    n_train: int = 10000
    data_seed: int = 200
    shuffle_fraction: float = 0.2
    hidden: tuple[int, ...] = (512,)
    activation: str = "relu"
    epochs: int = 45
    batch_size: int = 32
    lr: float = 0.1
    checkpoint_every: int = 1
    stage: str = "late"
    alpha: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MemConfig":
        return _from_plain(cls, d)


@dataclass
class MemResult:
    config: MemConfig
    train_error_percent: float
    welch: WelchResult
    n_shuffled: int
    runtime_seconds: float

    def to_dict(self) -> dict:
        return {
            **report_header(self.config.to_dict(), self.config.seed),
            "config": self.config.to_dict(),
            "train_error_percent": self.train_error_percent,
            "n_shuffled": self.n_shuffled,
            "shuffled_mean_exceeds_clean": self.welch.mean1 > self.welch.mean2,
            "welch": self.welch.to_dict(),
        }


def run_memtest(cfg: MemConfig, out_dir: str | Path, workers: int | None = 1,
                data: LabeledDataset | None = None) -> MemResult:
    """Train with a fraction of labels reassigned, then compare train-set VoG of shuffled vs clean examples.

    VoG is taken for the (possibly reassigned) training label, which is the
    label the network was asked to fit, over the late checkpoints where the
    shuffled examples are being memorized.  Sample 1 of the Welch test is the
    shuffled subset, sample 2 the clean one.
    """
    t0 = time.perf_counter()
    if data is None:
        data = make_digits(cfg.n_train, cfg.data_seed, "train")
    spec = nn.mlp(data.image_shape, list(cfg.hidden), data.class_count, activation=cfg.activation)
    tc = TrainConfig(cfg.epochs, cfg.batch_size, ((0, cfg.lr),), cfg.checkpoint_every, cfg.seed,
                     cfg.shuffle_fraction)
    cs = train(spec, data, tc, Path(out_dir) / "checkpoints")
    shuffle = cs.label_shuffle
    labels = data.labels.copy()
    labels[shuffle.shuffled_indices] = shuffle.new_labels
    noisy = data.with_labels(labels, f"{data.provenance}+shuffled({cfg.shuffle_fraction})")
    records = compute_vog(cs, noisy, "true", cfg.stage, workers)
    is_shuffled = np.zeros(len(noisy), dtype=bool)
    is_shuffled[shuffle.shuffled_indices] = True
    # raw VoG: class normalization would partly absorb the shuffled subset's shift
    vog = np.array([r.raw_vog for r in records])
    welch = welch_ttest_samples(vog[is_shuffled], vog[~is_shuffled], cfg.alpha)
    final = cs.load(len(cs) - 1)
    return MemResult(cfg, _error_percent(final, noisy), welch, int(is_shuffled.sum()), time.perf_counter() - t0)


# -- OoD detection -----------------------------------------------------------------------


@dataclass(frozen=True)
class OodConfig:
    digits: DigitsConfig = DigitsConfig()
    n_ood: int = 10000
    ood_seed: int = 7
    channels: tuple[int, ...] = (8,)
    kernel: int = 5
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.05
    checkpoint_every: int = 1
    stage: str = "late"
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OodConfig":
        return _from_plain(cls, d)

    def model_spec(self) -> nn.ModelSpec:
        return nn.convnet((1, 28, 28), list(self.channels), self.kernel, [], 10)


@dataclass
class OodResult:
    vog: OodMetrics
    msp: OodMetrics
    quartiles: list[QuartileRow]
    test_error_percent: float
    header: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def top_ge_bottom(self) -> bool:
        return self.quartiles[-1].fraction_of_ood >= self.quartiles[0].fraction_of_ood

    def to_dict(self) -> dict:
        return {
            **self.header,
            "config": self.config,
            "test_error_percent": self.test_error_percent,
            "vog": self.vog.to_dict(),
            "msp": self.msp.to_dict(),
            "quartiles": [q.to_dict() for q in self.quartiles],
            "top_quartile_ge_bottom": self.top_ge_bottom,
        }


def ood_records(cs: CheckpointSet, in_data: LabeledDataset, ood_data: LabeledDataset, stage: str = "late",
                workers: int | None = 1) -> tuple[list[VogRecord], list[VogRecord]]:
    """Predicted-label VoG for both sets; OoD records are normalized with in-distribution class statistics."""
    in_raw = compute_vog(cs, in_data, "predicted", stage, workers, normalize=False)
    staged = select_stage(cs, stage)
    params = [staged.load(i) for i in range(len(staged))]
    pred = predict_labels(cs.load(len(cs) - 1), ood_data.images)
    raw = raw_vog_scores(params, ood_data.images, pred, max(1, workers or 1))
    offset = len(in_data)  # keep ids of the pooled ranking distinct
    out_raw = [
        VogRecord(offset + int(i), int(t), int(p), float(v), 0.0, "predicted", stage, ood_data.split)
        for i, t, p, v in zip(ood_data.example_ids, ood_data.labels, pred, raw)
    ]
    return normalize_by_class(in_raw), normalize_by_class(out_raw, reference=in_raw)


def ood_evaluation(cs: CheckpointSet, in_data: LabeledDataset, ood_data: LabeledDataset, stage: str = "late",
                   workers: int | None = 1) -> OodResult:
    ins, outs = ood_records(cs, in_data, ood_data, stage, workers)
    final = cs.load(len(cs) - 1)
    vog = ood_metrics(vog_detection_scores(ins), vog_detection_scores(outs))
    msp = ood_metrics(msp_scores(final, in_data), msp_scores(final, ood_data))
    quart = ood_percentile_representation(ins, outs)
    return OodResult(vog, msp, quart, _error_percent(final, in_data))


def run_ood(cfg: OodConfig, out_dir: str | Path, workers: int | None = 1,
            data: tuple[LabeledDataset, LabeledDataset] | None = None) -> OodResult:
    tr, te = data if data is not None else cfg.digits.make()
    ood = gaussian_ood(cfg.n_ood, te.image_shape, cfg.ood_seed)
    tc = TrainConfig(cfg.epochs, cfg.batch_size, ((0, cfg.lr),), cfg.checkpoint_every, cfg.seed)
    cs = train(cfg.model_spec(), tr, tc, Path(out_dir) / "checkpoints")
    res = ood_evaluation(cs, te, ood, cfg.stage, workers)
    res.header = report_header(cfg.to_dict(), cfg.seed)
    res.config = cfg.to_dict()
    return res


def top_bottom_ids(records: Sequence[VogRecord], k: int = 10, key: str = "normalized_vog") -> dict[str, dict]:
    """Per class (record grouping label), the ``k`` lowest- and highest-scoring example ids."""
    groups: dict[int, list[VogRecord]] = {}
    for r in records:
        groups.setdefault(r.group, []).append(r)
    out = {}
    for g in sorted(groups):
        ranked = rank(groups[g], key).example_ids
        out[str(g)] = {"lowest": ranked[:k], "highest": ranked[::-1][:k]}
    return out
