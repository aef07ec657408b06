"""Difficulty analyses built on VoG rankings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import nn
from ..data import LabeledDataset
from ..engine import VogRanking, VogRecord, compute_vog, percentile_bucket, predict_labels, rank
from ..training import CheckpointSet, select_stage
from .stats import CorrelationUndefinedError, correlations, spearman


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecileRow:
    lo_percentile: float
    hi_percentile: float
    n_examples: int
    top1_error_percent: float


@dataclass
class DecileErrorTable:
    stage: str
    rows: list[DecileRow]

    @property
    def errors(self) -> list[float]:
        return [r.top1_error_percent for r in self.rows]

    def trend(self) -> tuple[float, float]:
        """Spearman correlation between decile index and error, with its p-value.

        A flat table has no defined trend and reports ``(0.0, 1.0)``.
        """
        try:
            return spearman(np.arange(len(self.rows)), self.errors)
        except CorrelationUndefinedError:
            return 0.0, 1.0

    def to_dict(self) -> dict:
        rho, p = self.trend()
        return {
            "stage": self.stage,
            "rows": [r.__dict__ for r in self.rows],
            "spearman_decile_error": rho,
            "spearman_p": p,
        }


def correctness_from_records(records: Sequence[VogRecord]) -> dict[int, bool]:
    return {r.example_id: r.true_label == r.predicted_label for r in records}


def decile_error(ranking: VogRanking, correctness: Mapping[int, bool], deciles: int = 10) -> DecileErrorTable:
    """Top-1 error (percent) of each VoG percentile bucket, lowest VoG first."""
    for r in ranking.records:
        if r.example_id not in correctness:
            raise ValueError(f"no correctness entry for example_id {r.example_id}")
    stage = ranking.records[0].stage if ranking.records else ""
    rows = []
    for i, bucket in enumerate(percentile_bucket(ranking, deciles)):
        ok = np.array([bool(correctness[r.example_id]) for r in bucket], dtype=np.float64)
        err = 100.0 * (ok.size - ok.sum()) / ok.size if ok.size else 0.0
        rows.append(DecileRow(100.0 * i / deciles, 100.0 * (i + 1) / deciles, int(ok.size), float(err)))
    return DecileErrorTable(stage, rows)


def flip_between(early: DecileErrorTable, late: DecileErrorTable) -> bool:
    return bool(np.sign(early.trend()[0]) * np.sign(late.trend()[0]) < 0)


@dataclass
class StageFlipReport:
    early: DecileErrorTable
    late: DecileErrorTable
    flip_detected: bool

    def to_dict(self) -> dict:
        return {"early": self.early.to_dict(), "late": self.late.to_dict(), "flip_detected": self.flip_detected}


def stage_flip_report(cs: CheckpointSet, data: LabeledDataset, label_source: str = "true",
                      workers: int | None = None, correctness: str = "stage") -> StageFlipReport:
    """Decile error tables for the early and late stages and whether their trends have opposite signs.

    With ``correctness="stage"`` each table judges errors with the last
    checkpoint of its own stage, so the early table describes the early
    model.  ``"final"`` judges both tables with the final checkpoint.
    """
    if correctness not in ("stage", "final"):
        raise ValueError(f"correctness must be 'stage' or 'final', got {correctness!r}")
    if len(cs) < 6:
        raise ValueError(f"stage flip analysis needs at least 6 stored checkpoints, have {len(cs)}")
    tables = {}
    for stage in ("early", "late"):
        records = compute_vog(cs, data, label_source, stage, workers)
        if correctness == "stage":
            staged = select_stage(cs, stage)
            pred = predict_labels(staged.load(len(staged) - 1), data.images)
            ok = {int(i): bool(t == p) for i, t, p in zip(data.example_ids, data.labels, pred)}
        else:
            ok = correctness_from_records(records)
        tables[stage] = decile_error(rank(records), ok)
    return StageFlipReport(tables["early"], tables["late"], flip_between(tables["early"], tables["late"]))


@dataclass
class StabilityReport:
    spearman_rho: float
    spearman_p: float
    n_shared: int
    decile_spread: list[float]

    @property
    def max_spread(self) -> float:
        return max(self.decile_spread)

    def to_dict(self) -> dict:
        return {
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "n_shared": self.n_shared,
            "decile_spread": self.decile_spread,
            "max_decile_spread": self.max_spread,
        }


def stability_report(records_a: Sequence[VogRecord], records_b: Sequence[VogRecord],
                     table_a: DecileErrorTable, table_b: DecileErrorTable,
                     key: str = "normalized_vog") -> StabilityReport:
    """Agreement of two runs: rank correlation of scores on shared ids and pointwise decile-error spread."""
    a = {r.example_id: getattr(r, key) for r in records_a}
    b = {r.example_id: getattr(r, key) for r in records_b}
    shared = sorted(a.keys() & b.keys())
    if len(table_a.rows) != len(table_b.rows):
        raise ValueError(f"decile tables differ in length: {len(table_a.rows)} vs {len(table_b.rows)}")
    rho, p = spearman([a[i] for i in shared], [b[i] for i in shared])
    spread = [abs(x - y) for x, y in zip(table_a.errors, table_b.errors)]
    return StabilityReport(rho, p, len(shared), spread)


# -- decision-boundary distance (2-D inputs) -----------------------------------


def _margin(params: nn.Params, pts: np.ndarray) -> np.ndarray:
    a = nn.forward_batch(params, pts.reshape(-1, 1, 1, 2))
    return a[:, 0] - a[:, 1]


def _margin_grad(params: nn.Params, pts: np.ndarray) -> np.ndarray:
    x = pts.reshape(-1, 1, 1, 2)
    g0 = nn.input_gradients_batch(params, x, np.zeros(len(pts), dtype=np.int64))
    g1 = nn.input_gradients_batch(params, x, np.ones(len(pts), dtype=np.int64))
    return (g0 - g1).reshape(-1, 2)


def _bisect(params: nn.Params, lo: np.ndarray, hi: np.ndarray, tol: float) -> np.ndarray:
    """Vectorized bisection between bracketing points with opposite margin signs."""
    if len(lo) == 0:
        return lo.copy()
    f_lo = _margin(params, lo)
    while True:
        mid = 0.5 * (lo + hi)
        f_mid = _margin(params, mid)
        left = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(left[:, None], mid, lo)
        f_lo = np.where(left, f_mid, f_lo)
        hi = np.where(left[:, None], hi, mid)
        if np.max(np.linalg.norm(hi - lo, axis=1)) < tol:
            return 0.5 * (lo + hi)


def boundary_points(params: nn.Params, bounds: tuple[np.ndarray, np.ndarray], grid: int = 200,
                    tol: float = 1e-4) -> tuple[np.ndarray, float]:
    """Points on the two-class decision set found on a grid and refined by bisection."""
    lo, hi = bounds
    xs, ys = np.linspace(lo[0], hi[0], grid), np.linspace(lo[1], hi[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sign = np.sign(_margin(params, pts)).reshape(grid, grid)
    a, b = [], []
    cross = sign[:, 1:] != sign[:, :-1]
    a.append(np.stack([gx[:, :-1][cross], gy[:, :-1][cross]], 1))
    b.append(np.stack([gx[:, 1:][cross], gy[:, 1:][cross]], 1))
    cross = sign[1:, :] != sign[:-1, :]
    a.append(np.stack([gx[:-1, :][cross], gy[:-1, :][cross]], 1))
    b.append(np.stack([gx[1:, :][cross], gy[1:, :][cross]], 1))
    a, b = np.concatenate(a), np.concatenate(b)
    if len(a) == 0:
        raise AnalysisError("no decision boundary inside the sampled bounding box")
    step = float(max(xs[1] - xs[0], ys[1] - ys[0]))
    return _bisect(params, a, b, tol), step


def boundary_distances(params: nn.Params, points: np.ndarray, grid: int = 200, tol: float = 1e-4,
                       refine_steps: int = 8) -> np.ndarray:
    """Minimum Euclidean distance from each 2-D point to the decision set ``score_0 == score_1``.

    The nearest grid-refined boundary point is improved by sliding along the
    local tangent and re-projecting onto the boundary along the normal.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = 0.1 * np.maximum(hi - lo, 1e-9)
    bpts, step = boundary_points(params, (lo - pad, hi + pad), grid, tol)
    d2 = ((points[:, None, :] - bpts[None, :, :]) ** 2).sum(-1)
    near = bpts[np.argmin(d2, axis=1)]
    best = np.sqrt(d2.min(axis=1))
    for _ in range(refine_steps):
        g = _margin_grad(params, near)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        ok = norm[:, 0] > 0
        n = np.where(ok[:, None], g / np.where(norm > 0, norm, 1.0), 0.0)
        t = np.stack([-n[:, 1], n[:, 0]], axis=1)
        slide = np.clip(((points - near) * t).sum(1, keepdims=True), -step, step)
        cand = near + slide * t
        # re-project onto the boundary along the normal
        h = np.full((len(cand), 1), step)
        for _ in range(20):
            bad = np.sign(_margin(params, cand - h * n)) == np.sign(_margin(params, cand + h * n))
            if not bad.any():
                break
            h = np.where(bad[:, None], 2 * h, h)
        bracket = np.sign(_margin(params, cand - h * n)) != np.sign(_margin(params, cand + h * n))
        proj = _bisect(params, (cand - h * n)[bracket], (cand + h * n)[bracket], tol) if bracket.any() else cand[:0]
        cand_on = cand.copy()
        cand_on[bracket] = proj
        valid = ok & bracket
        dist = np.linalg.norm(points - cand_on, axis=1)
        better = valid & (dist < best)
        near = np.where(better[:, None], cand_on, near)
        best = np.where(better, dist, best)
    return best


@dataclass
class BoundaryAnalysis:
    distances: np.ndarray
    spearman_rho: float | None
    pearson_r: float | None
    spearman_p: float | None = None
    note: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "pearson_r": self.pearson_r,
            "correlation_defined": self.spearman_rho is not None,
            "note": self.note,
            "n": int(self.distances.size),
            **self.extra,
        }


def boundary_distance_analysis(params: nn.Params, blobs_test: LabeledDataset, records: Sequence[VogRecord],
                               key: str = "normalized_vog", grid: int = 200, tol: float = 1e-4) -> BoundaryAnalysis:
    if blobs_test.image_shape != (1, 1, 2):
        raise ValueError(f"boundary analysis needs 2-D points shaped (1, 1, 2), got {blobs_test.image_shape}")
    dist = boundary_distances(params, blobs_test.images.reshape(-1, 2), grid=grid, tol=tol)
    by_id = {r.example_id: getattr(r, key) for r in records}
    vog = np.array([by_id[i] for i in blobs_test.example_ids])
    if np.ptp(dist) <= tol:
        # distances are only resolved to ``tol``; anything flatter is a constant
        return BoundaryAnalysis(dist, None, None, None, "correlation undefined: all distances are equal")
    try:
        c = correlations(vog, dist)
    except CorrelationUndefinedError as e:
        return BoundaryAnalysis(dist, None, None, None, str(e))
    return BoundaryAnalysis(dist, c.spearman_rho, c.pearson_r, c.spearman_p)


def class_error_vs_vog(records: Sequence[VogRecord]):
    """Correlate each class's false-negative rate with its mean raw VoG (true-label grouping)."""
    classes = sorted({r.true_label for r in records})
    fnr, mean_vog = [], []
    for c in classes:
        rs = [r for r in records if r.true_label == c]
        fnr.append(np.mean([r.predicted_label != c for r in rs]))
        mean_vog.append(np.mean([r.raw_vog for r in rs]))
    return classes, np.array(fnr), np.array(mean_vog), correlations(mean_vog, fnr)
