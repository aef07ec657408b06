"""Out-of-distribution detection metrics.

Detection scores follow the convention "higher means more in-distribution".
VoG is higher for atypical inputs, so its detection score is the negated
normalized VoG.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .. import nn
from ..data import LabeledDataset
from ..engine import VogRecord, bucket_sizes
from .stats import rankdata


def _nonempty(name: str, xs) -> np.ndarray:
    a = np.asarray(xs, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return a


def auroc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """P(score of a positive > score of a negative), ties counting one half (Mann-Whitney U)."""
    pos, neg = _nonempty("scores_pos", scores_pos), _nonempty("scores_neg", scores_neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    n1, n2 = pos.size, neg.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def average_precision(scores: np.ndarray, is_pos: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve over distinct thresholds."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], is_pos[order].astype(np.float64)
    tp = np.cumsum(y)
    seen = np.arange(1, s.size + 1)
    last = np.r_[s[1:] != s[:-1], True]  # final position of each distinct score
    tp, seen = tp[last], seen[last]
    recall = tp / tp[-1]
    precision = tp / seen
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def aupr(scores_pos: Sequence[float], scores_neg: Sequence[float], positive: str = "in") -> float:
    """AUPR with in-distribution (``in``) or OoD (``out``) as the positive class.

    ``scores_pos`` are the in-distribution scores.  In ``out`` mode the
    scores are negated and the OoD examples become the positives.
    """
    pos, neg = _nonempty("scores_pos", scores_pos), _nonempty("scores_neg", scores_neg)
    if positive == "in":
        scores, labels = np.concatenate([pos, neg]), np.r_[np.ones(pos.size, bool), np.zeros(neg.size, bool)]
    elif positive == "out":
        scores, labels = -np.concatenate([neg, pos]), np.r_[np.ones(neg.size, bool), np.zeros(pos.size, bool)]
    else:
        raise ValueError(f"positive must be 'in' or 'out', got {positive!r}")
    return average_precision(scores, labels)


@dataclass(frozen=True)
class OodMetrics:
    auroc: float
    aupr_in: float
    aupr_out: float
    auroc_base: float
    aupr_in_base: float
    aupr_out_base: float
    n_in: int
    n_out: int

    def to_dict(self) -> dict:
        return asdict(self)


def ood_metrics(in_scores: Sequence[float], out_scores: Sequence[float]) -> OodMetrics:
    pos, neg = _nonempty("in_scores", in_scores), _nonempty("out_scores", out_scores)
    total = pos.size + neg.size
    return OodMetrics(
        auroc(pos, neg), aupr(pos, neg, "in"), aupr(pos, neg, "out"),
        0.5, pos.size / total, neg.size / total, int(pos.size), int(neg.size),
    )


def msp_scores(params: nn.Params, data: LabeledDataset | np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Maximum softmax probability per example, indexed by example id."""
    images = data.images if isinstance(data, LabeledDataset) else np.asarray(data)
    out = np.empty(images.shape[0])
    for s in range(0, images.shape[0], chunk):
        out[s:s + chunk] = nn.softmax(nn.forward_batch(params, images[s:s + chunk])).max(axis=1)
    return out


def vog_detection_scores(records: Sequence[VogRecord]) -> np.ndarray:
    return -np.array([r.normalized_vog for r in sorted(records, key=lambda r: r.example_id)])


@dataclass(frozen=True)
class QuartileRow:
    quartile: int  # 1 = lowest VoG
    size: int
    n_ood: int
    fraction_of_ood: float
    ood_share: float

    def to_dict(self) -> dict:
        return asdict(self)


def ood_percentile_representation(in_records: Sequence[VogRecord], ood_records: Sequence[VogRecord],
                                  buckets: int = 4) -> list[QuartileRow]:
    """Where OoD examples land in the pooled VoG ranking, by quartile (lowest first).

    ``fraction_of_ood`` is the share of all OoD examples falling in the
    quartile; ``ood_share`` is the share of the quartile that is OoD.
    """
    if not in_records or not ood_records:
        raise ValueError("both in-distribution and OoD records are required")
    tagged = [(r.normalized_vog, 0, r.example_id, False) for r in in_records]
    tagged += [(r.normalized_vog, 1, r.example_id, True) for r in ood_records]
    tagged.sort()
    rows, start = [], 0
    n_ood = len(ood_records)
    for q, size in enumerate(bucket_sizes(len(tagged), buckets), start=1):
        k = sum(1 for t in tagged[start:start + size] if t[3])
        rows.append(QuartileRow(q, size, k, k / n_ood, k / size if size else 0.0))
        start += size
    return rows

