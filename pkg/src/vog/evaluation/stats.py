"""Student-t distribution, Welch's two-sample test and correlation coefficients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class CorrelationUndefinedError(ValueError):
    pass


def _betacf(a: float, b: float, x: float, max_iter: int = 20000, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t > 0 else tail


def t_pdf(t: float, df: float) -> float:
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(t * t / df))


@dataclass(frozen=True)
class WelchResult:
    mean1: float
    std1: float
    n1: int
    mean2: float
    std2: float
    n2: int
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    alpha: float
    reject_at_alpha: bool

    def to_dict(self) -> dict:
        return asdict(self)


def welch_ttest(summary1: tuple[float, float, int], summary2: tuple[float, float, int],
                alpha: float = 0.05) -> WelchResult:
    """Two-sided Welch test from (mean, std, n) summaries; std is the sample std (divisor n-1)."""
    (m1, s1, n1), (m2, s2, n2) = summary1, summary2
    if n1 < 2 or n2 < 2:
        raise ValueError(f"each sample needs n >= 2, got n1={n1}, n2={n2}")
    if s1 < 0 or s2 < 0:
        raise ValueError("standard deviations must be non-negative")
    v1, v2 = s1 * s1 / n1, s2 * s2 / n2
    se2 = v1 + v2
    if se2 == 0.0:
        if m1 == m2:
            t, df, p = 0.0, float(n1 + n2 - 2), 1.0
        else:
            t, df, p = math.copysign(math.inf, m1 - m2), float(n1 + n2 - 2), 0.0
    else:
        t = (m1 - m2) / math.sqrt(se2)
        df = se2 * se2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
        p = t_sf_two_sided(t, df)
    p = min(max(p, 0.0), 1.0)
    return WelchResult(float(m1), float(s1), int(n1), float(m2), float(s2), int(n2), float(t), float(df), float(p),
                       alpha, bool(p < alpha))


def welch_ttest_samples(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> WelchResult:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"each sample needs n >= 2, got {a.size} and {b.size}")
    return welch_ttest((a.mean(), a.std(ddof=1), a.size), (b.mean(), b.std(ddof=1), b.size), alpha)


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties given their average rank (exact in float64)."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = x.size
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]  # exclusive
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


@dataclass(frozen=True)
class CorrelationResult:
    pearson_r: float
    spearman_rho: float
    pearson_p: float
    spearman_p: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise CorrelationUndefinedError("correlation undefined: an input has zero variance")
    return max(-1.0, min(1.0, float(dx @ dy) / (sx * sy)))


def _r_pvalue(r: float, n: int) -> float:
    if n < 3:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return t_sf_two_sided(t, n - 2)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    x, y = _pair(xs, ys)
    r = _pearson(x, y)
    return r, _r_pvalue(r, x.size)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Rank correlation with the usual t approximation for the p-value."""
    x, y = _pair(xs, ys)
    rho = _pearson(rankdata(x), rankdata(y))
    return rho, _r_pvalue(rho, x.size)


def _pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ValueError(f"need at least 3 points, got {x.size}")
    return x, y


def correlations(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    r, p = pearson(xs, ys)
    rho, sp = spearman(xs, ys)
    return CorrelationResult(r, rho, p, sp, len(xs))
