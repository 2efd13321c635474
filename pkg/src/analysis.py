"""
Cross-run statistics: Spearman topology matrices, two-sample and paired
t-tests, and the regularized incomplete beta behind Student-t p-values.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from src.errors import StatisticsError

CF_MAX_ITERATIONS = 10000
CF_EPS = 4e-16
CF_TINY = 1e-300


@dataclass(frozen=True)
class TopologyVector:
    """Cumulative gradient norms per layer or per channel for one run."""
    kind: str
    values: np.ndarray
    label: str = ""
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("layer", "channel"):
            raise StatisticsError(f"topology kind must be 'layer' or 'channel', got '{self.kind}'")
        values = np.asarray(self.values, dtype=np.float64)
        if np.any(values < 0):
            raise StatisticsError("topology vectors are nonnegative")
        object.__setattr__(self, 'values', values)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    degrees_of_freedom: float
    p_value: float
    kind: str


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Modified Lentz evaluation of the incomplete beta continued fraction."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < CF_TINY:
        d = CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITERATIONS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < CF_TINY:
            d = CF_TINY
        c = 1.0 + aa / c
        if abs(c) < CF_TINY:
            c = CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < CF_TINY:
            d = CF_TINY
        c = 1.0 + aa / c
        if abs(c) < CF_TINY:
            c = CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_EPS:
            return h
    raise StatisticsError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise StatisticsError(f"incomplete beta needs a, b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise StatisticsError(f"incomplete beta needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x)
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only below the mean; use symmetry above it
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T_df > t)."""
    if df <= 0:
        raise StatisticsError(f"degrees of freedom must be > 0, got {df}")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def student_t_two_sided(t: float, df: float) -> float:
    """P(|T_df| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    if df <= 0:
        raise StatisticsError(f"degrees of freedom must be > 0, got {df}")
    if math.isinf(t):
        return 0.0
    return min(1.0, regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; ties share the mean rank."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"spearman needs two vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise StatisticsError(f"spearman needs n >= 3, got {x.size}")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise StatisticsError("spearman is undefined for a constant vector")
    rho = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


def _check_same_kind(runs: Sequence[TopologyVector]):
    if not runs:
        raise StatisticsError("no runs given")
    kinds = {run.kind for run in runs}
    if len(kinds) > 1:
        raise StatisticsError(f"mixed topology kinds {sorted(kinds)}")
    lengths = {run.values.size for run in runs}
    if len(lengths) > 1:
        raise StatisticsError(f"topology vectors of different lengths {sorted(lengths)}")


def spearman_matrix(runs: Sequence[TopologyVector]) -> np.ndarray:
    """Symmetric matrix of pairwise Spearman correlations, unit diagonal."""
    _check_same_kind(runs)
    n = len(runs)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = spearman(runs[i].values, runs[j].values)
    return matrix


def t_test_two_sample(x, y, variant: str = "student_pooled") -> TestResult:
    """Two-sided two-sample t-test, pooled Student or Welch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise StatisticsError(f"each sample needs at least 2 values, got {nx} and {ny}")
    vx = float(np.var(x, ddof=1))
    vy = float(np.var(y, ddof=1))
    diff = float(x.mean() - y.mean())

    if variant == "student_pooled":
        df = float(nx + ny - 2)
        pooled = ((nx - 1) * vx + (ny - 1) * vy) / df
        se = math.sqrt(pooled * (1.0 / nx + 1.0 / ny))
        kind = "student"
    elif variant == "welch":
        ax, ay = vx / nx, vy / ny
        se = math.sqrt(ax + ay)
        if se == 0:
            df = float(nx + ny - 2)
        else:
            df = (ax + ay) ** 2 / (ax ** 2 / (nx - 1) + ay ** 2 / (ny - 1))
        kind = "welch"
    else:
        raise StatisticsError(f"unknown t-test variant '{variant}'")

    if se == 0:
        raise StatisticsError("both samples have zero variance")
    t = diff / se
    return TestResult(t, df, student_t_two_sided(t, df), kind)


def paired_t_test(a, b) -> TestResult:
    """One-sided paired test of mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError(f"paired test needs equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise StatisticsError(f"paired test needs n >= 2, got {n}")
    d = a - b
    if np.all(d == 0):
        raise StatisticsError("all paired differences are zero")
    sd = float(np.std(d, ddof=1))
    # rounding noise on a constant shift counts as zero spread
    if sd <= 1e-14 * abs(float(d.mean())):
        raise StatisticsError("paired differences have zero variance; t is infinite")
    t = float(d.mean()) / (sd / math.sqrt(n))
    df = float(n - 1)
    return TestResult(t, df, student_t_sf(t, df), "paired")


def t_test_matrix(runs: Sequence[TopologyVector], variant: str = "student_pooled") -> np.ndarray:
    """Two-sided p-values between every pair of runs' topology vectors."""
    _check_same_kind(runs)
    n = len(runs)
    matrix = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = t_test_two_sample(runs[i].values, runs[j].values, variant).p_value
    return matrix


def paired_test_matrix(accuracies: Mapping[str, Sequence[float]]) -> Tuple[List[str], np.ndarray]:
    """
    M[row][col] = one-sided p that strategy `row` beats `col`, pairing the
    accuracies cell by cell. The diagonal is NaN.
    """
    labels = list(accuracies)
    n = len(labels)
    matrix = np.full((n, n), np.nan)
    for i, row in enumerate(labels):
        for j, col in enumerate(labels):
            if i == j:
                continue
            try:
                matrix[i, j] = paired_t_test(accuracies[row], accuracies[col]).p_value
            except StatisticsError:
                # identical columns: no evidence either way
                matrix[i, j] = 0.5 if np.array_equal(accuracies[row], accuracies[col]) else np.nan
    return labels, matrix
