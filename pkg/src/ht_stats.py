"""
Heavy-tail index estimation for stochastic gradients.
Block-sum log-moment estimator of the alpha-stable index and a
Chambers-Mallows-Stuck generator for symmetric alpha-stable samples.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from src.errors import EstimationError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100


@dataclass(frozen=True)
class AlphaEstimate:
    """alpha_hat is clipped into (0, 2]; raw_alpha is the unclipped value."""
    alpha_hat: float
    raw_alpha: float
    sample_count: int
    epoch: Optional[int] = None


def estimate_alpha(samples, epoch: Optional[int] = None) -> AlphaEstimate:
    """
    1/alpha = (1 / ln K1) [ mean_j ln|Y_j| - mean_i ln|X_i| ]

    with K1 = floor(sqrt(N)), K2 = floor(N / K1), Y_j the sums of
    consecutive blocks of K1 samples. Exact zeros are dropped first.
    """
    x = np.ravel(np.asarray(samples, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise EstimationError("samples contain NaN or Inf", epoch)
    nonzero = x[x != 0.0]
    zeros = x.size - nonzero.size
    if x.size == 0 or nonzero.size == 0:
        raise EstimationError("all samples are zero", epoch)
    if zeros * 2 > x.size:
        raise EstimationError(f"{zeros} of {x.size} samples are exactly zero", epoch)
    n = nonzero.size
    if n < MIN_SAMPLES:
        raise EstimationError(f"need at least {MIN_SAMPLES} nonzero samples, got {n}", epoch)

    k1 = math.isqrt(n)
    k2 = n // k1
    used = nonzero[:k1 * k2]
    block_sums = used.reshape(k2, k1).sum(axis=1)
    # a block can cancel to exactly zero; log|0| would be -inf
    block_sums = block_sums[block_sums != 0.0]
    if block_sums.size == 0:
        raise EstimationError("every block sum is zero", epoch)
    inv_alpha = (np.mean(np.log(np.abs(block_sums))) - np.mean(np.log(np.abs(used)))) / math.log(k1)

    raw_alpha = 1.0 / inv_alpha if inv_alpha != 0 else math.inf
    if inv_alpha <= 0 or raw_alpha > 2.0:
        alpha_hat = 2.0
    else:
        alpha_hat = raw_alpha
    return AlphaEstimate(float(alpha_hat), float(raw_alpha), int(used.size), epoch)


def generate_sas(alpha: float, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Symmetric alpha-stable samples with scale sigma (Chambers-Mallows-Stuck).
    alpha = 2 gives Normal(0, 2 sigma^2); alpha = 1 gives Cauchy(0, sigma).
    """
    if not 0.0 < alpha <= 2.0:
        raise ValueError(f"alpha must be in (0, 2], got {alpha}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")

    if alpha == 2.0:
        return sigma * math.sqrt(2.0) * rng.standard_normal(n)
    u = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
    w = rng.standard_exponential(n)
    if alpha == 1.0:
        return sigma * np.tan(u)
    return sigma * (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)
                    * (np.cos(u - alpha * u) / w) ** ((1.0 - alpha) / alpha))


class GradientTraceRecorder:
    """
    Collects one epoch's stochastic gradients as a P x S matrix: one
    column per training step, computed entries only.
    """

    def __init__(self):
        self._columns: List[np.ndarray] = []

    def record_step(self, gradient_entries: np.ndarray):
        column = np.ravel(np.asarray(gradient_entries, dtype=np.float64))
        if self._columns and column.size != self._columns[0].size:
            raise EstimationError(f"trace column has {column.size} entries, "
                                  f"earlier columns have {self._columns[0].size}")
        self._columns.append(column.copy())

    @property
    def steps(self) -> int:
        return len(self._columns)

    def matrix(self) -> np.ndarray:
        if not self._columns:
            return np.zeros((0, 0))
        return np.stack(self._columns, axis=1)

    def reset(self) -> np.ndarray:
        """Return this epoch's matrix and start a new one."""
        matrix = self.matrix()
        self._columns = []
        return matrix


def alpha_trajectory(matrices: Iterable[np.ndarray]) -> List[AlphaEstimate]:
    """One estimate per epoch; each P x S matrix is flattened row-major."""
    estimates = []
    for epoch, matrix in enumerate(matrices):
        matrix = np.asarray(matrix, dtype=np.float64)
        if np.isnan(matrix).any():
            raise EstimationError("trace matrix contains NaN", epoch)
        estimates.append(estimate_alpha(matrix.ravel(order="C"), epoch=epoch))
    return estimates
