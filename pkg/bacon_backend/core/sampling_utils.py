"""Numerically stable sampling helpers shared by the samplers."""
import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from shared.errors import NumericError

logger = logging.getLogger(__name__)

# Floor for probabilities entering a log inside the samplers.
LOG_FLOOR = 1e-300


def safe_log(x) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def log_normalize(log_weights: np.ndarray) -> np.ndarray:
    """Turn unnormalized log weights into a probability vector."""
    log_weights = np.asarray(log_weights, dtype=np.float64)
    total = logsumexp(log_weights)
    if not np.isfinite(total):
        raise NumericError("cannot normalize: every log weight is -inf or nan")
    probs = np.exp(log_weights - total)
    return probs / probs.sum()


def sample_log_weights(log_weights: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one index from unnormalized log weights by inverting the CDF.

    Uses exactly one uniform per call, so chains stay aligned across runs.
    """
    probs = log_normalize(log_weights)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, probs.size - 1)


def sample_truncated_beta(a: float, b: float, lower: float, rng: np.random.Generator) -> float:
    """Draw from Beta(a, b) restricted to (lower, 1) by inverting the survival function."""
    u = rng.random()
    log_tail = stats.beta.logsf(lower, a, b)
    if np.isfinite(log_tail) and log_tail > -700:
        x = float(stats.beta.isf(u * np.exp(log_tail), a, b))
    else:
        # The tail mass underflows; the draw sits at the truncation point.
        x = lower
    low = np.nextafter(lower, 1.0)
    high = np.nextafter(1.0, 0.0)
    if not np.isfinite(x):
        x = low
    return float(min(max(x, low), high))


@lru_cache(maxsize=8)
def unit_gauss_legendre(points: int = 51) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped onto (0, 1)."""
    nodes, weights = np.polynomial.legendre.leggauss(points)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def batch_means_se(samples, batches: int = 20) -> float:
    """Monte Carlo standard error of a chain mean by non-overlapping batch means."""
    samples = np.asarray(samples, dtype=np.float64)
    size = samples.size // batches
    if size < 2:
        return float(np.std(samples, ddof=1) / np.sqrt(max(samples.size, 1))) if samples.size > 1 else 0.0
    means = samples[: size * batches].reshape(batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(batches))
