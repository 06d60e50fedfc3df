"""Scoring against truth: pair accuracy, selection rates, prediction error, evidence summaries."""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import stats

from core.model import mean_taxicab_distances
from shared.errors import DataError
from shared.models import AllocationState, ResponseData

logger = logging.getLogger(__name__)


class TaxicabSummary(BaseModel):
    quantiles: Dict[str, float]
    bin_edges: List[float]
    counts: List[int]


def _upper_pairs(p: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(p, k=1)


def _same_cluster(labels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return labels[rows] == labels[cols]


def tau(est_labels_chain: Sequence[Sequence[int]], true_labels: Sequence[int]) -> float:
    """Chain average of the share of covariate pairs whose co-clustering matches the truth."""
    truth = np.asarray(true_labels)
    p = truth.size
    if p < 2:
        raise DataError("tau needs at least two covariates")
    if len(est_labels_chain) == 0:
        raise DataError("tau needs at least one allocation sample")
    rows, cols = _upper_pairs(p)
    true_same = _same_cluster(truth, rows, cols)
    scores = []
    for labels in est_labels_chain:
        labels = np.asarray(labels)
        if labels.size != p:
            raise DataError(f"sample has {labels.size} labels, truth has {p}")
        scores.append(np.mean(_same_cluster(labels, rows, cols) == true_same))
    return float(np.mean(scores))


def tau_from_cocluster(pihat: np.ndarray, true_labels: Sequence[int]) -> float:
    """Same quantity as ``tau`` computed from the co-clustering matrix (tau is linear in the indicators)."""
    truth = np.asarray(true_labels)
    pihat = np.asarray(pihat, dtype=np.float64)
    if truth.size < 2 or pihat.shape != (truth.size, truth.size):
        raise DataError("pihat and truth do not describe the same covariates")
    rows, cols = _upper_pairs(truth.size)
    probs = pihat[rows, cols]
    return float(np.mean(np.where(_same_cluster(truth, rows, cols), probs, 1.0 - probs)))


def logbf_lower_bound(log_odds: Sequence[float]) -> Tuple[float, float]:
    """Mean and standard deviation of per-sweep conditional log-odds of d > 0."""
    values = np.asarray(log_odds, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise DataError("no finite log-odds recorded")
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), sd


def d_posterior_summary(d_samples: Sequence[float], level: float = 0.95) -> Dict[str, float]:
    """Credible interval, mean and zero mass of the discount parameter."""
    d = np.asarray(d_samples, dtype=np.float64)
    if d.size == 0:
        raise DataError("no discount samples")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(d, [tail, 100.0 - tail])
    return {"lo": float(lo), "hi": float(hi), "mean": float(d.mean()), "zero_prob": float(np.mean(d == 0.0))}


def tpr_tnr(gamma_samples, est_alloc: AllocationState, true_s: Sequence[int]) -> Tuple[float, float]:
    """Cluster-level credit: a covariate counts as selected when its cluster is included."""
    gammas = np.atleast_2d(np.asarray(gamma_samples, dtype=np.float64))
    if gammas.shape[1] != est_alloc.q:
        raise DataError(f"gamma has {gammas.shape[1]} entries, allocation has {est_alloc.q} clusters")
    labels = est_alloc.as_array()
    inclusion = gammas.mean(axis=0)[labels]
    truth = np.zeros(est_alloc.p, dtype=bool)
    truth[np.asarray(true_s, dtype=np.int64)] = True
    if truth.all() or not truth.any():
        raise DataError("true predictor set must be a proper non-empty subset")
    return float(inclusion[truth].mean()), float((1.0 - inclusion[~truth]).mean())


def pct_mse_reduction(y_test, yhat, ybar_train: float) -> float:
    y = np.asarray(y_test, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.size == 0:
        raise DataError("no test responses")
    null_sse = float(np.sum((y - ybar_train) ** 2))
    if null_sse == 0.0:
        raise DataError("every test response equals the training mean")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / null_sse


def oracle_ols_reduction(bits, data: ResponseData, true_s: Sequence[int]) -> float:
    """MSE reduction of an OLS fit on the true predictors."""
    if data.y_test is None or not data.test_idx:
        raise DataError("oracle reduction needs held-out responses")
    x = np.asarray(bits, dtype=np.float64)[:, list(true_s)]
    train, test = np.asarray(data.train_idx), np.asarray(data.test_idx)
    design = np.column_stack([np.ones(train.size), x[train]])
    coef, *_ = np.linalg.lstsq(design, np.asarray(data.y_train), rcond=None)
    yhat = np.column_stack([np.ones(test.size), x[test]]) @ coef
    return pct_mse_reduction(data.y_test, yhat, float(np.mean(data.y_train)))


def taxicab_summary(bits, bins: int = 50) -> TaxicabSummary:
    """Quantiles and a fixed-width histogram of all pairwise mean taxicab distances."""
    x = np.asarray(bits)
    if x.shape[1] < 2:
        raise DataError("taxicab summary needs at least two covariates")
    rows, cols = _upper_pairs(x.shape[1])
    dist = mean_taxicab_distances(x)[rows, cols]
    counts, edges = np.histogram(dist, bins=bins, range=(0.0, 1.0))
    probs = (0.05, 0.25, 0.5, 0.75, 0.95)
    return TaxicabSummary(
        quantiles={f"q{int(round(100 * pr)):02d}": float(v) for pr, v in zip(probs, np.quantile(dist, probs))},
        bin_edges=edges.tolist(),
        counts=counts.tolist(),
    )


def cluster_size_powerlaw(sizes: Sequence[int]) -> Tuple[float, float]:
    """Least-squares fit of size_k = a * k^(-b) over ranks k > 1 of the sorted cluster sizes."""
    ordered = np.sort(np.asarray(sizes, dtype=np.float64))[::-1]
    if ordered.size < 3:
        raise DataError("power-law fit needs at least three clusters")
    ranks = np.arange(1, ordered.size + 1, dtype=np.float64)
    fit = stats.linregress(np.log(ranks[1:]), np.log(ordered[1:]))
    return float(np.exp(fit.intercept)), float(-fit.slope)
