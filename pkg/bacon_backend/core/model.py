"""Priors and exact evaluations for the clustering model.

Covers the Poisson-Dirichlet allocation prior (CRP conditionals and EPPF),
the contamination channel Q and its transition-count likelihood, and the
closed-form evidence of the channel with Q* integrated out.
"""
import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import betaln, comb, gammaln

from shared.errors import DataError
from shared.models import AllocationState, ContaminationModel, PdpHyper, TransitionCounts

logger = logging.getLogger(__name__)


def crp_conditional(labels_prefix: Sequence[int], hyper: PdpHyper) -> np.ndarray:
    """Seating probabilities of the next customer given the tables so far.

    Entry k < q is an occupied table, the last entry is a new table.
    """
    labels = np.asarray(labels_prefix, dtype=np.int64)
    if labels.size == 0:
        return np.ones(1)
    sizes = np.bincount(labels)
    q = sizes.size
    weights = np.empty(q + 1)
    weights[:q] = sizes - hyper.discount
    weights[q] = hyper.mass + q * hyper.discount
    return weights / weights.sum()


def log_eppf_from_sizes(sizes, mass: float, d_grid) -> np.ndarray:
    """Log EPPF of a partition with the given block sizes, one value per discount."""
    d = np.atleast_1d(np.asarray(d_grid, dtype=np.float64))
    sizes = np.asarray(sizes, dtype=np.float64)
    p = sizes.sum()
    if p == 0:
        return np.zeros_like(d)
    k = np.arange(1, sizes.size, dtype=np.float64)
    new_tables = np.log(mass + np.outer(d, k)).sum(axis=1)
    existing = (gammaln(sizes[None, :] - d[:, None]) - gammaln(1.0 - d)[:, None]).sum(axis=1)
    return new_tables + existing - (gammaln(mass + p) - gammaln(mass + 1.0))


def log_eppf_grid(state: AllocationState, mass: float, d_grid) -> np.ndarray:
    """Log EPPF of one partition evaluated at every discount in d_grid."""
    return log_eppf_from_sizes(state.sizes, mass, d_grid)


def log_eppf(state: AllocationState, hyper: PdpHyper) -> float:
    """Log probability of the set partition under PDP(M, d)."""
    return float(log_eppf_grid(state, hyper.mass, hyper.discount)[0])


def sample_pdp_partition(p: int, mass: float, discount: float, rng: np.random.Generator) -> AllocationState:
    """Seat p customers by the extended Chinese restaurant process."""
    labels = np.zeros(p, dtype=np.int64)
    sizes = []
    for j in range(p):
        weights = np.array(sizes, dtype=np.float64) - discount
        weights = np.append(weights, mass + len(sizes) * discount)
        k = int(np.searchsorted(np.cumsum(weights), rng.random() * weights.sum(), side="right"))
        k = min(k, len(sizes))
        if k == len(sizes):
            sizes.append(1)
        else:
            sizes[k] += 1
        labels[j] = k
    return AllocationState(labels=tuple(int(c) for c in labels))


def expected_dp_clusters(p: int, mass: float) -> float:
    """Mean cluster count of p customers under a Dirichlet process."""
    return float(np.sum(mass / (mass + np.arange(p))))


def derive_q(model: ContaminationModel) -> np.ndarray:
    """Row-stochastic channel Q with rows r_s * e_s + (1 - r_s) * q*_s."""
    q_star = np.asarray(model.q_star, dtype=np.float64)
    r = np.asarray(model.r, dtype=np.float64)
    return r[:, None] * np.eye(2) + (1.0 - r)[:, None] * q_star


def transition_counts(x_col, v_col) -> TransitionCounts:
    x = np.asarray(x_col, dtype=np.int64)
    v = np.asarray(v_col, dtype=np.int64)
    if x.shape != v.shape:
        raise DataError(f"column lengths differ: x has {x.size}, v has {v.size}")
    n11 = int(np.sum(v & x))
    n10 = int(np.sum(v)) - n11
    n01 = int(np.sum(x)) - n11
    return TransitionCounts(n00=x.size - n11 - n10 - n01, n01=n01, n10=n10, n11=n11)


def log_contamination_likelihood(counts: TransitionCounts, q_matrix) -> float:
    """Sum of n_st * log q_st; -inf when a zero-probability transition is observed."""
    n = counts.as_matrix().astype(np.float64)
    q = np.asarray(q_matrix, dtype=np.float64)
    if np.any((q <= 0) & (n > 0)):
        return float("-inf")
    with np.errstate(divide="ignore"):
        terms = np.where(n > 0, n * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return float(terms.sum())


def mean_taxicab_distances(bits) -> np.ndarray:
    """Pairwise mean taxicab distances between the columns of a binary matrix."""
    x = np.asarray(bits, dtype=np.float64)
    n = max(x.shape[0], 1)
    mismatches = x.T @ (1.0 - x)
    return (mismatches + mismatches.T) / n


def identical_latent_bound(q: int, n: int, p_star: float) -> float:
    """Upper bound on the chance that two of q latent vectors coincide."""
    if q < 2:
        return 0.0
    log_bound = np.log(comb(q, 2, exact=False)) + n * np.log(p_star ** 2 + (1.0 - p_star) ** 2)
    return float(min(1.0, np.exp(log_bound)))


def _row_counts(counts: TransitionCounts, s: int) -> Tuple[int, int]:
    """(n_ss, n_s,1-s) for channel row s."""
    n = counts.as_matrix()
    return int(n[s, s]), int(n[s, 1 - s])


def _log_binomials(n_ss: int) -> np.ndarray:
    v = np.arange(n_ss + 1, dtype=np.float64)
    return gammaln(n_ss + 1.0) - gammaln(v + 1.0) - gammaln(n_ss - v + 1.0)


def log_qstar_weights(counts: TransitionCounts, s: int, r_s: float, alpha: float) -> np.ndarray:
    """Unnormalized log pmf of the auxiliary count U_s given r_s.

    Weight of v is C(n_ss, v) * rho^v * B(n_s + alpha/2 - v * e_s) with rho = r/(1-r).
    """
    n_ss, m = _row_counts(counts, s)
    v = np.arange(n_ss + 1, dtype=np.float64)
    half = alpha / 2.0
    if r_s >= 1.0:
        out = np.full(n_ss + 1, -np.inf)
        out[-1] = betaln(m + half, half)
        return out
    log_rho = np.log(r_s) - np.log1p(-r_s)
    return _log_binomials(n_ss) + v * log_rho + betaln(m + half, n_ss - v + half)


def log_concordance_weights(counts: TransitionCounts, s: int, model: ContaminationModel) -> np.ndarray:
    """Unnormalized log pmf of the auxiliary count V_s with r_s and q*_s integrated out.

    Weight of v is C(n_ss, v) * B(n_s + alpha/2 - v * e_s)
    * B(v + r_alpha, N_s - v + r_beta) * P(R > r*) under that beta.
    """
    n_ss, m = _row_counts(counts, s)
    total = n_ss + m
    v = np.arange(n_ss + 1, dtype=np.float64)
    half = model.alpha / 2.0
    a = v + model.r_alpha
    b = total - v + model.r_beta
    return (
        _log_binomials(n_ss)
        + betaln(m + half, n_ss - v + half)
        + betaln(a, b)
        + stats.beta.logsf(model.r_floor, a, b)
    )


def log_evidence_given_r(counts: TransitionCounts, r: Tuple[float, float], alpha: float) -> float:
    """log [X | r] with Q* integrated out under independent Dirichlet(alpha/2, alpha/2) rows."""
    total = 0.0
    half = alpha / 2.0
    for s in (0, 1):
        n_ss, m = _row_counts(counts, s)
        r_s = float(r[s])
        if r_s >= 1.0:
            if m > 0:
                return float("-inf")
            continue
        v = np.arange(n_ss + 1, dtype=np.float64)
        terms = (
            _log_binomials(n_ss)
            + v * np.log(r_s)
            + (n_ss + m - v) * np.log1p(-r_s)
            + betaln(m + half, n_ss - v + half)
        )
        total += float(np.logaddexp.reduce(terms)) - betaln(half, half)
    return total


def log_contamination_evidence(counts: TransitionCounts, model: ContaminationModel) -> float:
    """log [X] with both r (truncated beta) and Q* (Dirichlet) integrated out."""
    half = model.alpha / 2.0
    norm = (
        betaln(half, half)
        + betaln(model.r_alpha, model.r_beta)
        + stats.beta.logsf(model.r_floor, model.r_alpha, model.r_beta)
    )
    total = 0.0
    for s in (0, 1):
        total += float(np.logaddexp.reduce(log_concordance_weights(counts, s, model))) - norm
    return total
