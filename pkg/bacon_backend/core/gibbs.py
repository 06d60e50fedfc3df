"""Gibbs sampler for covariate clustering (Stage 1) and latent refinement (Stage 1b).

The chain state is mutable and owned by a single chain. Every ``update_*``
function mutates the state in place and draws only from ``state.rng``.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.special import expit, logsumexp

from core.model import (
    derive_q,
    log_concordance_weights,
    log_eppf_from_sizes,
    log_qstar_weights,
    mean_taxicab_distances,
)
from core.sampling_utils import safe_log, sample_log_weights, sample_truncated_beta, unit_gauss_legendre
from shared.errors import ConfigError, DataError, NumericError
from shared.models import (
    AllocationState,
    BinaryDesignMatrix,
    ChainSettings,
    CoClusterMatrix,
    ContaminationModel,
    LatentMatrix,
    PdpHyper,
    ScanOrder,
    SweepSchedule,
    TransitionCounts,
)
from shared.random_streams import substream

logger = logging.getLogger(__name__)

QUADRATURE_POINTS = 51


@dataclass
class ChainData:
    """Read-only views of X used inside the sweeps."""
    x: np.ndarray
    xt: np.ndarray
    ones: np.ndarray

    @classmethod
    def from_bits(cls, bits) -> "ChainData":
        if isinstance(bits, BinaryDesignMatrix):
            bits = bits.bits
        x = np.asarray(bits, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"expected an n x p matrix, got shape {x.shape}")
        return cls(x=x, xt=np.ascontiguousarray(x.T), ones=x.sum(axis=0))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])


@dataclass
class ClusteringChainState:
    """Composite Stage-1 state.

    ``sizes`` and ``v`` have capacity p; only the first ``q`` entries/columns
    are live. ``contam_prior`` and ``hyper`` carry the prior settings, while
    the current values of r, Q*, M and d live on the state itself.
    """
    labels: np.ndarray
    sizes: np.ndarray
    v: np.ndarray
    v_colsum: np.ndarray
    q: int
    p_star: float
    r: np.ndarray
    q_star: np.ndarray
    mass: float
    discount: float
    hyper: PdpHyper
    contam_prior: ContaminationModel
    lam: float
    rng: np.random.Generator
    sweep_index: int = 0
    d_log_odds: float = float("nan")
    mass_step: float = 0.5
    mass_accepted: int = 0

    def q_matrix(self) -> np.ndarray:
        return self.r[:, None] * np.eye(2) + (1.0 - self.r)[:, None] * self.q_star

    def allocation(self) -> AllocationState:
        return AllocationState(labels=tuple(int(c) for c in self.labels))

    def latent(self) -> LatentMatrix:
        return LatentMatrix(v=self.v[:, : self.q], p_star=self.p_star, lam=self.lam)

    def contamination(self) -> ContaminationModel:
        return self.contam_prior.model_copy(
            update={
                "r": (float(self.r[0]), float(self.r[1])),
                "q_star": (tuple(float(z) for z in self.q_star[0]), tuple(float(z) for z in self.q_star[1])),
            }
        )

    def pdp(self) -> PdpHyper:
        return self.hyper.model_copy(update={"mass": self.mass, "discount": self.discount})

    def check_invariants(self, data: ChainData) -> None:
        q = self.q
        if not 1 <= q <= data.p:
            raise NumericError(f"cluster count {q} outside 1..{data.p}")
        counts = np.bincount(self.labels, minlength=q)
        if counts.size != q or not np.array_equal(counts, self.sizes[:q]):
            raise NumericError("cluster sizes disagree with labels")
        if np.any(self.sizes[:q] == 0) or np.any(self.sizes[q:] != 0):
            raise NumericError("empty cluster inside the live range")
        if not np.allclose(self.v[:, :q].sum(axis=0), self.v_colsum[:q]):
            raise NumericError("latent column sums are stale")
        if not 0.0 < self.p_star < 1.0:
            raise NumericError(f"p_star={self.p_star} outside (0, 1)")
        if np.any(self.r < self.contam_prior.r_floor) or np.any(self.r > 1.0):
            raise NumericError(f"r={self.r} outside the truncation region")
        if not np.allclose(self.q_star.sum(axis=1), 1.0):
            raise NumericError("Q* rows must sum to one")


def cluster_one_counts(x: np.ndarray, labels: np.ndarray, q: int) -> np.ndarray:
    """W: per subject and cluster, the number of member columns equal to one."""
    order = np.argsort(labels, kind="stable")
    starts = np.searchsorted(labels[order], np.arange(q))
    return np.add.reduceat(x[:, order], starts, axis=1)


def majority_latent(x: np.ndarray, labels: np.ndarray, q: int) -> np.ndarray:
    sizes = np.bincount(labels, minlength=q)
    w = cluster_one_counts(x, labels, q)
    return (2.0 * w >= sizes[None, :]).astype(np.float64)


def single_linkage_labels(x: np.ndarray, threshold: float) -> np.ndarray:
    p = x.shape[1]
    if p == 1:
        return np.zeros(1, dtype=np.int64)
    dist = mean_taxicab_distances(x)
    np.fill_diagonal(dist, 0.0)
    tree = linkage(squareform(dist, checks=False), method="single")
    raw = fcluster(tree, t=threshold, criterion="distance")
    return AllocationState.from_labels(raw).as_array()


def initialize_chain(
    data: ChainData,
    hyper: PdpHyper,
    contam: ContaminationModel,
    lam: float,
    rng: np.random.Generator,
    threshold: float = 0.3,
    labels: Optional[np.ndarray] = None,
) -> ClusteringChainState:
    """Ad hoc starting point: single linkage on taxicab distance, majority-vote latents."""
    if labels is None:
        labels = single_linkage_labels(data.x, threshold)
    labels = np.asarray(labels, dtype=np.int64).copy()
    n, p = data.n, data.p
    q = int(labels.max()) + 1
    sizes = np.zeros(p, dtype=np.int64)
    sizes[:q] = np.bincount(labels, minlength=q)
    v = np.zeros((n, p), dtype=np.float64)
    v[:, :q] = majority_latent(data.x, labels, q)
    v_colsum = np.zeros(p, dtype=np.float64)
    v_colsum[:q] = v[:, :q].sum(axis=0)
    p_star = float(np.clip(data.x.mean(), 0.01, 0.99))
    logger.debug("Initial allocation has %d clusters for %d covariates", q, p)
    return ClusteringChainState(
        labels=labels,
        sizes=sizes,
        v=v,
        v_colsum=v_colsum,
        q=q,
        p_star=p_star,
        r=np.array(contam.r, dtype=np.float64),
        q_star=np.array(contam.q_star, dtype=np.float64),
        mass=hyper.mass,
        discount=hyper.discount,
        hyper=hyper,
        contam_prior=contam,
        lam=lam,
        rng=rng,
    )


def allocation_log_weights(
    x_col: np.ndarray,
    ones_j: float,
    v_block: np.ndarray,
    v_colsum: np.ndarray,
    sizes: np.ndarray,
    mass: float,
    discount: float,
    q_matrix: np.ndarray,
    p_star: float,
) -> np.ndarray:
    """Log weights of joining each existing cluster, then of opening a new one."""
    n = x_col.size
    q = sizes.size
    log_q = safe_log(q_matrix)
    n11 = x_col @ v_block
    n10 = v_colsum - n11
    n01 = ones_j - n11
    n00 = n - n11 - n10 - n01
    out = np.empty(q + 1)
    out[:q] = (
        np.log(sizes - discount)
        + n00 * log_q[0, 0] + n01 * log_q[0, 1]
        + n10 * log_q[1, 0] + n11 * log_q[1, 1]
    )
    marg_one = p_star * q_matrix[1, 1] + (1.0 - p_star) * q_matrix[0, 1]
    marg_zero = p_star * q_matrix[1, 0] + (1.0 - p_star) * q_matrix[0, 0]
    out[q] = np.log(mass + q * discount) + ones_j * safe_log(marg_one) + (n - ones_j) * safe_log(marg_zero)
    return out


def _drop_cluster(state: ClusteringChainState, c: int) -> None:
    last = state.q - 1
    if c != last:
        state.v[:, c] = state.v[:, last]
        state.v_colsum[c] = state.v_colsum[last]
        state.sizes[c] = state.sizes[last]
        state.labels[state.labels == last] = c
    state.v[:, last] = 0.0
    state.v_colsum[last] = 0.0
    state.sizes[last] = 0
    state.q = last


def update_allocation(j: int, state: ClusteringChainState, data: ChainData) -> None:
    c = state.labels[j]
    state.sizes[c] -= 1
    if state.sizes[c] == 0:
        _drop_cluster(state, c)
    q = state.q
    q_matrix = state.q_matrix()
    x_col = data.xt[j]
    log_w = allocation_log_weights(
        x_col, data.ones[j], state.v[:, :q], state.v_colsum[:q], state.sizes[:q],
        state.mass, state.discount, q_matrix, state.p_star,
    )
    k = sample_log_weights(log_w, state.rng)
    if k == q:
        col = x_col.astype(np.int64)
        log_odds = (
            np.log(state.p_star) - np.log1p(-state.p_star)
            + safe_log(q_matrix[1, col]) - safe_log(q_matrix[0, col])
        )
        fresh = (state.rng.random(data.n) < expit(log_odds)).astype(np.float64)
        state.v[:, q] = fresh
        state.v_colsum[q] = fresh.sum()
        state.q = q + 1
    state.labels[j] = k
    state.sizes[k] += 1


def update_latent(state: ClusteringChainState, data: ChainData) -> None:
    q = state.q
    log_q = safe_log(state.q_matrix())
    w = cluster_one_counts(data.x, state.labels, q)
    n_k = state.sizes[:q][None, :]
    log_odds = (
        np.log(state.p_star) - np.log1p(-state.p_star)
        + w * (log_q[1, 1] - log_q[0, 1])
        + (n_k - w) * (log_q[1, 0] - log_q[0, 0])
    )
    fresh = (state.rng.random((data.n, q)) < expit(log_odds)).astype(np.float64)
    state.v[:, :q] = fresh
    state.v_colsum[:q] = fresh.sum(axis=0)


def update_p_star(state: ClusteringChainState) -> None:
    ones = state.v_colsum[: state.q].sum()
    cells = state.v.shape[0] * state.q
    half = state.lam / 2.0
    draw = state.rng.beta(half + ones, half + cells - ones)
    state.p_star = float(np.clip(draw, 1e-12, 1.0 - 1e-12))


def global_transition_counts(state: ClusteringChainState, data: ChainData) -> TransitionCounts:
    """Transition table N summed over every (subject, covariate) cell."""
    q = state.q
    w = cluster_one_counts(data.x, state.labels, q)
    v = state.v[:, :q]
    n_k = state.sizes[:q][None, :]
    n11 = float((v * w).sum())
    n10 = float((v * (n_k - w)).sum())
    n01 = float(((1.0 - v) * w).sum())
    n00 = float(((1.0 - v) * (n_k - w)).sum())
    return TransitionCounts(n00=int(round(n00)), n01=int(round(n01)), n10=int(round(n10)), n11=int(round(n11)))


def update_concordance(state: ClusteringChainState, counts: TransitionCounts) -> None:
    prior = state.contam_prior
    table = counts.as_matrix()
    for s in (0, 1):
        n_ss, n_total = int(table[s, s]), int(table[s].sum())
        log_w = log_concordance_weights(counts, s, prior)
        if not np.isfinite(log_w).any():
            logger.warning("Concordance weights for row %d underflowed; using the most concordant atom", s)
            v_s = n_ss
        else:
            v_s = sample_log_weights(log_w, state.rng)
        state.r[s] = sample_truncated_beta(
            v_s + prior.r_alpha, n_total - v_s + prior.r_beta, prior.r_floor, state.rng
        )


def update_qstar(state: ClusteringChainState, counts: TransitionCounts) -> None:
    half = state.contam_prior.alpha / 2.0
    table = counts.as_matrix()
    for s in (0, 1):
        n_ss, n_off = int(table[s, s]), int(table[s, 1 - s])
        u_s = sample_log_weights(log_qstar_weights(counts, s, float(state.r[s]), state.contam_prior.alpha), state.rng)
        a_diag = n_ss - u_s + half
        a_off = n_off + half
        assert a_diag > 0 and a_off > 0
        diag = float(state.rng.beta(a_diag, a_off))
        state.q_star[s, s] = diag
        state.q_star[s, 1 - s] = 1.0 - diag


def discount_log_odds(sizes: np.ndarray, mass: float, zero_prob: float) -> float:
    """log P(d > 0 | partition, M) / P(d = 0 | partition, M) by Gauss-Legendre quadrature."""
    nodes, weights = unit_gauss_legendre(QUADRATURE_POINTS)
    values = log_eppf_from_sizes(sizes, mass, np.concatenate(([0.0], nodes)))
    return float(logsumexp(values[1:] - values[0], b=weights) + np.log1p(-zero_prob) - np.log(zero_prob))


def update_discount(state: ClusteringChainState) -> float:
    """Independence Metropolis-Hastings step for d with the prior as proposal.

    Returns (and records) the conditional log-odds of d > 0.
    """
    sizes = state.sizes[: state.q]
    zero_prob = state.hyper.discount_zero_prob
    state.d_log_odds = discount_log_odds(sizes, state.mass, zero_prob)
    proposal = 0.0 if state.rng.random() < zero_prob else float(state.rng.random())
    current, proposed = log_eppf_from_sizes(sizes, state.mass, [state.discount, proposal])
    if np.log(state.rng.random()) < proposed - current:
        state.discount = proposal
    return state.d_log_odds


def update_mass(state: ClusteringChainState) -> None:
    """Log-scale random-walk Metropolis step for M under its Gamma prior."""
    hyper = state.hyper
    if hyper.mass_fixed:
        return
    sizes = state.sizes[: state.q]
    proposal = state.mass * np.exp(state.mass_step * state.rng.standard_normal())
    current = log_eppf_from_sizes(sizes, state.mass, state.discount)[0]
    proposed = log_eppf_from_sizes(sizes, proposal, state.discount)[0]
    log_ratio = (
        proposed - current
        + hyper.mass_prior_shape * np.log(proposal / state.mass)
        - hyper.mass_prior_rate * (proposal - state.mass)
    )
    if np.log(state.rng.random()) < log_ratio:
        state.mass = float(proposal)
        state.mass_accepted += 1


def gibbs_sweep(state: ClusteringChainState, data: ChainData, schedule: SweepSchedule) -> None:
    """One sweep: c, V, p_*, (r, Q*), d, M in turn (shuffled under random scan)."""
    random_scan = schedule.order == ScanOrder.RANDOM

    def allocation_block():
        order = state.rng.permutation(data.p) if random_scan else range(data.p)
        for j in order:
            update_allocation(int(j), state, data)

    def contamination_block():
        counts = global_transition_counts(state, data)
        update_concordance(state, counts)
        update_qstar(state, counts)

    blocks = [
        (schedule.allocation, allocation_block),
        (schedule.latent, lambda: update_latent(state, data)),
        (schedule.p_star, lambda: update_p_star(state)),
        (schedule.contamination, contamination_block),
        (schedule.discount, lambda: update_discount(state)),
        (schedule.mass, lambda: update_mass(state)),
    ]
    if random_scan:
        blocks = [blocks[i] for i in state.rng.permutation(len(blocks))]
    for repeats, block in blocks:
        for _ in range(repeats):
            block()
    state.sweep_index += 1


def trace_record(state: ClusteringChainState) -> Dict[str, float]:
    q_matrix = state.q_matrix()
    return {
        "sweep": state.sweep_index,
        "q": state.q,
        "d": state.discount,
        "M": state.mass,
        "p_star": state.p_star,
        "r0": float(state.r[0]),
        "r1": float(state.r[1]),
        "q00": float(q_matrix[0, 0]),
        "q01": float(q_matrix[0, 1]),
        "q10": float(q_matrix[1, 0]),
        "q11": float(q_matrix[1, 1]),
        "d_positive": int(state.discount > 0.0),
        "d_log_odds": state.d_log_odds,
    }


def snapshot_record(state: ClusteringChainState) -> Dict:
    return {
        "sweep": state.sweep_index,
        "q": state.q,
        "d": state.discount,
        "p_star": state.p_star,
        "r": [float(state.r[0]), float(state.r[1])],
        "labels": state.labels.tolist(),
    }


@dataclass
class Stage1Result:
    cocluster: CoClusterMatrix
    samples: List[AllocationState]
    sample_sweeps: List[int]
    snapshots: List[Dict]
    trace: List[Dict]
    final_state: ClusteringChainState
    seconds_per_sweep: float


@dataclass
class Stage1bResult:
    means: np.ndarray
    samples: List[LatentMatrix]
    sample_sweeps: List[int]
    trace: List[Dict]
    final_state: ClusteringChainState = field(repr=False)


def _log_progress(stage: str, t: int, total: int, state: ClusteringChainState) -> None:
    logger.info(
        "%s sweep %d/%d: q=%d d=%.3f p*=%.3f r=(%.3f, %.3f)",
        stage, t, total, state.q, state.discount, state.p_star, state.r[0], state.r[1],
    )


def run_stage1(
    bits,
    schedule: SweepSchedule,
    chain: ChainSettings,
    hyper: PdpHyper,
    contam: ContaminationModel,
    lam: float = 1.0,
    init_threshold: float = 0.3,
    validate: bool = False,
    progress: Optional[Callable[[int], None]] = None,
) -> Stage1Result:
    """Cluster the covariates; accumulate co-clustering probabilities over kept sweeps."""
    if chain.kept == 0:
        raise ConfigError("stage 1 needs at least one post-burn-in sweep")
    data = ChainData.from_bits(bits)
    rng = substream(chain.seed, "stage1", chain.chain)
    state = initialize_chain(data, hyper, contam, lam, rng, threshold=init_threshold)
    total = chain.burn_in + chain.kept
    together = np.zeros((data.p, data.p), dtype=np.uint32)
    samples, sweeps, snapshots, trace = [], [], [], []

    started = time.perf_counter()
    for t in range(total):
        gibbs_sweep(state, data, schedule)
        if validate:
            state.check_invariants(data)
        record = trace_record(state)
        record["kept"] = int(t >= chain.burn_in)
        trace.append(record)
        if t >= chain.burn_in:
            labels = state.labels
            together += labels[:, None] == labels[None, :]
            if (t - chain.burn_in) % chain.thin == 0:
                samples.append(state.allocation())
                sweeps.append(state.sweep_index)
                snapshots.append(snapshot_record(state))
        if (t + 1) % chain.log_every == 0:
            _log_progress("stage1", t + 1, total, state)
        if progress is not None:
            progress(t + 1)
    elapsed = time.perf_counter() - started

    pihat = together.astype(np.float32) / np.float32(chain.kept)
    return Stage1Result(
        cocluster=CoClusterMatrix(pihat=pihat, n_sweeps=chain.kept),
        samples=samples,
        sample_sweeps=sweeps,
        snapshots=snapshots,
        trace=trace,
        final_state=state,
        seconds_per_sweep=elapsed / total,
    )


def pool_stage1_results(results: List[Stage1Result]) -> CoClusterMatrix:
    """Sweep-weighted average of the co-clustering estimates of several chains."""
    if not results:
        raise ConfigError("no stage 1 chains to pool")
    total = sum(res.cocluster.n_sweeps for res in results)
    pihat = sum(res.cocluster.pihat.astype(np.float64) * res.cocluster.n_sweeps for res in results) / total
    return CoClusterMatrix(pihat=pihat.astype(np.float32), n_sweeps=total)


def run_stage1b(
    bits,
    fixed_alloc: AllocationState,
    chain: ChainSettings,
    hyper: PdpHyper,
    contam: ContaminationModel,
    lam: float = 1.0,
    update_contamination: bool = True,
    p_star_start: Optional[float] = None,
    progress: Optional[Callable[[int], None]] = None,
) -> Stage1bResult:
    """Resample latent vectors, p_* and (optionally) Q under a frozen allocation.

    ``contam`` supplies the starting r and Q* (typically the end of stage 1).
    """
    if chain.kept == 0:
        raise ConfigError("stage 1b needs at least one post-burn-in sweep")
    data = ChainData.from_bits(bits)
    if fixed_alloc.p != data.p:
        raise DataError(f"allocation covers {fixed_alloc.p} covariates but X has {data.p}")
    rng = substream(chain.seed, "stage1b", chain.chain)
    state = initialize_chain(data, hyper, contam, lam, rng, labels=fixed_alloc.as_array())
    if p_star_start is not None:
        state.p_star = p_star_start
    schedule = SweepSchedule(allocation=0, discount=0, mass=0, contamination=int(update_contamination))
    q = state.q
    total = chain.burn_in + chain.kept
    means = np.zeros((data.n, q))
    samples, sweeps, trace = [], [], []
    for t in range(total):
        gibbs_sweep(state, data, schedule)
        trace.append(trace_record(state))
        if t >= chain.burn_in:
            means += state.v[:, :q]
            if (t - chain.burn_in) % chain.thin == 0:
                samples.append(state.latent())
                sweeps.append(state.sweep_index)
        if (t + 1) % chain.log_every == 0:
            _log_progress("stage1b", t + 1, total, state)
        if progress is not None:
            progress(t + 1)
    return Stage1bResult(
        means=means / chain.kept,
        samples=samples,
        sample_sweeps=sweeps,
        trace=trace,
        final_state=state,
    )
