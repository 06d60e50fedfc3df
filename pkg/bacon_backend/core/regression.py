"""Stage 2: spike-and-slab selection over cluster representatives with a g-prior."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from core.model import mean_taxicab_distances
from core.sampling_utils import sample_log_weights
from shared.errors import ConfigError, DataError, NumericError
from shared.models import (
    AllocationState,
    ChainSettings,
    LatentMatrix,
    RegressionSample,
    RepresentativeMode,
    ResponseData,
)
from shared.random_streams import substream

logger = logging.getLogger(__name__)

LATENT_REP = -1


class RegressionPrior(BaseModel):
    """g-prior scale and inverse-gamma noise prior."""

    sigma_beta2: float = Field(default=100.0, gt=0, description="g-prior scale sigma_beta^2")
    a0: float = Field(default=0.01, gt=0, description="Inverse-gamma shape for sigma^2")
    b0: float = Field(default=0.01, gt=0, description="Inverse-gamma scale for sigma^2")


class PredictionSummary(BaseModel):
    mean: List[float]
    lower: List[float]
    upper: List[float]


def _augmented(design: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    included = design[:, np.asarray(gamma, dtype=bool)]
    return np.column_stack([np.ones(design.shape[0]), included])


def _projection_fit(a: np.ndarray, y: np.ndarray) -> Optional[Tuple[np.ndarray, float]]:
    """OLS coefficients and y'Hy, or None when A'A is singular."""
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    if rank < a.shape[1]:
        return None
    fitted = a @ coef
    return coef, float(y @ fitted)


def marginal_log_likelihood(
    gamma,
    design: np.ndarray,
    y,
    prior: RegressionPrior,
    sigma2: Optional[float] = None,
) -> float:
    """log p(y | gamma, representatives) with beta (and sigma^2 unless fixed) integrated out.

    The prior on (beta_0, beta_gamma) is N(0, g sigma^2 (A'A)^-1) with A = [1, U_gamma]
    and g = sigma_beta2. Returns -inf for singular designs or q1 >= n - 1.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    a = _augmented(np.asarray(design, dtype=np.float64), gamma)
    k = a.shape[1]
    if k - 1 >= n - 1:
        return float("-inf")
    fit = _projection_fit(a, y)
    if fit is None:
        return float("-inf")
    _, yhy = fit
    g = prior.sigma_beta2
    resid = float(y @ y) - g / (1.0 + g) * yhy
    base = -0.5 * k * np.log1p(g)
    if sigma2 is not None:
        return float(base - 0.5 * n * np.log(2.0 * np.pi * sigma2) - resid / (2.0 * sigma2))
    shape = prior.a0 + 0.5 * n
    return float(
        base
        - 0.5 * n * np.log(2.0 * np.pi)
        + prior.a0 * np.log(prior.b0)
        - gammaln(prior.a0)
        + gammaln(shape)
        - shape * np.log(prior.b0 + 0.5 * resid)
    )


def sample_beta_sigma(
    gamma,
    design: np.ndarray,
    y,
    prior: RegressionPrior,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, float]:
    """Draw sigma^2 from its inverse-gamma conditional, then (beta_0, beta_gamma).

    Returns the full coefficient vector (intercept first, zeros for excluded clusters).
    """
    y = np.asarray(y, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=bool)
    a = _augmented(design, gamma)
    fit = _projection_fit(a, y)
    if fit is None:
        raise NumericError("included representatives are collinear; resample gamma first")
    coef, yhy = fit
    g = prior.sigma_beta2
    shrink = g / (1.0 + g)
    resid = float(y @ y) - shrink * yhy
    shape = prior.a0 + 0.5 * y.size
    rate = prior.b0 + 0.5 * max(resid, 0.0)
    sigma2 = float(rate / rng.gamma(shape))
    chol = np.linalg.cholesky(a.T @ a)
    noise = solve_triangular(chol.T, rng.standard_normal(a.shape[1]), lower=False)
    draw = shrink * coef + np.sqrt(sigma2 * shrink) * noise
    beta = np.zeros(gamma.size + 1)
    beta[0] = draw[0]
    beta[1:][gamma] = draw[1:]
    return beta, sigma2


def posterior_beta_mean(gamma, design: np.ndarray, y, prior: RegressionPrior) -> np.ndarray:
    """Posterior mean of (beta_0, beta_gamma): the OLS fit shrunk by g / (1 + g)."""
    a = _augmented(np.asarray(design, dtype=np.float64), gamma)
    fit = _projection_fit(a, np.asarray(y, dtype=np.float64))
    if fit is None:
        raise NumericError("design is singular")
    g = prior.sigma_beta2
    return g / (1.0 + g) * fit[0]


def median_member(bits: np.ndarray, members: np.ndarray) -> int:
    """Member column with the smallest summed taxicab distance to the others (lowest index on ties)."""
    members = np.sort(np.asarray(members))
    if members.size == 1:
        return int(members[0])
    dist = mean_taxicab_distances(np.asarray(bits)[:, members])
    return int(members[int(np.argmin(dist.sum(axis=1)))])


@dataclass
class RegressionChainState:
    gamma: np.ndarray
    reps: np.ndarray
    omega1: float
    beta: np.ndarray
    sigma2: float
    rng: np.random.Generator
    sweep_index: int = 0

    @property
    def q1(self) -> int:
        return int(self.gamma.sum())

    def sample(self) -> RegressionSample:
        return RegressionSample(
            gamma=self.gamma.astype(int).tolist(),
            reps=self.reps.astype(int).tolist(),
            beta=self.beta.tolist(),
            sigma2=self.sigma2,
            omega1=float(np.clip(self.omega1, 1e-12, 1 - 1e-12)),
            sweep=self.sweep_index,
        )


@dataclass
class RegressionProblem:
    """Training responses plus everything needed to build representative designs."""
    y: np.ndarray
    x_train: np.ndarray
    members: List[np.ndarray]
    latent_train: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def q(self) -> int:
        return len(self.members)

    def design(self, reps: np.ndarray) -> np.ndarray:
        cols = np.empty((self.n, self.q))
        for k, rep in enumerate(reps):
            cols[:, k] = self.latent_train[:, k] if rep == LATENT_REP else self.x_train[:, rep]
        return cols


def select_representative(
    k: int,
    mode: RepresentativeMode,
    state: RegressionChainState,
    problem: RegressionProblem,
    prior: RegressionPrior,
    design: Optional[np.ndarray] = None,
) -> int:
    """Choose the representative of cluster k and store it in ``state.reps``."""
    members = problem.members[k]
    if members.size == 0:
        raise DataError(f"cluster {k} has no members")
    if mode == RepresentativeMode.LATENT_VECTOR:
        choice = LATENT_REP
    elif mode == RepresentativeMode.MEDIAN_MEMBER:
        choice = median_member(problem.x_train, members)
    elif members.size == 1:
        choice = int(members[0])
    elif not state.gamma[k]:
        choice = int(members[state.rng.integers(members.size)])
    else:
        design = problem.design(state.reps) if design is None else design.copy()
        log_w = np.empty(members.size)
        for idx, j in enumerate(members):
            design[:, k] = problem.x_train[:, j]
            log_w[idx] = marginal_log_likelihood(state.gamma, design, problem.y, prior)
        if np.isfinite(log_w).any():
            choice = int(members[sample_log_weights(log_w, state.rng)])
        else:
            choice = int(state.reps[k])
    state.reps[k] = choice
    return choice


def update_gamma(
    state: RegressionChainState,
    problem: RegressionProblem,
    prior: RegressionPrior,
    design: Optional[np.ndarray] = None,
) -> None:
    """One-at-a-time Gibbs for inclusion indicators, then omega_1 from its beta conditional."""
    design = problem.design(state.reps) if design is None else design
    n = problem.n
    log_prior_odds = np.log(state.omega1) - np.log1p(-state.omega1)
    for k in range(problem.q):
        gamma = state.gamma.copy()
        gamma[k] = 0
        if gamma.sum() + 1 >= n - 1:
            state.gamma[k] = 0
            continue
        ev0 = marginal_log_likelihood(gamma, design, problem.y, prior)
        gamma[k] = 1
        ev1 = marginal_log_likelihood(gamma, design, problem.y, prior)
        if not np.isfinite(ev1):
            state.gamma[k] = 0
        elif not np.isfinite(ev0):
            state.gamma[k] = 1
        else:
            state.gamma[k] = int(state.rng.random() < expit(ev1 - ev0 + log_prior_odds))
    q1 = state.q1
    state.omega1 = float(state.rng.beta(1.0 + q1, 1.0 + problem.q - q1))


def update_beta_sigma(state: RegressionChainState, problem: RegressionProblem, prior: RegressionPrior) -> None:
    state.beta, state.sigma2 = sample_beta_sigma(
        state.gamma, problem.design(state.reps), problem.y, prior, state.rng
    )


@dataclass
class Stage2Result:
    samples: List[RegressionSample]
    inclusion: np.ndarray
    rep_counts: Dict[int, int]
    trace: List[Dict]
    kept: int


def build_problem(
    bits: np.ndarray,
    data: ResponseData,
    alloc: AllocationState,
    configuration: Optional[LatentMatrix] = None,
) -> RegressionProblem:
    x = np.asarray(bits, dtype=np.float64)
    train = np.asarray(data.train_idx, dtype=np.int64)
    if alloc.p != x.shape[1]:
        raise DataError(f"allocation covers {alloc.p} covariates but X has {x.shape[1]}")
    if train.size and train.max() >= x.shape[0]:
        raise DataError("training index beyond the design matrix")
    labels = alloc.as_array()
    members = [np.flatnonzero(labels == k) for k in range(alloc.q)]
    latent_train = None
    if configuration is not None:
        v = configuration.v.astype(np.float64)
        latent_train = v[train] if v.shape[0] == x.shape[0] else v
        if latent_train.shape != (train.size, alloc.q):
            raise DataError(f"latent configuration shape {v.shape} does not fit the training split")
    return RegressionProblem(
        y=np.asarray(data.y_train, dtype=np.float64),
        x_train=x[train],
        members=members,
        latent_train=latent_train,
    )


def run_stage2(
    bits: np.ndarray,
    data: ResponseData,
    alloc: AllocationState,
    mode: RepresentativeMode,
    chain: ChainSettings,
    prior: RegressionPrior,
    configuration: Optional[LatentMatrix] = None,
    progress: Optional[Callable[[int], None]] = None,
) -> Stage2Result:
    """Spike-and-slab chain over clusters: reps, gamma, omega_1, then (beta, sigma^2) each sweep."""
    if chain.kept == 0:
        raise ConfigError("stage 2 needs at least one post-burn-in sweep")
    mode = RepresentativeMode(mode)
    if mode == RepresentativeMode.LATENT_VECTOR and configuration is None:
        raise ConfigError("representative mode c needs the least-squares configuration")
    problem = build_problem(bits, data, alloc, configuration if mode == RepresentativeMode.LATENT_VECTOR else None)
    rng = substream(chain.seed, "stage2", chain.chain)
    q = problem.q
    reps = np.array(
        [LATENT_REP if mode == RepresentativeMode.LATENT_VECTOR else median_member(problem.x_train, m)
         for m in problem.members],
        dtype=np.int64,
    )
    state = RegressionChainState(
        gamma=np.zeros(q, dtype=np.int64), reps=reps, omega1=0.5,
        beta=np.zeros(q + 1), sigma2=float(np.var(problem.y)) or 1.0, rng=rng,
    )

    inclusion = np.zeros(q)
    rep_counts: Dict[int, int] = {}
    samples, trace = [], []
    total = chain.burn_in + chain.kept
    for t in range(total):
        if mode == RepresentativeMode.RANDOM_MEMBER:
            design = problem.design(state.reps)
            for k in range(q):
                select_representative(k, mode, state, problem, prior, design=design)
                design[:, k] = problem.x_train[:, state.reps[k]]
        update_gamma(state, problem, prior)
        update_beta_sigma(state, problem, prior)
        state.sweep_index += 1
        trace.append({"sweep": state.sweep_index, "q1": state.q1, "omega1": state.omega1, "sigma2": state.sigma2})
        if t >= chain.burn_in:
            inclusion += state.gamma
            for rep in state.reps:
                rep_counts[int(rep)] = rep_counts.get(int(rep), 0) + 1
            if (t - chain.burn_in) % chain.thin == 0:
                samples.append(state.sample())
        if (t + 1) % chain.log_every == 0:
            logger.info("stage2 sweep %d/%d: q1=%d omega1=%.3f sigma2=%.4f", t + 1, total, state.q1, state.omega1, state.sigma2)
        if progress is not None:
            progress(t + 1)
    return Stage2Result(
        samples=samples,
        inclusion=inclusion / chain.kept,
        rep_counts=rep_counts,
        trace=trace,
        kept=chain.kept,
    )


def nearest_member_latent(bits: np.ndarray, rows: np.ndarray, train_rows: np.ndarray,
                          alloc: AllocationState, latent_train: np.ndarray) -> np.ndarray:
    """Test-row latent values taken from the member column closest to each latent vector on training rows."""
    x = np.asarray(bits, dtype=np.float64)
    labels = alloc.as_array()
    out = np.empty((rows.size, alloc.q))
    for k in range(alloc.q):
        members = np.flatnonzero(labels == k)
        dist = np.abs(x[np.ix_(train_rows, members)] - latent_train[:, [k]]).mean(axis=0)
        out[:, k] = x[rows, members[int(np.argmin(dist))]]
    return out


def predict(
    samples: Sequence[RegressionSample],
    x_test: np.ndarray,
    rng: np.random.Generator,
    latent_test: Optional[np.ndarray] = None,
    level: float = 0.95,
) -> PredictionSummary:
    """Posterior predictive mean and central interval for each test row."""
    if not samples:
        raise DataError("prediction needs at least one stage 2 sample")
    x_test = np.asarray(x_test, dtype=np.float64)
    means = np.empty((len(samples), x_test.shape[0]))
    for s, sample in enumerate(samples):
        beta = np.asarray(sample.beta)
        eta = np.full(x_test.shape[0], beta[0])
        for k, (g, rep) in enumerate(zip(sample.gamma, sample.reps)):
            if not g:
                continue
            if rep == LATENT_REP:
                if latent_test is None:
                    raise DataError("latent-vector representatives need test latent values")
                eta += beta[k + 1] * latent_test[:, k]
            else:
                eta += beta[k + 1] * x_test[:, rep]
        means[s] = eta
    sigma = np.sqrt([sample.sigma2 for sample in samples])[:, None]
    draws = means + sigma * rng.standard_normal(means.shape)
    tail = 100.0 * (1.0 - level) / 2.0
    return PredictionSummary(
        mean=means.mean(axis=0).tolist(),
        lower=np.percentile(draws, tail, axis=0).tolist(),
        upper=np.percentile(draws, 100.0 - tail, axis=0).tolist(),
    )


def representative_probabilities(
    samples: Sequence[RegressionSample],
    alloc: AllocationState,
    column_ids: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """Per-member representative probability with the cluster's inclusion probability."""
    if not samples:
        raise DataError("no stage 2 samples")
    labels = alloc.as_array()
    gammas = np.array([s.gamma for s in samples], dtype=np.float64)
    reps = np.array([s.reps for s in samples], dtype=np.int64)
    inclusion = gammas.mean(axis=0)
    rows = []
    for k in range(alloc.q):
        members = np.flatnonzero(labels == k)
        if np.all(reps[:, k] == LATENT_REP):
            rows.append({"cluster": k, "inclusion_prob": inclusion[k], "column": LATENT_REP,
                         "column_id": "latent", "rep_prob": 1.0, "size": members.size})
            continue
        for j in members:
            rows.append({
                "cluster": k,
                "inclusion_prob": inclusion[k],
                "column": int(j),
                "column_id": column_ids[j] if column_ids is not None else str(j),
                "rep_prob": float(np.mean(reps[:, k] == j)),
                "size": members.size,
            })
    frame = pd.DataFrame(rows)
    return frame.sort_values(["inclusion_prob", "cluster", "rep_prob", "column"],
                             ascending=[False, True, False, True]).reset_index(drop=True)
