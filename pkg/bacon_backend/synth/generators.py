"""Seeded generators for the three simulation protocols.

Every generator is a pure function of its parameters and seed. Columns that
come out constant are dropped, as ingestion would drop them, and the truth
record is restricted to the retained columns.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.model import mean_taxicab_distances, sample_pdp_partition
from data.ingest import export_matrix, write_responses
from shared.errors import ConfigError, DataError
from shared.models import AllocationState, BinaryDesignMatrix, ResponseData, TruthRecord
from shared.artifacts import write_json
from shared.random_streams import substream

logger = logging.getLogger(__name__)

MAX_BLOCK_DRAWS = 1_000_000


def _restrict_truth(labels: np.ndarray, kept: np.ndarray) -> Tuple[List[int], np.ndarray]:
    """Relabel the retained columns contiguously; also return the surviving old cluster ids in new order."""
    kept_labels = labels[kept]
    alloc = AllocationState.from_labels(kept_labels)
    new = alloc.as_array()
    old_for_new = np.empty(alloc.q, dtype=np.int64)
    old_for_new[new] = kept_labels
    return list(alloc.labels), old_for_new


def gen_bacon(
    n: int = 100,
    p: int = 250,
    d0: float = 0.4,
    m0: float = 20.0,
    p0: float = 5.0 / 7.0,
    r0: float = 0.925,
    seed: int = 0,
) -> Tuple[BinaryDesignMatrix, TruthRecord]:
    """Data from the clustering model itself: PDP allocation, Bernoulli latents, contaminated copies."""
    if not (0 <= d0 < 1 and m0 > 0 and 0 < p0 < 1 and 0.5 < r0 <= 1):
        raise ConfigError(f"invalid generator parameters d0={d0} M0={m0} p0={p0} r0={r0}")
    rng = substream(seed, "synth", purpose="bacon")
    labels = sample_pdp_partition(p, m0, d0, rng).as_array()
    q0 = int(labels.max()) + 1
    latent = (rng.random((n, q0)) < p0).astype(np.int64)
    q_star = rng.dirichlet([1.0, 1.0], size=2)
    q_matrix = r0 * np.eye(2) + (1.0 - r0) * q_star
    hidden = latent[:, labels]
    bits = (rng.random((n, p)) < q_matrix[hidden, 1]).astype(np.uint8)

    matrix, kept = BinaryDesignMatrix.from_bits(bits)
    truth_labels, clusters = _restrict_truth(labels, kept)
    dropped = np.setdiff1d(np.arange(p), kept)
    if dropped.size:
        logger.info("gen_bacon dropped %d constant columns", dropped.size)
    truth = TruthRecord(
        generator="bacon",
        seed=seed,
        params={"n": n, "p": p, "d0": d0, "M0": m0, "p0": p0, "r0": r0},
        labels=truth_labels,
        q0=int(clusters.size),
        latent=latent[:, clusters].tolist(),
        q_matrix=q_matrix.tolist(),
        r0=r0,
        dropped_columns=dropped.tolist(),
    )
    return matrix, truth


def log_stirling_table(p: int, k: int) -> np.ndarray:
    """log S(m, j) for 0 <= m <= p, 0 <= j <= k (Stirling numbers of the second kind)."""
    table = np.full((p + 1, k + 1), -np.inf)
    table[0, 0] = 0.0
    j = np.arange(1, k + 1, dtype=np.float64)
    for m in range(1, p + 1):
        table[m, 1:] = np.logaddexp(np.log(j) + table[m - 1, 1:], table[m - 1, :-1])
    return table


def uniform_partition_fixed_blocks(p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Labels drawn uniformly from all partitions of p items into exactly k blocks."""
    if not 1 <= k <= p:
        raise ConfigError(f"cannot split {p} items into {k} blocks")
    table = log_stirling_table(p, k)
    opens_block = np.zeros(p + 1, dtype=bool)
    blocks = k
    # Walk down from item p: it is either a singleton or joins one of `blocks` blocks of the rest.
    for m in range(p, 0, -1):
        log_single = table[m - 1, blocks - 1] - table[m, blocks]
        if rng.random() < np.exp(log_single):
            opens_block[m] = True
            blocks -= 1
    labels = np.empty(p, dtype=np.int64)
    current = 0
    for m in range(1, p + 1):
        if opens_block[m]:
            labels[m - 1] = current
            current += 1
        else:
            labels[m - 1] = rng.integers(current)
    return AllocationState.from_labels(labels).as_array()


def gen_threshold_normal(
    n: int = 100,
    p: int = 250,
    phi0: float = 0.95,
    seed: int = 0,
) -> Tuple[BinaryDesignMatrix, TruthRecord]:
    """Thresholded one-factor Gaussians: within-cluster correlation phi0, independent across clusters."""
    if not 0 < phi0 < 1:
        raise ConfigError(f"phi0={phi0} must lie in (0, 1)")
    cap = p // 4
    if cap <= 1:
        raise ConfigError(f"p={p} is too small for the block-count truncation")
    rng = substream(seed, "synth", purpose="threshold")
    for _ in range(MAX_BLOCK_DRAWS):
        q0 = int(rng.poisson(p / 8.0))
        if 1 <= q0 < cap:
            break
    else:
        raise DataError(f"no admissible block count below {cap} after {MAX_BLOCK_DRAWS} draws")
    labels = uniform_partition_fixed_blocks(p, q0, rng)
    factors = rng.standard_normal((n, q0))
    noise = rng.standard_normal((n, p))
    z = np.sqrt(phi0) * factors[:, labels] + np.sqrt(1.0 - phi0) * noise
    bits = (z > 0).astype(np.uint8)

    matrix, kept = BinaryDesignMatrix.from_bits(bits)
    truth_labels, clusters = _restrict_truth(labels, kept)
    truth = TruthRecord(
        generator="threshold_normal",
        seed=seed,
        params={"n": n, "p": p, "phi0": phi0},
        labels=truth_labels,
        q0=int(clusters.size),
        phi0=phi0,
        dropped_columns=np.setdiff1d(np.arange(p), kept).tolist(),
    )
    return matrix, truth


def select_window_columns(
    dist: np.ndarray,
    size: int,
    window: Tuple[float, float],
    rng: np.random.Generator,
    max_attempts: int = 1000,
) -> List[int]:
    """Random greedy search for columns whose pairwise distances all fall inside the window."""
    lo, hi = window
    p = dist.shape[0]
    for _ in range(max_attempts):
        chosen: List[int] = []
        for j in rng.permutation(p):
            if all(lo < dist[j, c] < hi for c in chosen):
                chosen.append(int(j))
                if len(chosen) == size:
                    return sorted(chosen)
    raise DataError(f"could not find {size} columns with pairwise taxicab distances in {window}")


def split_indices(n: int, rng: np.random.Generator, train_fraction: float = 0.8) -> Tuple[List[int], List[int]]:
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def gen_response(
    matrix: BinaryDesignMatrix,
    size_s: int = 10,
    beta_star: float = 1.2,
    sigma0: float = 0.5,
    window: Tuple[float, float] = (0.4, 0.6),
    seed: int = 0,
    train_fraction: float = 0.8,
    predictors: Optional[Sequence[int]] = None,
) -> Tuple[ResponseData, TruthRecord]:
    """Gaussian responses driven by a handful of mutually distant covariates."""
    if size_s < 1 or size_s > matrix.p:
        raise ConfigError(f"predictor count {size_s} outside 1..{matrix.p}")
    rng = substream(seed, "synth", purpose="response")
    if predictors is None:
        predictors = select_window_columns(mean_taxicab_distances(matrix.bits), size_s, window, rng)
    predictors = sorted(int(j) for j in predictors)
    x = matrix.as_float()
    y = beta_star / 2.0 + beta_star * x[:, predictors].sum(axis=1) + sigma0 * rng.standard_normal(matrix.n)
    train, test = split_indices(matrix.n, rng, train_fraction)
    data = ResponseData(
        y_train=y[train].tolist(),
        train_idx=train,
        test_idx=test,
        y_test=y[test].tolist(),
    )
    truth = TruthRecord(
        generator="response",
        seed=seed,
        params={"size_s": size_s, "window": list(window), "train_fraction": train_fraction},
        predictors=predictors,
        beta_star=beta_star,
        sigma0=sigma0,
    )
    return data, truth


PROTOCOLS = ("bacon", "threshold", "response")


def generate_dataset(protocol: str, params: Dict[str, Any], seed: int, out_dir: Path) -> Dict[str, Path]:
    """Write design.csv, truth.json and (for the response protocol) responses.csv into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = dict(params)
    response_keys = {"size_s", "beta_star", "sigma0", "window", "train_fraction"}
    response_params = {k: params.pop(k) for k in list(params) if k in response_keys}
    if "window" in response_params:
        response_params["window"] = tuple(response_params["window"])

    if protocol in ("bacon", "response"):
        matrix, truth = gen_bacon(seed=seed, **params)
    elif protocol == "threshold":
        matrix, truth = gen_threshold_normal(seed=seed, **params)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")

    paths = {"design": out_dir / "design.csv", "truth": out_dir / "truth.json"}
    export_matrix(matrix, paths["design"])
    if protocol == "response":
        data, response_truth = gen_response(matrix, seed=seed, **response_params)
        truth = truth.model_copy(update={
            "predictors": response_truth.predictors,
            "beta_star": response_truth.beta_star,
            "sigma0": response_truth.sigma0,
            "params": {**truth.params, **response_truth.params},
        })
        paths["responses"] = out_dir / "responses.csv"
        write_responses(paths["responses"], matrix, data)
    elif response_params:
        raise ConfigError(f"protocol {protocol!r} takes no response parameters")
    write_json(paths["truth"], truth)
    logger.info("Generated %s data (n=%d, p=%d, seed=%d) in %s", protocol, matrix.n, matrix.p, seed, out_dir)
    return paths
