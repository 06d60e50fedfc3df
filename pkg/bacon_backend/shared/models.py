from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class RepresentativeMode(str, Enum):
    """How each cluster elects its regression representative."""
    RANDOM_MEMBER = "a"
    MEDIAN_MEMBER = "b"
    LATENT_VECTOR = "c"


class ScanOrder(str, Enum):
    """Order in which the allocation variables are visited in a sweep."""
    SYSTEMATIC = "systematic"
    RANDOM = "random"


class BinaryDesignMatrix(BaseModel):
    """The n x p binary covariate matrix with its column and subject labels."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    bits: np.ndarray = Field(description="n x p array of 0/1 values (uint8)")
    column_ids: List[str] = Field(description="Region-pair label of every column")
    subject_ids: List[str] = Field(description="Identifier of every row")

    @field_validator("bits")
    @classmethod
    def _check_bits(cls, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError(f"design matrix must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("design matrix entries must be 0 or 1")
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        bits.setflags(write=False)
        return bits

    @model_validator(mode="after")
    def _check_labels(self) -> "BinaryDesignMatrix":
        n, p = self.bits.shape
        if len(self.column_ids) != p:
            raise ValueError(f"{len(self.column_ids)} column ids for {p} columns")
        if len(set(self.column_ids)) != p:
            raise ValueError("column ids must be unique")
        if len(self.subject_ids) != n:
            raise ValueError(f"{len(self.subject_ids)} subject ids for {n} rows")
        ones = self.bits.sum(axis=0)
        constant = np.flatnonzero((ones == 0) | (ones == n))
        if constant.size:
            raise ValueError(f"{constant.size} constant columns remain, e.g. {self.column_ids[constant[0]]}")
        return self

    @property
    def n(self) -> int:
        return int(self.bits.shape[0])

    @property
    def p(self) -> int:
        return int(self.bits.shape[1])

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    @classmethod
    def from_bits(
        cls,
        bits: np.ndarray,
        column_ids: Optional[List[str]] = None,
        subject_ids: Optional[List[str]] = None,
    ) -> Tuple["BinaryDesignMatrix", np.ndarray]:
        """Build a matrix after discarding constant columns.

        Returns the matrix and the indices of the retained columns.
        """
        bits = np.asarray(bits)
        n, p = bits.shape
        if column_ids is None:
            column_ids = [f"x{j + 1}" for j in range(p)]
        if subject_ids is None:
            subject_ids = [f"s{i + 1}" for i in range(n)]
        ones = bits.sum(axis=0)
        kept = np.flatnonzero((ones > 0) & (ones < n))
        matrix = cls(
            bits=bits[:, kept],
            column_ids=[column_ids[j] for j in kept],
            subject_ids=list(subject_ids),
        )
        return matrix, kept


class PdpHyper(BaseModel):
    """Poisson-Dirichlet process parameters and their priors."""

    model_config = ConfigDict(frozen=True)

    mass: float = Field(default=20.0, gt=0, description="Mass parameter M")
    discount: float = Field(default=0.25, ge=0, lt=1, description="Discount parameter d")
    discount_zero_prob: float = Field(
        default=0.5, gt=0, lt=1, description="Prior weight of the point mass at d=0"
    )
    mass_prior_shape: Optional[float] = Field(default=None, gt=0, description="Gamma prior shape for M")
    mass_prior_rate: Optional[float] = Field(default=None, gt=0, description="Gamma prior rate for M")

    @property
    def mass_fixed(self) -> bool:
        return self.mass_prior_shape is None or self.mass_prior_rate is None


class AllocationState(BaseModel):
    """Covariate-to-cluster labels, 0-based and contiguous."""

    model_config = ConfigDict(frozen=True)

    labels: Tuple[int, ...] = Field(description="Cluster label c_j of every covariate")

    @field_validator("labels")
    @classmethod
    def _check_contiguous(cls, labels: Tuple[int, ...]) -> Tuple[int, ...]:
        if not labels:
            return labels
        arr = np.asarray(labels)
        if arr.min() < 0:
            raise ValueError("labels must be non-negative")
        if np.unique(arr).size != arr.max() + 1:
            raise ValueError("labels must occupy every cluster 0..q-1")
        return tuple(int(c) for c in labels)

    @property
    def p(self) -> int:
        return len(self.labels)

    @property
    def q(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(np.asarray(self.labels, dtype=np.int64), minlength=self.q)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    @classmethod
    def from_labels(cls, labels) -> "AllocationState":
        """Relabel arbitrary cluster ids into first-appearance order."""
        _, first, inverse = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first)] = np.arange(first.size)
        return cls(labels=tuple(int(c) for c in rank[inverse]))


class LatentMatrix(BaseModel):
    """Binary latent vectors (one column per cluster) and their shared rate."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    v: np.ndarray = Field(description="n x q array of latent elements v_ik")
    p_star: float = Field(gt=0, lt=1, description="Shared Bernoulli rate p_*")
    lam: float = Field(default=1.0, gt=0, description="Beta(lam/2, lam/2) prior concentration")

    @field_validator("v")
    @classmethod
    def _check_v(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim != 2:
            raise ValueError("latent matrix must be 2-D")
        if v.size and not np.isin(v, (0, 1)).all():
            raise ValueError("latent elements must be 0 or 1")
        v = np.ascontiguousarray(v, dtype=np.uint8)
        v.setflags(write=False)
        return v

    @property
    def q_star(self) -> float:
        return 1.0 - self.p_star


class ContaminationModel(BaseModel):
    """Contamination channel Q written as concordance r plus free matrix Q*."""

    model_config = ConfigDict(frozen=True)

    r: Tuple[float, float] = Field(default=(0.9, 0.9), description="Concordance parameters (r0, r1)")
    q_star: Tuple[Tuple[float, float], Tuple[float, float]] = Field(
        default=((0.5, 0.5), (0.5, 0.5)), description="Row-stochastic free matrix Q*"
    )
    r_floor: float = Field(default=0.85, gt=0.5, lt=1, description="Truncation point r*")
    alpha: float = Field(default=1.0, gt=0, description="Dirichlet(alpha/2, alpha/2) concentration")
    r_alpha: float = Field(default=1.0, gt=0, description="Beta prior shape for r_s")
    r_beta: float = Field(default=1.0, gt=0, description="Beta prior shape for r_s")

    @model_validator(mode="after")
    def _check_rows(self) -> "ContaminationModel":
        # Closed at both ends so the limits r_s = r* and r_s = 1 can be evaluated;
        # sample_truncated_beta keeps sampled values strictly inside (r*, 1).
        for s in (0, 1):
            if not self.r_floor <= self.r[s] <= 1.0:
                raise ValueError(f"r_{s}={self.r[s]} outside [{self.r_floor}, 1]")
            row = self.q_star[s]
            if min(row) < 0 or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"q*_{s}={row} is not a probability vector")
        return self


class TransitionCounts(BaseModel):
    """2 x 2 table of latent-to-observed transitions n_st."""

    model_config = ConfigDict(frozen=True)

    n00: int = Field(ge=0)
    n01: int = Field(ge=0)
    n10: int = Field(ge=0)
    n11: int = Field(ge=0)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.n00, self.n01], [self.n10, self.n11]], dtype=np.int64)

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @classmethod
    def from_matrix(cls, counts: np.ndarray) -> "TransitionCounts":
        counts = np.asarray(counts)
        return cls(
            n00=int(counts[0, 0]), n01=int(counts[0, 1]),
            n10=int(counts[1, 0]), n11=int(counts[1, 1]),
        )


class SweepSchedule(BaseModel):
    """Which Gibbs blocks run in a sweep and how often (0 disables a block)."""

    model_config = ConfigDict(frozen=True)

    order: ScanOrder = Field(default=ScanOrder.SYSTEMATIC)
    allocation: int = Field(default=1, ge=0)
    latent: int = Field(default=1, ge=0)
    p_star: int = Field(default=1, ge=0)
    contamination: int = Field(default=1, ge=0)
    discount: int = Field(default=1, ge=0)
    mass: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def _check_any(self) -> "SweepSchedule":
        if not any((self.allocation, self.latent, self.p_star, self.contamination, self.discount, self.mass)):
            raise ValueError("a sweep must run at least one block")
        return self


class ChainSettings(BaseModel):
    """Chain length, thinning and seeding for one MCMC stage."""

    model_config = ConfigDict(frozen=True)

    burn_in: int = Field(default=5000, ge=0)
    kept: int = Field(default=5000, ge=0, description="Post-burn-in sweeps")
    thin: int = Field(default=5, ge=1, description="Persist every thin-th kept sweep")
    seed: int = Field(default=20240601)
    chain: int = Field(default=0, ge=0)
    log_every: int = Field(default=500, ge=1)


class CoClusterMatrix(BaseModel):
    """Posterior pairwise co-clustering probabilities."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pihat: np.ndarray = Field(description="p x p symmetric float32 matrix")
    n_sweeps: int = Field(default=0, ge=0, description="Sweeps averaged into pihat")

    @field_validator("pihat")
    @classmethod
    def _check_pihat(cls, pihat: np.ndarray) -> np.ndarray:
        pihat = np.asarray(pihat, dtype=np.float32)
        if pihat.ndim != 2 or pihat.shape[0] != pihat.shape[1]:
            raise ValueError("co-clustering matrix must be square")
        if pihat.size:
            if not np.allclose(pihat, pihat.T, atol=1e-6):
                raise ValueError("co-clustering matrix must be symmetric")
            if not np.allclose(np.diag(pihat), 1.0, atol=1e-6):
                raise ValueError("co-clustering matrix must have a unit diagonal")
            if pihat.min() < 0 or pihat.max() > 1 + 1e-6:
                raise ValueError("co-clustering probabilities must lie in [0, 1]")
        pihat.setflags(write=False)
        return pihat

    @property
    def p(self) -> int:
        return int(self.pihat.shape[0])


class ResponseData(BaseModel):
    """Gaussian responses split into training and test subjects."""

    model_config = ConfigDict(frozen=True)

    y_train: List[float] = Field(description="Responses of the training subjects")
    train_idx: List[int] = Field(description="Design-matrix rows of the training subjects")
    test_idx: List[int] = Field(default_factory=list, description="Design-matrix rows of the test subjects")
    y_test: Optional[List[float]] = Field(default=None, description="Held-out responses, when known")

    @model_validator(mode="after")
    def _check_split(self) -> "ResponseData":
        if len(self.y_train) != len(self.train_idx):
            raise ValueError("y_train and train_idx differ in length")
        if len(self.train_idx) < 3:
            raise ValueError("at least 3 training subjects are required")
        if set(self.train_idx) & set(self.test_idx):
            raise ValueError("training and test subjects overlap")
        if self.y_test is not None and len(self.y_test) != len(self.test_idx):
            raise ValueError("y_test and test_idx differ in length")
        return self


class RegressionSample(BaseModel):
    """One kept Stage-2 draw."""

    gamma: List[int] = Field(description="Inclusion indicator per cluster")
    reps: List[int] = Field(description="Representative column per cluster (-1 = latent vector)")
    beta: List[float] = Field(description="Intercept followed by one coefficient per cluster (0 if excluded)")
    sigma2: float = Field(gt=0)
    omega1: float = Field(gt=0, lt=1)
    sweep: int = Field(default=0, ge=0)


class TruthRecord(BaseModel):
    """Everything a generator knows about the data it produced."""

    generator: str = Field(description="Generator name")
    seed: int
    params: Dict[str, Any] = Field(default_factory=dict)
    labels: Optional[List[int]] = Field(default=None, description="True allocation of the retained columns")
    q0: Optional[int] = Field(default=None, description="True number of clusters")
    latent: Optional[List[List[int]]] = Field(default=None, description="True latent matrix V0")
    q_matrix: Optional[List[List[float]]] = Field(default=None, description="True contamination matrix Q0")
    r0: Optional[float] = None
    phi0: Optional[float] = None
    predictors: Optional[List[int]] = Field(default=None, description="True predictor columns S")
    beta_star: Optional[float] = None
    sigma0: Optional[float] = None
    dropped_columns: List[int] = Field(default_factory=list, description="Generated columns removed as constant")


class EvalReport(BaseModel):
    """Scores of one fitted run against truth and held-out data."""

    tau_hat: Optional[float] = Field(default=None, ge=0, le=1)
    q_hat: Optional[int] = None
    q0: Optional[int] = None
    logbf_lower_mean: Optional[float] = None
    logbf_lower_sd: Optional[float] = None
    d_ci: Optional[Tuple[float, float]] = None
    d_zero_prob: Optional[float] = Field(default=None, ge=0, le=1)
    tpr: Optional[float] = Field(default=None, ge=0, le=1)
    tnr: Optional[float] = Field(default=None, ge=0, le=1)
    pct_mse_reduction: Optional[float] = None
    model_size: Optional[float] = None
    runtime_per_sweep: Optional[float] = None
    kmeans_tau: Optional[float] = Field(default=None, ge=0, le=1)
    oracle_pct_mse_reduction: Optional[float] = None
    identical_latent_bound: Optional[float] = Field(default=None, ge=0, le=1)


class StageRequest(BaseModel):
    """Request to run one pipeline stage (crosses the Temporal boundary)."""

    stage: str = Field(description="Stage name")
    config: Dict[str, Any] = Field(description="RunConfig as a plain dict")


class StageResult(BaseModel):
    """Outcome of one pipeline stage."""

    stage: str
    skipped: bool = Field(default=False, description="True when a matching completion stamp existed")
    input_hash: str = ""
    outputs: List[str] = Field(default_factory=list)
    wall_seconds: float = 0.0


class PipelineRequest(BaseModel):
    """Input of the Temporal pipeline workflow."""

    config: Dict[str, Any] = Field(description="RunConfig as a plain dict")
    stages: List[str] = Field(description="Stages to run, in pipeline order")


class PipelineResult(BaseModel):
    """Output of the Temporal pipeline workflow."""

    run_dir: str
    results: List[StageResult] = Field(default_factory=list)
    cancelled: bool = False
