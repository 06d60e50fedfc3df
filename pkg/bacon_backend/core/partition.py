"""Least-squares point estimates of the allocation and the latent configuration."""
import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shared.errors import DataError
from shared.models import AllocationState, CoClusterMatrix, LatentMatrix

logger = logging.getLogger(__name__)


class LeastSquaresAllocation(BaseModel):
    """Sampled partition closest to the co-clustering matrix."""

    allocation: AllocationState
    loss: float = Field(ge=0, description="Sum over pairs of squared co-clustering errors")
    index: int = Field(ge=0, description="Position in the sample sequence")
    sweep: Optional[int] = Field(default=None, description="Sweep the sample was taken at")

    @property
    def q(self) -> int:
        return self.allocation.q


class LeastSquaresConfiguration(BaseModel):
    """Sampled latent matrix closest to the element-wise posterior means."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    latent: LatentMatrix
    loss: float = Field(ge=0)
    index: int = Field(ge=0)
    sweep: Optional[int] = None


def allocation_loss(labels, pihat: np.ndarray) -> float:
    """Sum over j1 < j2 of (1{c_j1 = c_j2} - pihat_j1j2)^2."""
    labels = np.asarray(labels)
    diff = (labels[:, None] == labels[None, :]) - np.asarray(pihat, dtype=np.float64)
    return 0.5 * float(np.einsum("ij,ij->", diff, diff))


def cocluster_from_samples(samples: Sequence[AllocationState]) -> CoClusterMatrix:
    if not samples:
        raise DataError("no allocation samples to average")
    p = samples[0].p
    together = np.zeros((p, p), dtype=np.uint32)
    for sample in samples:
        labels = sample.as_array()
        together += labels[:, None] == labels[None, :]
    return CoClusterMatrix(pihat=together.astype(np.float32) / np.float32(len(samples)), n_sweeps=len(samples))


def least_squares_allocation(
    samples: Sequence[AllocationState],
    pihat: CoClusterMatrix,
    sweeps: Optional[Sequence[int]] = None,
) -> LeastSquaresAllocation:
    """Pick the sampled partition with the smallest squared loss; earliest wins ties."""
    if not samples:
        raise DataError("least-squares allocation needs at least one sample")
    matrix = pihat.pihat.astype(np.float64)
    best_index, best_loss = 0, np.inf
    for index, sample in enumerate(samples):
        if sample.p != pihat.p:
            raise DataError(f"sample {index} covers {sample.p} covariates, pihat has {pihat.p}")
        loss = allocation_loss(sample.labels, matrix)
        if loss < best_loss:
            best_index, best_loss = index, loss
    logger.info("Least-squares allocation: sample %d, q=%d, loss=%.4f", best_index, samples[best_index].q, best_loss)
    return LeastSquaresAllocation(
        allocation=samples[best_index],
        loss=max(best_loss, 0.0),
        index=best_index,
        sweep=None if sweeps is None else int(sweeps[best_index]),
    )


def least_squares_configuration(
    samples: Sequence[LatentMatrix],
    means: np.ndarray,
    sweeps: Optional[Sequence[int]] = None,
) -> LeastSquaresConfiguration:
    if not samples:
        raise DataError("least-squares configuration needs at least one sample")
    means = np.asarray(means, dtype=np.float64)
    best_index, best_loss = 0, np.inf
    for index, sample in enumerate(samples):
        if sample.v.shape != means.shape:
            raise DataError(f"sample {index} has shape {sample.v.shape}, means have {means.shape}")
        loss = float(np.sum((sample.v - means) ** 2))
        if loss < best_loss:
            best_index, best_loss = index, loss
    return LeastSquaresConfiguration(
        latent=samples[best_index],
        loss=best_loss,
        index=best_index,
        sweep=None if sweeps is None else int(sweeps[best_index]),
    )


def cluster_latent_distances(bits, alloc: AllocationState, latent: LatentMatrix) -> np.ndarray:
    """Per cluster, the median mean taxicab distance from members to the latent vector."""
    x = np.asarray(bits, dtype=np.float64)
    labels = alloc.as_array()
    v = latent.v.astype(np.float64)
    if v.shape != (x.shape[0], alloc.q):
        raise DataError(f"latent matrix shape {v.shape} does not match {x.shape[0]} x {alloc.q}")
    dist = np.abs(x - v[:, labels]).mean(axis=0)
    return np.array([np.median(dist[labels == k]) for k in range(alloc.q)])
