"""Reading adjacency bundles and vectorized matrices into a BinaryDesignMatrix."""
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from shared.errors import DataError
from shared.models import BinaryDesignMatrix, ResponseData

logger = logging.getLogger(__name__)

SUBJECT_COLUMN = "subject_id"
ADJACENCY_SUFFIXES = (".txt", ".adj", ".bin")


class AdjacencyBundle(BaseModel):
    """Per-subject symmetric binary adjacency matrices over a shared region list."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrices: List[np.ndarray] = Field(description="V x V 0/1 matrices, one per subject")
    regions: List[str] = Field(description="Region label of every row/column")
    subject_ids: List[str]

    @model_validator(mode="after")
    def _check(self) -> "AdjacencyBundle":
        size = len(self.regions)
        if len(self.subject_ids) != len(self.matrices):
            raise ValueError("one subject id per adjacency matrix is required")
        for sid, mat in zip(self.subject_ids, self.matrices):
            if mat.shape != (size, size):
                raise ValueError(f"subject {sid}: matrix is {mat.shape}, expected {size} x {size}")
            if not np.isin(mat, (0, 1)).all():
                raise ValueError(f"subject {sid}: non-binary entries")
            if not np.array_equal(mat, mat.T):
                raise ValueError(f"subject {sid}: matrix is not symmetric")
            if np.any(np.diag(mat)):
                raise ValueError(f"subject {sid}: diagonal must be zero")
        return self


class IngestResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrix: BinaryDesignMatrix
    column_map: pd.DataFrame
    removed: List[str] = Field(default_factory=list, description="Column ids dropped as constant")
    raw_columns: int = 0


def read_adjacency_text(path: Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=2)


def read_adjacency_packed(path: Path) -> Tuple[str, np.ndarray]:
    """Packed format: one JSON header line {"V", "subject_id"} followed by np.packbits of the V*V bits."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing header line")
    header = json.loads(raw[:newline].decode())
    size = int(header["V"])
    bits = np.unpackbits(np.frombuffer(raw[newline + 1:], dtype=np.uint8), count=size * size)
    return str(header.get("subject_id", Path(path).stem)), bits.reshape(size, size).astype(np.int64)


def write_adjacency_packed(path: Path, matrix: np.ndarray, subject_id: str) -> None:
    matrix = np.asarray(matrix, dtype=np.uint8)
    header = json.dumps({"V": int(matrix.shape[0]), "subject_id": subject_id}).encode()
    Path(path).write_bytes(header + b"\n" + np.packbits(matrix.ravel()).tobytes())


def load_bundle(directory: Path, regions: Optional[Sequence[str]] = None) -> AdjacencyBundle:
    directory = Path(directory)
    files = sorted(f for f in directory.iterdir() if f.suffix in ADJACENCY_SUFFIXES)
    if not files:
        raise DataError(f"no adjacency files in {directory}")
    matrices, subject_ids = [], []
    for f in files:
        if f.suffix == ".bin":
            sid, mat = read_adjacency_packed(f)
        else:
            sid, mat = f.stem, read_adjacency_text(f)
        subject_ids.append(sid)
        matrices.append(mat)
    size = matrices[0].shape[0]
    if regions is None:
        regions = [f"R{i + 1}" for i in range(size)]
    try:
        return AdjacencyBundle(matrices=matrices, regions=list(regions), subject_ids=subject_ids)
    except ValidationError as exc:
        raise DataError(f"invalid adjacency bundle in {directory}: {exc}") from exc


def read_regions(path: Path) -> List[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def _finish(bits: np.ndarray, column_ids: List[str], subject_ids: List[str], pairs=None) -> IngestResult:
    try:
        matrix, kept = BinaryDesignMatrix.from_bits(bits, column_ids=column_ids, subject_ids=subject_ids)
    except ValidationError as exc:
        raise DataError(f"invalid design matrix: {exc}") from exc
    removed = [column_ids[j] for j in np.setdiff1d(np.arange(len(column_ids)), kept)]
    frame = pd.DataFrame({"column": np.arange(kept.size), "column_id": matrix.column_ids, "raw_index": kept})
    if pairs is not None:
        frame["region_a"] = [pairs[j][0] for j in kept]
        frame["region_b"] = [pairs[j][1] for j in kept]
    logger.info("Ingested %d subjects: %d of %d columns kept", matrix.n, matrix.p, len(column_ids))
    return IngestResult(matrix=matrix, column_map=frame, removed=removed, raw_columns=len(column_ids))


def vectorize_bundle(bundle: AdjacencyBundle) -> IngestResult:
    """Lower-triangle entries (j1 > j2) in row-major region order, constant columns dropped."""
    rows, cols = np.tril_indices(len(bundle.regions), k=-1)
    bits = np.stack([mat[rows, cols] for mat in bundle.matrices]).astype(np.uint8)
    pairs = [(bundle.regions[a], bundle.regions[b]) for a, b in zip(rows, cols)]
    column_ids = [f"{a}--{b}" for a, b in pairs]
    return _finish(bits, column_ids, list(bundle.subject_ids), pairs=pairs)


def read_matrix_csv(path: Path) -> IngestResult:
    """Pre-vectorized CSV: header of column ids, optional leading subject_id column."""
    frame = pd.read_csv(path, dtype={SUBJECT_COLUMN: str})
    if SUBJECT_COLUMN in frame.columns:
        subject_ids = frame.pop(SUBJECT_COLUMN).tolist()
    else:
        subject_ids = [f"s{i + 1}" for i in range(len(frame))]
    try:
        bits = frame.to_numpy(dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entries ({exc})") from exc
    if not np.isin(bits, (0, 1)).all():
        raise DataError(f"{path}: entries must be 0 or 1")
    return _finish(bits.astype(np.uint8), list(frame.columns), subject_ids)


def ingest(source: Path, regions: Optional[Sequence[str]] = None) -> IngestResult:
    source = Path(source)
    if not source.exists():
        raise DataError(f"input {source} does not exist")
    if source.is_dir():
        return vectorize_bundle(load_bundle(source, regions))
    return read_matrix_csv(source)


def export_matrix(matrix: BinaryDesignMatrix, path: Path) -> None:
    frame = pd.DataFrame(matrix.bits, columns=matrix.column_ids)
    frame.insert(0, SUBJECT_COLUMN, matrix.subject_ids)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def read_responses(path: Path) -> pd.DataFrame:
    """Two-column CSV (subject_id, y); an optional split column marks train/test rows."""
    frame = pd.read_csv(path, dtype={SUBJECT_COLUMN: str})
    missing = {SUBJECT_COLUMN, "y"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return frame


def make_response_data(
    matrix: BinaryDesignMatrix,
    responses: pd.DataFrame,
    rng: np.random.Generator,
    train_ids: Optional[Sequence[str]] = None,
    train_fraction: float = 0.8,
) -> ResponseData:
    """Align responses with design rows and split into training and test subjects."""
    row_of = {sid: i for i, sid in enumerate(matrix.subject_ids)}
    unknown = [sid for sid in responses[SUBJECT_COLUMN] if sid not in row_of]
    if unknown:
        raise DataError(f"responses for unknown subjects, e.g. {unknown[:3]}")
    y_of = dict(zip(responses[SUBJECT_COLUMN], responses["y"].astype(float)))
    observed = [row_of[sid] for sid in matrix.subject_ids if sid in y_of and np.isfinite(y_of[sid])]
    if train_ids is not None:
        train = sorted(row_of[sid] for sid in train_ids)
    elif "split" in responses.columns:
        train = sorted(row_of[sid] for sid in responses.loc[responses["split"] == "train", SUBJECT_COLUMN])
    else:
        order = rng.permutation(observed)
        train = sorted(order[: int(round(train_fraction * len(observed)))].tolist())
    train_set = set(train)
    test = [i for i in range(matrix.n) if i not in train_set]
    if any(not np.isfinite(y_of.get(matrix.subject_ids[i], np.nan)) for i in train):
        raise DataError("every training subject needs a response")
    test_known = all(np.isfinite(y_of.get(matrix.subject_ids[i], np.nan)) for i in test)
    return ResponseData(
        y_train=[y_of[matrix.subject_ids[i]] for i in train],
        train_idx=train,
        test_idx=test,
        y_test=[y_of[matrix.subject_ids[i]] for i in test] if test_known else None,
    )


def write_responses(path: Path, matrix: BinaryDesignMatrix, data: ResponseData) -> None:
    rows = [(matrix.subject_ids[i], y, "train") for i, y in zip(data.train_idx, data.y_train)]
    test_y = data.y_test if data.y_test is not None else [np.nan] * len(data.test_idx)
    rows += [(matrix.subject_ids[i], y, "test") for i, y in zip(data.test_idx, test_y)]
    frame = pd.DataFrame(rows, columns=[SUBJECT_COLUMN, "y", "split"])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
