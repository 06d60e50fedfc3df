"""Run-directory layout and file formats."""
import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from shared.errors import DataError

logger = logging.getLogger(__name__)


class StageStamp(BaseModel):
    """Completion record written after a stage finishes."""

    stage: str
    input_hash: str
    config_hash: str
    seed: int
    outputs: List[str] = Field(default_factory=list)
    wall_seconds: float = 0.0
    completed_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    extra: Dict[str, Any] = Field(default_factory=dict)


class RunDirectory:
    """Paths of every artifact a run produces."""

    def __init__(self, root) -> None:
        self.root = Path(root)

    def ensure(self) -> "RunDirectory":
        for sub in (self.root, self.chains, self.stages, self.data):
            sub.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def chains(self) -> Path:
        return self.root / "chains"

    @property
    def stages(self) -> Path:
        return self.root / "stages"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def design(self) -> Path:
        return self.data / "design.csv"

    @property
    def column_map(self) -> Path:
        return self.data / "column_map.csv"

    @property
    def responses(self) -> Path:
        return self.data / "responses.json"

    @property
    def cocluster(self) -> Path:
        return self.root / "cocluster.bin"

    @property
    def ls_allocation(self) -> Path:
        return self.root / "ls_allocation.json"

    @property
    def ls_configuration(self) -> Path:
        return self.root / "ls_configuration.csv"

    @property
    def latent_means(self) -> Path:
        return self.root / "latent_means.csv"

    @property
    def regression(self) -> Path:
        return self.root / "regression.csv"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions.csv"

    @property
    def eval(self) -> Path:
        return self.root / "eval.json"

    @property
    def replicates(self) -> Path:
        return self.root / "replicates.csv"

    def chain_file(self, stage: str, chain: int) -> Path:
        return self.chains / f"{stage}_chain{chain}.ndjson"

    def trace_file(self, stage: str, chain: int) -> Path:
        return self.chains / f"{stage}_trace_chain{chain}.csv"

    def stamp_file(self, stage: str) -> Path:
        return self.stages / f"{stage}.json"


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        path.write_text(payload.model_dump_json(indent=2))
    else:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_json(path: Path) -> Any:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    return json.loads(path.read_text())


def write_ndjson(path: Path, records: Iterable[Dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_ndjson(path: Path) -> List[Dict]:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_cocluster(path: Path, pihat: np.ndarray) -> None:
    """8-byte little-endian column count, then row-major little-endian float32."""
    pihat = np.asarray(pihat, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(np.array([pihat.shape[0]], dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(pihat).tobytes())


def read_cocluster(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    raw = path.read_bytes()
    p = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    body = np.frombuffer(raw[8:], dtype="<f4")
    if body.size != p * p:
        raise DataError(f"{path} holds {body.size} values, expected {p * p}")
    return body.reshape(p, p).astype(np.float32)


def write_csv(path: Path, frame: pd.DataFrame, index: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index)


def read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    return pd.read_csv(path, **kwargs)


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_stamp(run_dir: RunDirectory, stamp: StageStamp) -> None:
    write_json(run_dir.stamp_file(stamp.stage), stamp)
    manifest = read_json(run_dir.manifest) if run_dir.manifest.exists() else {"artifacts": {}, "stages": {}}
    manifest["stages"][stamp.stage] = {"input_hash": stamp.input_hash, "completed_at": stamp.completed_at}
    for output in stamp.outputs:
        manifest["artifacts"][output] = {
            "stage": stamp.stage,
            "config_hash": stamp.config_hash,
            "seed": stamp.seed,
        }
    write_json(run_dir.manifest, manifest)


def read_stamp(run_dir: RunDirectory, stage: str) -> Optional[StageStamp]:
    path = run_dir.stamp_file(stage)
    if not path.exists():
        return None
    return StageStamp.model_validate_json(path.read_text())


def update_manifest(run_dir: RunDirectory, **entries) -> None:
    manifest = read_json(run_dir.manifest) if run_dir.manifest.exists() else {"artifacts": {}, "stages": {}}
    manifest.update(entries)
    write_json(run_dir.manifest, manifest)
