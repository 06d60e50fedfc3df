import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError

from shared.errors import ConfigError
from shared.models import (
    ChainSettings,
    ContaminationModel,
    PdpHyper,
    RepresentativeMode,
    ScanOrder,
    SweepSchedule,
)

ENV_PREFIX = "BACON_"
PIPELINE_STAGES = ["ingest", "stage1", "ls_allocation", "stage1b", "ls_configuration", "stage2", "predict", "eval"]
# Stage groups selectable with --stages
STAGE_GROUPS = {
    "1": ["ingest", "stage1", "ls_allocation"],
    "1b": ["stage1b", "ls_configuration"],
    "2": ["stage2", "predict"],
    "eval": ["eval"],
}
# Keys that never change results and stay out of the config hash
RUNTIME_KEYS = {
    "run_dir", "workers", "log_every", "temporal_host", "temporal_port",
    "task_queue", "max_concurrent_activities", "stages",
}


class RunConfig(BaseModel):
    """Configuration of one BaCon run."""

    # Paths
    input: Optional[str] = Field(default=None, description="Design CSV or directory of adjacency files")
    regions: Optional[str] = Field(default=None, description="File with one region label per line")
    responses: Optional[str] = Field(default=None, description="CSV with subject_id, y (and optional split)")
    train_ids: Optional[str] = Field(default=None, description="File listing training subject ids")
    truth: Optional[str] = Field(default=None, description="Truth sidecar JSON from the synth command")
    run_dir: str = Field(default="runs/latest", description="Output directory")

    # Clustering model
    lam: float = Field(default=1.0, gt=0, description="Beta(lam/2, lam/2) prior on p_*")
    alpha: float = Field(default=1.0, gt=0, description="Dirichlet(alpha/2, alpha/2) prior on Q* rows")
    r_alpha: float = Field(default=1.0, gt=0, description="Beta prior shape for r_s")
    r_beta: float = Field(default=1.0, gt=0, description="Beta prior shape for r_s")
    r_floor: float = Field(default=0.85, gt=0.5, lt=1, description="Truncation point r*")
    mass: float = Field(default=20.0, gt=0, description="PDP mass M (initial value when M is sampled)")
    discount: float = Field(default=0.25, ge=0, lt=1, description="Initial PDP discount d")
    discount_zero_prob: float = Field(default=0.5, gt=0, lt=1, description="Prior mass of d = 0")
    mass_prior_shape: Optional[float] = Field(default=None, gt=0, description="Gamma shape; enables the M update")
    mass_prior_rate: Optional[float] = Field(default=None, gt=0, description="Gamma rate for M")
    init_threshold: float = Field(default=0.3, gt=0, le=1, description="Single-linkage cut for initial clusters")
    update_contamination_stage1b: bool = Field(default=True, description="Keep updating (r, Q*) in stage 1b")

    # Regression model
    sigma_beta2: float = Field(default=100.0, gt=0, description="g-prior scale")
    a0: float = Field(default=0.01, gt=0, description="Inverse-gamma shape of sigma^2")
    b0: float = Field(default=0.01, gt=0, description="Inverse-gamma scale of sigma^2")
    rep_mode: RepresentativeMode = Field(default=RepresentativeMode.RANDOM_MEMBER, description="Representative mode a|b|c")
    train_fraction: float = Field(default=0.8, gt=0, lt=1, description="Training share of a random split")

    # Chains
    burn_in: int = Field(default=5000, ge=0)
    kept: int = Field(default=5000, ge=1)
    thin: int = Field(default=5, ge=1)
    stage1b_burn_in: Optional[int] = Field(default=None, ge=0, description="Defaults to burn_in")
    stage1b_kept: Optional[int] = Field(default=None, ge=1, description="Defaults to kept")
    stage2_burn_in: Optional[int] = Field(default=None, ge=0, description="Defaults to burn_in")
    stage2_kept: Optional[int] = Field(default=None, ge=1, description="Defaults to kept")
    seed: int = Field(default=20240601)
    chains: int = Field(default=1, ge=1)
    scan_order: ScanOrder = Field(default=ScanOrder.SYSTEMATIC)
    log_every: int = Field(default=500, ge=1)
    stages: str = Field(default="1,1b,2,eval", description="Comma list of stage groups: 1, 1b, 2, eval")

    # Execution
    workers: int = Field(default=1, ge=1, description="Threads for independent chains and replicates")
    temporal_host: str = Field(default="localhost")
    temporal_port: int = Field(default=7233)
    task_queue: str = Field(default="bacon-pipeline-task-queue")
    max_concurrent_activities: int = Field(default=4, ge=1)

    def config_hash(self) -> str:
        payload = self.model_dump(mode="json", exclude=RUNTIME_KEYS)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def selected_stages(self) -> List[str]:
        wanted = []
        for group in (g.strip() for g in self.stages.split(",") if g.strip()):
            if group in STAGE_GROUPS:
                wanted.extend(STAGE_GROUPS[group])
            elif group in PIPELINE_STAGES:
                wanted.append(group)
            else:
                raise ConfigError(f"unknown stage {group!r}")
        return [s for s in PIPELINE_STAGES if s in wanted]

    def validate_paths(self) -> None:
        """Check that the inputs the selected stages need are present."""
        stages = self.selected_stages()
        required = []
        if "ingest" in stages:
            required.append(("input", self.input))
        if "stage2" in stages:
            required.append(("responses", self.responses))
        missing = []
        for var_name, var_value in required:
            if not var_value:
                missing.append(var_name)
            elif not Path(var_value).exists():
                missing.append(f"{var_name} ({var_value} not found)")
        if missing:
            raise ConfigError(f"Missing required inputs: {', '.join(missing)}")

    def pdp_hyper(self) -> PdpHyper:
        return PdpHyper(
            mass=self.mass,
            discount=self.discount,
            discount_zero_prob=self.discount_zero_prob,
            mass_prior_shape=self.mass_prior_shape,
            mass_prior_rate=self.mass_prior_rate,
        )

    def contamination_model(self) -> ContaminationModel:
        start = 0.9 if self.r_floor < 0.9 else (1.0 + self.r_floor) / 2.0
        return ContaminationModel(
            r=(start, start),
            r_floor=self.r_floor,
            alpha=self.alpha,
            r_alpha=self.r_alpha,
            r_beta=self.r_beta,
        )

    def sweep_schedule(self) -> SweepSchedule:
        return SweepSchedule(order=self.scan_order, mass=0 if self.mass_prior_shape is None else 1)

    def chain_settings(self, stage: str, chain: int = 0) -> ChainSettings:
        burn_in, kept = self.burn_in, self.kept
        if stage == "stage1b":
            burn_in = self.burn_in if self.stage1b_burn_in is None else self.stage1b_burn_in
            kept = self.kept if self.stage1b_kept is None else self.stage1b_kept
        elif stage == "stage2":
            burn_in = self.burn_in if self.stage2_burn_in is None else self.stage2_burn_in
            kept = self.kept if self.stage2_kept is None else self.stage2_kept
        return ChainSettings(
            burn_in=burn_in, kept=kept, thin=self.thin, seed=self.seed, chain=chain, log_every=self.log_every
        )


def _from_environment() -> Dict[str, str]:
    fields = RunConfig.model_fields
    values = {}
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in fields:
                values[name] = value
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Resolve defaults, then the key=value file, then BACON_* variables, then explicit overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        unknown = set(file_values) - set(RunConfig.model_fields)
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {', '.join(sorted(unknown))}")
        values.update(file_values)
    values.update(_from_environment())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def write_config_file(config: RunConfig, path: Path) -> None:
    """Write a flat key=value file that load_config reads back."""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is not None:
            lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")
