"""Local execution of the staged pipeline over a run directory.

Every stage reads its inputs from the run directory, writes its outputs there
and leaves a completion stamp. A stage whose stamp matches the current input
hash is skipped, so an interrupted run resumes at the first unfinished stage.
"""
import concurrent.futures
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config_run import PIPELINE_STAGES, RunConfig
from core.gibbs import Stage1Result, pool_stage1_results, run_stage1, run_stage1b
from core.model import identical_latent_bound
from core.partition import least_squares_allocation, least_squares_configuration
from core.regression import (
    RegressionPrior,
    nearest_member_latent,
    predict,
    representative_probabilities,
    run_stage2,
)
from data.ingest import SUBJECT_COLUMN, export_matrix, ingest, make_response_data, read_matrix_csv, read_regions, read_responses
from evaluation.kmeans import kmeans_baseline
from evaluation.metrics import (
    d_posterior_summary,
    logbf_lower_bound,
    oracle_ols_reduction,
    pct_mse_reduction,
    tau_from_cocluster,
    tpr_tnr,
)
from shared.artifacts import (
    RunDirectory,
    StageStamp,
    file_digest,
    read_cocluster,
    read_csv,
    read_json,
    read_ndjson,
    read_stamp,
    update_manifest,
    write_cocluster,
    write_csv,
    write_json,
    write_ndjson,
    write_stamp,
)
from shared.errors import ConfigError, DataError
from shared.models import (
    AllocationState,
    BinaryDesignMatrix,
    CoClusterMatrix,
    EvalReport,
    LatentMatrix,
    RegressionSample,
    RepresentativeMode,
    ResponseData,
    StageResult,
    TruthRecord,
)
from shared.random_streams import substream

logger = logging.getLogger(__name__)

Progress = Optional[Callable[[str, int], None]]

_CLUSTER_KEYS = (
    "lam", "alpha", "r_alpha", "r_beta", "r_floor", "mass", "discount", "discount_zero_prob",
    "mass_prior_shape", "mass_prior_rate", "init_threshold", "burn_in", "kept", "thin", "seed",
    "chains", "scan_order",
)
# Config keys that can change each stage's outputs
STAGE_KEYS: Dict[str, Tuple[str, ...]] = {
    "ingest": ("input", "regions", "responses", "train_ids", "train_fraction", "seed"),
    "stage1": _CLUSTER_KEYS,
    "ls_allocation": (),
    "stage1b": _CLUSTER_KEYS + ("update_contamination_stage1b", "stage1b_burn_in", "stage1b_kept"),
    "ls_configuration": (),
    "stage2": ("sigma_beta2", "a0", "b0", "rep_mode", "burn_in", "kept", "thin", "seed", "stage2_burn_in", "stage2_kept"),
    "predict": ("seed",),
    "eval": ("truth", "seed"),
}


def upstream_stages(stage: str, config: RunConfig) -> List[str]:
    latent = config.rep_mode == RepresentativeMode.LATENT_VECTOR
    deps = {
        "ingest": [],
        "stage1": ["ingest"],
        "ls_allocation": ["stage1"],
        "stage1b": ["stage1", "ls_allocation"],
        "ls_configuration": ["stage1b"],
        "stage2": ["ingest", "ls_allocation"] + (["ls_configuration"] if latent else []),
        "predict": ["stage2"],
        "eval": ["stage1", "ls_allocation"],
    }
    if stage not in deps:
        raise ConfigError(f"unknown stage {stage!r}")
    return deps[stage]


def _path_digest(path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    source = Path(path)
    if not source.exists():
        return None
    if source.is_dir():
        digest = hashlib.sha256()
        for f in sorted(p for p in source.iterdir() if p.is_file()):
            digest.update(f.name.encode())
            digest.update(file_digest(f).encode())
        return digest.hexdigest()
    return file_digest(source)


def stage_input_hash(stage: str, config: RunConfig, run_dir: RunDirectory) -> str:
    """Hash of the stage's config keys, its input files and the input hashes of the stages it reads."""
    values = config.model_dump(mode="json")
    payload = {"stage": stage, "config": {k: values[k] for k in STAGE_KEYS[stage]}}
    if stage == "ingest":
        payload["files"] = {k: _path_digest(values[k]) for k in ("input", "regions", "responses", "train_ids")}
    if stage == "eval":
        payload["files"] = {"truth": _path_digest(config.truth)}
        # eval also scores whatever regression outputs exist
        optional = [s for s in ("stage2", "predict") if read_stamp(run_dir, s) is not None]
    else:
        optional = []
    upstream = {}
    for dep in upstream_stages(stage, config) + optional:
        stamp = read_stamp(run_dir, dep)
        if stamp is None:
            raise DataError(f"stage {stage} needs the outputs of stage {dep}; run it first")
        upstream[dep] = stamp.input_hash
    payload["upstream"] = upstream
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _design(run_dir: RunDirectory) -> BinaryDesignMatrix:
    return read_matrix_csv(run_dir.design).matrix


def _responses(run_dir: RunDirectory) -> ResponseData:
    return ResponseData.model_validate(read_json(run_dir.responses))


def _allocation(run_dir: RunDirectory) -> AllocationState:
    return AllocationState(labels=tuple(read_json(run_dir.ls_allocation)["labels"]))


def _configuration(run_dir: RunDirectory, alloc: AllocationState) -> LatentMatrix:
    frame = read_csv(run_dir.ls_configuration, dtype={SUBJECT_COLUMN: str})
    frame = frame.drop(columns=[SUBJECT_COLUMN])
    if frame.shape[1] != alloc.q:
        raise DataError(f"configuration has {frame.shape[1]} columns, allocation has {alloc.q} clusters")
    meta = read_stamp(run_dir, "ls_configuration").extra
    return LatentMatrix(v=frame.to_numpy(dtype=np.uint8), p_star=meta["p_star"], lam=meta["lam"])


def _chain_progress(progress: Progress, stage: str) -> Optional[Callable[[int], None]]:
    if progress is None:
        return None
    return lambda sweep: progress(stage, sweep)


def _relative(run_dir: RunDirectory, paths) -> List[str]:
    return [str(Path(p).relative_to(run_dir.root)) for p in paths]


def stage_ingest(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    regions = read_regions(Path(config.regions)) if config.regions else None
    result = ingest(Path(config.input), regions=regions)
    export_matrix(result.matrix, run_dir.design)
    write_csv(run_dir.column_map, result.column_map)
    outputs = [run_dir.design, run_dir.column_map]
    extra = {"n": result.matrix.n, "p": result.matrix.p, "removed_columns": result.removed}
    if config.responses:
        train_ids = None
        if config.train_ids:
            train_ids = [line.strip() for line in Path(config.train_ids).read_text().splitlines() if line.strip()]
        data = make_response_data(
            result.matrix,
            read_responses(Path(config.responses)),
            substream(config.seed, "ingest", purpose="split"),
            train_ids=train_ids,
            train_fraction=config.train_fraction,
        )
        write_json(run_dir.responses, data)
        outputs.append(run_dir.responses)
        extra.update({"train": len(data.train_idx), "test": len(data.test_idx)})
    update_manifest(run_dir, removed_columns=result.removed, raw_columns=result.raw_columns)
    return outputs, extra


def stage_stage1(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    matrix = _design(run_dir)
    hyper, contam, schedule = config.pdp_hyper(), config.contamination_model(), config.sweep_schedule()
    workers = min(config.workers, config.chains)
    logger.info("Stage 1: %d chain(s) on %d x %d, %d worker(s)", config.chains, matrix.n, matrix.p, workers)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(
                run_stage1,
                matrix.bits,
                schedule,
                config.chain_settings("stage1", c),
                hyper,
                contam,
                config.lam,
                config.init_threshold,
                False,
                _chain_progress(progress, f"stage1[{c}]"),
            )
            for c in range(config.chains)
        ]
        results: List[Stage1Result] = [f.result() for f in futures]

    outputs = []
    for c, result in enumerate(results):
        write_ndjson(run_dir.chain_file("stage1", c), result.snapshots)
        write_csv(run_dir.trace_file("stage1", c), pd.DataFrame(result.trace))
        outputs += [run_dir.chain_file("stage1", c), run_dir.trace_file("stage1", c)]
    pooled = pool_stage1_results(results)
    write_cocluster(run_dir.cocluster, pooled.pihat)
    outputs.append(run_dir.cocluster)

    final = results[0].final_state
    extra = {
        "seconds_per_sweep": [r.seconds_per_sweep for r in results],
        "final": {
            "p_star": final.p_star,
            "r": final.r.tolist(),
            "q_star": final.q_star.tolist(),
        },
    }
    return outputs, extra


def stage_ls_allocation(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    pihat = read_cocluster(run_dir.cocluster)
    samples, origins = [], []
    for c in range(config.chains):
        for record in read_ndjson(run_dir.chain_file("stage1", c)):
            samples.append(AllocationState(labels=tuple(record["labels"])))
            origins.append((c, record["sweep"]))
    estimate = least_squares_allocation(samples, CoClusterMatrix(pihat=pihat, n_sweeps=1))
    chain, sweep = origins[estimate.index]
    write_json(run_dir.ls_allocation, {
        "q": estimate.q,
        "labels": list(estimate.allocation.labels),
        "loss": estimate.loss,
        "chain": chain,
        "sweep": sweep,
    })
    return [run_dir.ls_allocation], {"q": estimate.q, "loss": estimate.loss}


def stage_stage1b(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    matrix = _design(run_dir)
    alloc = _allocation(run_dir)
    final = read_stamp(run_dir, "stage1").extra["final"]
    contam = config.contamination_model().model_copy(update={
        "r": tuple(final["r"]),
        "q_star": tuple(tuple(row) for row in final["q_star"]),
    })
    result = run_stage1b(
        matrix.bits,
        alloc,
        config.chain_settings("stage1b"),
        config.pdp_hyper(),
        contam,
        lam=config.lam,
        update_contamination=config.update_contamination_stage1b,
        p_star_start=final["p_star"],
        progress=_chain_progress(progress, "stage1b"),
    )
    records = [
        {"sweep": sweep, "p_star": sample.p_star, "v": sample.v.tolist()}
        for sweep, sample in zip(result.sample_sweeps, result.samples)
    ]
    write_ndjson(run_dir.chain_file("stage1b", 0), records)
    write_csv(run_dir.trace_file("stage1b", 0), pd.DataFrame(result.trace))
    means = pd.DataFrame(result.means, columns=[f"k{k}" for k in range(alloc.q)])
    means.insert(0, SUBJECT_COLUMN, matrix.subject_ids)
    write_csv(run_dir.latent_means, means)
    return [run_dir.chain_file("stage1b", 0), run_dir.trace_file("stage1b", 0), run_dir.latent_means], {}


def stage_ls_configuration(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    means_frame = read_csv(run_dir.latent_means, dtype={SUBJECT_COLUMN: str})
    subject_ids = means_frame.pop(SUBJECT_COLUMN).tolist()
    records = read_ndjson(run_dir.chain_file("stage1b", 0))
    samples = [
        LatentMatrix(v=np.asarray(r["v"], dtype=np.uint8).reshape(len(subject_ids), -1), p_star=r["p_star"], lam=config.lam)
        for r in records
    ]
    estimate = least_squares_configuration(samples, means_frame.to_numpy(), sweeps=[r["sweep"] for r in records])
    frame = pd.DataFrame(estimate.latent.v, columns=means_frame.columns)
    frame.insert(0, SUBJECT_COLUMN, subject_ids)
    write_csv(run_dir.ls_configuration, frame)
    extra = {"loss": estimate.loss, "sweep": estimate.sweep, "p_star": estimate.latent.p_star, "lam": config.lam}
    return [run_dir.ls_configuration], extra


def stage_stage2(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    if not run_dir.responses.exists():
        raise DataError("stage 2 needs responses; pass responses= at ingest")
    matrix = _design(run_dir)
    data = _responses(run_dir)
    alloc = _allocation(run_dir)
    mode = RepresentativeMode(config.rep_mode)
    configuration = _configuration(run_dir, alloc) if mode == RepresentativeMode.LATENT_VECTOR else None
    result = run_stage2(
        matrix.bits,
        data,
        alloc,
        mode,
        config.chain_settings("stage2"),
        RegressionPrior(sigma_beta2=config.sigma_beta2, a0=config.a0, b0=config.b0),
        configuration=configuration,
        progress=_chain_progress(progress, "stage2"),
    )
    write_ndjson(run_dir.chain_file("stage2", 0), (s.model_dump() for s in result.samples))
    write_csv(run_dir.trace_file("stage2", 0), pd.DataFrame(result.trace))
    write_csv(run_dir.regression, representative_probabilities(result.samples, alloc, matrix.column_ids))
    extra = {"mean_model_size": float(result.inclusion.sum())}
    return [run_dir.chain_file("stage2", 0), run_dir.trace_file("stage2", 0), run_dir.regression], extra


def stage_predict(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    matrix = _design(run_dir)
    data = _responses(run_dir)
    samples = [RegressionSample.model_validate(r) for r in read_ndjson(run_dir.chain_file("stage2", 0))]
    test = np.asarray(data.test_idx, dtype=np.int64)
    columns = [SUBJECT_COLUMN, "mean", "lower", "upper", "y"]
    if test.size == 0:
        logger.warning("No test subjects; predictions.csv is empty")
        write_csv(run_dir.predictions, pd.DataFrame(columns=columns))
        return [run_dir.predictions], {"test": 0}

    latent_test = None
    if RepresentativeMode(config.rep_mode) == RepresentativeMode.LATENT_VECTOR:
        alloc = _allocation(run_dir)
        v = _configuration(run_dir, alloc).v.astype(np.float64)
        if v.shape[0] == matrix.n:
            latent_test = v[test]
        else:
            train = np.asarray(data.train_idx, dtype=np.int64)
            latent_test = nearest_member_latent(matrix.bits, test, train, alloc, v)
    summary = predict(samples, matrix.bits[test], substream(config.seed, "predict"), latent_test=latent_test)
    frame = pd.DataFrame({
        SUBJECT_COLUMN: [matrix.subject_ids[i] for i in test],
        "mean": summary.mean,
        "lower": summary.lower,
        "upper": summary.upper,
        "y": data.y_test if data.y_test is not None else np.nan,
    })
    write_csv(run_dir.predictions, frame[columns])
    return [run_dir.predictions], {"test": int(test.size)}


def stage_eval(config: RunConfig, run_dir: RunDirectory, progress: Progress) -> Tuple[List[Path], Dict]:
    matrix = _design(run_dir)
    pihat = read_cocluster(run_dir.cocluster)
    alloc = _allocation(run_dir)
    stage1 = read_stamp(run_dir, "stage1")
    trace = pd.concat(
        [read_csv(run_dir.trace_file("stage1", c)) for c in range(config.chains)], ignore_index=True
    )
    kept = trace[trace["kept"] == 1]
    fields: Dict = {
        "q_hat": alloc.q,
        "runtime_per_sweep": float(np.mean(stage1.extra["seconds_per_sweep"])),
        "identical_latent_bound": identical_latent_bound(alloc.q, matrix.n, float(kept["p_star"].mean())),
    }
    if np.isfinite(kept["d_log_odds"]).any():
        fields["logbf_lower_mean"], fields["logbf_lower_sd"] = logbf_lower_bound(kept["d_log_odds"])
    d_summary = d_posterior_summary(kept["d"])
    fields["d_ci"] = (d_summary["lo"], d_summary["hi"])
    fields["d_zero_prob"] = d_summary["zero_prob"]

    truth = TruthRecord.model_validate(read_json(Path(config.truth))) if config.truth else None
    if truth is not None and truth.labels is not None:
        fields["q0"] = truth.q0
        fields["tau_hat"] = tau_from_cocluster(pihat, truth.labels)
        fields["kmeans_tau"] = kmeans_baseline(matrix.bits, truth.q0, seed=config.seed, true_labels=truth.labels).tau

    if run_dir.chain_file("stage2", 0).exists() and read_stamp(run_dir, "stage2") is not None:
        samples = [RegressionSample.model_validate(r) for r in read_ndjson(run_dir.chain_file("stage2", 0))]
        gammas = np.array([s.gamma for s in samples])
        fields["model_size"] = float(gammas.sum(axis=1).mean())
        if truth is not None and truth.predictors:
            fields["tpr"], fields["tnr"] = tpr_tnr(gammas, alloc, truth.predictors)
        data = _responses(run_dir)
        if truth is not None and truth.predictors and data.y_test:
            fields["oracle_pct_mse_reduction"] = oracle_ols_reduction(matrix.bits, data, truth.predictors)
        if run_dir.predictions.exists() and data.y_test:
            predictions = read_csv(run_dir.predictions)
            if len(predictions):
                fields["pct_mse_reduction"] = pct_mse_reduction(
                    predictions["y"], predictions["mean"], float(np.mean(data.y_train))
                )

    report = EvalReport(**fields)
    write_json(run_dir.eval, report)
    logger.info("Evaluation: %s", report.model_dump(exclude_none=True))
    return [run_dir.eval], {}


STAGE_FUNCTIONS = {
    "ingest": stage_ingest,
    "stage1": stage_stage1,
    "ls_allocation": stage_ls_allocation,
    "stage1b": stage_stage1b,
    "ls_configuration": stage_ls_configuration,
    "stage2": stage_stage2,
    "predict": stage_predict,
    "eval": stage_eval,
}


def run_stage(stage: str, config: RunConfig, progress: Progress = None, force: bool = False) -> StageResult:
    """Run one stage unless a matching completion stamp says its outputs are current."""
    if stage not in STAGE_FUNCTIONS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(PIPELINE_STAGES)}")
    run_dir = RunDirectory(config.run_dir).ensure()
    write_json(run_dir.config, config)
    input_hash = stage_input_hash(stage, config, run_dir)

    stamp = read_stamp(run_dir, stage)
    if (
        not force
        and stamp is not None
        and stamp.input_hash == input_hash
        and all((run_dir.root / out).exists() for out in stamp.outputs)
    ):
        logger.info("✓ %s is up to date, skipping", stage)
        return StageResult(stage=stage, skipped=True, input_hash=input_hash, outputs=stamp.outputs)

    logger.info("🚀 Running %s", stage)
    started = time.perf_counter()
    outputs, extra = STAGE_FUNCTIONS[stage](config, run_dir, progress)
    wall = time.perf_counter() - started
    relative = _relative(run_dir, outputs)
    write_stamp(run_dir, StageStamp(
        stage=stage,
        input_hash=input_hash,
        config_hash=config.config_hash(),
        seed=config.seed,
        outputs=relative,
        wall_seconds=wall,
        extra=extra,
    ))
    logger.info("✓ %s finished in %.1fs", stage, wall)
    return StageResult(stage=stage, input_hash=input_hash, outputs=relative, wall_seconds=wall)


def run_pipeline(config: RunConfig, progress: Progress = None, force: bool = False) -> List[StageResult]:
    config.validate_paths()
    return [run_stage(stage, config, progress=progress, force=force) for stage in config.selected_stages()]


def read_new_subjects(path: Path, column_ids) -> Tuple[List[str], np.ndarray]:
    """Rows of a design CSV restricted to the run's retained columns (no constant-column filtering)."""
    frame = pd.read_csv(path, dtype={SUBJECT_COLUMN: str})
    subject_ids = frame.pop(SUBJECT_COLUMN).tolist() if SUBJECT_COLUMN in frame.columns else [
        f"new{i + 1}" for i in range(len(frame))
    ]
    missing = [c for c in column_ids if c not in frame.columns]
    if missing:
        raise DataError(f"{path} lacks {len(missing)} fitted columns, e.g. {missing[:3]}")
    bits = frame[list(column_ids)].to_numpy(dtype=np.int64)
    if not np.isin(bits, (0, 1)).all():
        raise DataError(f"{path}: entries must be 0 or 1")
    return subject_ids, bits.astype(np.uint8)


def predict_new_subjects(config: RunConfig, design_path: Path, out_path: Optional[Path] = None) -> Path:
    """Score subjects outside the fitted run against its stage 2 samples."""
    run_dir = RunDirectory(config.run_dir)
    if read_stamp(run_dir, "stage2") is None:
        raise DataError(f"{run_dir.root} has no completed stage 2")
    matrix = _design(run_dir)
    subject_ids, bits = read_new_subjects(Path(design_path), matrix.column_ids)
    samples = [RegressionSample.model_validate(r) for r in read_ndjson(run_dir.chain_file("stage2", 0))]
    latent_new = None
    if RepresentativeMode(config.rep_mode) == RepresentativeMode.LATENT_VECTOR:
        alloc = _allocation(run_dir)
        data = _responses(run_dir)
        v = _configuration(run_dir, alloc).v.astype(np.float64)
        train = np.asarray(data.train_idx, dtype=np.int64)
        latent_train = v[train] if v.shape[0] == matrix.n else v
        stacked = np.vstack([matrix.bits, bits])
        rows = np.arange(matrix.n, stacked.shape[0])
        latent_new = nearest_member_latent(stacked, rows, train, alloc, latent_train)
    summary = predict(samples, bits, substream(config.seed, "predict", purpose="new"), latent_test=latent_new)
    out_path = Path(out_path or run_dir.root / "predictions_new.csv")
    write_csv(out_path, pd.DataFrame({
        SUBJECT_COLUMN: subject_ids, "mean": summary.mean, "lower": summary.lower, "upper": summary.upper,
    }))
    logger.info("Predicted %d new subjects into %s", len(subject_ids), out_path)
    return out_path
