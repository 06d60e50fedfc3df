#!/usr/bin/env python3
"""
Command-line entry point for the BaCon pipeline.

Usage:
    python bacon_cli.py synth --protocol bacon --out data/sim --param n=100 --param p=250
    python bacon_cli.py fit --input data/sim/design.csv --run_dir runs/sim --stages 1,eval
    python bacon_cli.py fit --config run.env --temporal
    python bacon_cli.py predict --run_dir runs/sim --subjects new_subjects.csv
    python bacon_cli.py eval --run_dir runs/sim --truth data/sim/truth.json
    python bacon_cli.py eval --replicates 10 --protocol bacon --run_dir runs/replicates
    python bacon_cli.py report --run_dir runs/sim
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from config_run import RunConfig, load_config
from evaluation.replicates import run_replicates, summarize_replicates
from pipeline import predict_new_subjects, run_pipeline, run_stage
from shared.artifacts import RunDirectory, read_csv, read_json, read_stamp
from shared.errors import BaconError, ConfigError
from shared.models import EvalReport, PipelineRequest, PipelineResult
from synth.generators import PROTOCOLS, generate_dataset

logger = logging.getLogger("bacon")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Flat key=value config file")
    parser.add_argument("--verbose", action="store_true", help="Debug logging, including temporalio")
    group = parser.add_argument_group("run configuration")
    for name, field in RunConfig.model_fields.items():
        group.add_argument(f"--{name}", dest=name, default=None, help=field.description)


def _parse_params(items: Optional[List[str]]) -> Dict[str, Any]:
    """key=value pairs; values are read as JSON when possible (numbers, lists), otherwise kept as text."""
    params: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            params[key.strip()] = raw
    return params


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {name: getattr(args, name) for name in RunConfig.model_fields}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bacon", description="Bayesian covariate clustering and selection")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Vectorize adjacency files or a design CSV into a run directory")
    _add_config_flags(ingest)

    synth = sub.add_parser("synth", help="Generate a synthetic dataset with its truth sidecar")
    synth.add_argument("--protocol", choices=PROTOCOLS, default="bacon")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--param", action="append", help="Generator parameter key=value (repeatable)")
    synth.add_argument("--verbose", action="store_true")

    fit = sub.add_parser("fit", help="Run the selected pipeline stages")
    _add_config_flags(fit)
    fit.add_argument("--temporal", action="store_true", help="Submit to a Temporal worker instead of running locally")
    fit.add_argument("--force", action="store_true", help="Rerun stages even when their stamps match")

    predict = sub.add_parser("predict", help="Predict test subjects, or new subjects with --subjects")
    _add_config_flags(predict)
    predict.add_argument("--subjects", help="Design CSV of new subjects over the fitted columns")
    predict.add_argument("--out", help="Output CSV for --subjects predictions")

    evaluate = sub.add_parser("eval", help="Score a run against truth, or drive simulation replicates")
    _add_config_flags(evaluate)
    evaluate.add_argument("--replicates", type=int, default=0, help="Number of generate-and-fit replicates")
    evaluate.add_argument("--protocol", choices=PROTOCOLS, default="bacon")
    evaluate.add_argument("--param", action="append", help="Generator parameter key=value (repeatable)")

    report = sub.add_parser("report", help="Summarize a completed run")
    _add_config_flags(report)
    report.add_argument("--top", type=int, default=10, help="Clusters to list")
    return parser


async def submit_to_temporal(config: RunConfig) -> PipelineResult:
    from temporalio.client import Client
    from temporalio.contrib.pydantic import pydantic_data_converter

    from workflows.pipeline_workflow import BaconPipelineWorkflow

    client = await Client.connect(
        f"{config.temporal_host}:{config.temporal_port}",
        data_converter=pydantic_data_converter,
    )
    workflow_id = f"bacon-{config.config_hash()[:16]}"
    print(f"✓ Submitting workflow {workflow_id} to {config.task_queue}")
    handle = await client.start_workflow(
        BaconPipelineWorkflow.run,
        PipelineRequest(config=config.model_dump(mode="json"), stages=config.selected_stages()),
        id=workflow_id,
        task_queue=config.task_queue,
    )
    return await handle.result()


def _print_results(results) -> None:
    for result in results:
        status = "skipped (up to date)" if result.skipped else f"done in {result.wall_seconds:.1f}s"
        print(f"✓ {result.stage}: {status}")


def cmd_ingest(args) -> int:
    config = _config(args).model_copy(update={"stages": "ingest"})
    config.validate_paths()
    _print_results([run_stage("ingest", config)])
    return 0


def cmd_synth(args) -> int:
    paths = generate_dataset(args.protocol, _parse_params(args.param), args.seed, Path(args.out))
    for name, path in paths.items():
        print(f"✓ {name}: {path}")
    return 0


def cmd_fit(args) -> int:
    config = _config(args)
    config.validate_paths()
    if args.temporal:
        result = asyncio.run(submit_to_temporal(config))
        _print_results(result.results)
        if result.cancelled:
            print("🛑 Run cancelled before all stages finished")
        return 0
    _print_results(run_pipeline(config, force=args.force))
    return 0


def cmd_predict(args) -> int:
    config = _config(args)
    if args.subjects:
        out = predict_new_subjects(config, Path(args.subjects), Path(args.out) if args.out else None)
        print(f"✓ Predictions written to {out}")
        return 0
    _print_results([run_stage("predict", config)])
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    if args.replicates > 0:
        frame = run_replicates(args.protocol, _parse_params(args.param), args.replicates, config)
        print(summarize_replicates(frame).to_string(index=False))
        print(f"✓ Replicate table written to {Path(config.run_dir) / 'replicates.csv'}")
        return 0
    _print_results([run_stage("eval", config)])
    report = EvalReport.model_validate(read_json(RunDirectory(config.run_dir).eval))
    for key, value in report.model_dump(exclude_none=True).items():
        print(f"  {key}: {value}")
    return 0


def cmd_report(args) -> int:
    config = _config(args)
    run_dir = RunDirectory(config.run_dir)
    alloc = read_json(run_dir.ls_allocation)
    print(f"Run: {run_dir.root}")
    print(f"  clusters (least-squares allocation): {alloc['q']}")
    stage1 = read_stamp(run_dir, "stage1")
    if stage1 is not None:
        traces = [read_csv(run_dir.trace_file("stage1", c)) for c in range(config.chains)]
        kept = pd.concat(traces, ignore_index=True).query("kept == 1")
        lo, hi = kept["d"].quantile([0.025, 0.975])
        print(f"  discount d: mean {kept['d'].mean():.3f}, 95% interval ({lo:.3f}, {hi:.3f}), "
              f"P(d = 0) = {(kept['d'] == 0).mean():.3f}")
    if run_dir.regression.exists():
        table = read_csv(run_dir.regression)
        top = table.drop_duplicates("cluster").head(args.top)["cluster"]
        print(f"  top {len(top)} clusters by inclusion probability:")
        for cluster in top:
            rows = table[table["cluster"] == cluster]
            members = ", ".join(f"{r.column_id} ({r.rep_prob:.2f})" for r in rows.head(5).itertuples())
            print(f"    cluster {cluster}: inclusion {rows['inclusion_prob'].iloc[0]:.3f}, "
                  f"size {rows['size'].iloc[0]}; {members}")
    if run_dir.eval.exists():
        report = EvalReport.model_validate(read_json(run_dir.eval))
        for key in ("pct_mse_reduction", "model_size", "tau_hat", "logbf_lower_mean"):
            value = getattr(report, key)
            if value is not None:
                print(f"  {key}: {value:.4f}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logging.getLogger('temporalio').setLevel(logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except BaconError as e:
        print(f"✗ {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n🛑 Interrupted")
        return 130
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
