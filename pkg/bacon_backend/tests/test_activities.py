import asyncio

import pytest
from temporalio.exceptions import ApplicationError
from temporalio.testing import ActivityEnvironment

from activities.stage_activities import PipelineActivities
from config_run import RunConfig
from shared.errors import NON_RETRYABLE_ERROR_TYPES
from shared.models import StageRequest
from synth.generators import generate_dataset
from worker_local import main as worker_main


@pytest.fixture
def design_config(tmp_path):
    paths = generate_dataset("bacon", {"n": 30, "p": 16}, seed=5, out_dir=tmp_path / "sim")
    config = RunConfig(
        input=str(paths["design"]), truth=str(paths["truth"]), run_dir=str(tmp_path / "run"),
        burn_in=5, kept=10, thin=1, log_every=1000,
    )
    return config.model_dump(mode="json")


def test_stage_runs_inside_activity(design_config):
    env = ActivityEnvironment()
    beats = []
    env.on_heartbeat = lambda *details: beats.append(details)
    activities = PipelineActivities(heartbeat_interval=0.0)

    for stage in ("ingest", "stage1"):
        result = env.run(activities.run_pipeline_stage, StageRequest(stage=stage, config=design_config))
        assert result.stage == stage and not result.skipped
    assert beats and beats[-1][0]["stage"].startswith("stage1")

    again = env.run(activities.run_pipeline_stage, StageRequest(stage="stage1", config=design_config))
    assert again.skipped


def test_pipeline_errors_become_non_retryable(design_config):
    env = ActivityEnvironment()
    with pytest.raises(ApplicationError) as info:
        env.run(PipelineActivities().run_pipeline_stage, StageRequest(stage="stage2", config=design_config))
    assert info.value.type == "DataError"
    assert info.value.non_retryable
    assert info.value.type in NON_RETRYABLE_ERROR_TYPES

    with pytest.raises(ApplicationError) as info:
        env.run(PipelineActivities().run_pipeline_stage, StageRequest(stage="stage7", config=design_config))
    assert info.value.type == "ConfigError"


def test_worker_exits_with_config_code_before_connecting(tmp_path):
    bad = tmp_path / "run.env"
    bad.write_text("r_floor=0.3\n")
    assert asyncio.run(worker_main(str(bad))) == 2
    assert asyncio.run(worker_main(str(tmp_path / "missing.env"))) == 2
