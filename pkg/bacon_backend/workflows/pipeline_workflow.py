from datetime import timedelta
from typing import List, Optional

from temporalio import workflow
from temporalio.common import RetryPolicy

with workflow.unsafe.imports_passed_through():
    from activities.stage_activities import PipelineActivities
    from shared.errors import NON_RETRYABLE_ERROR_TYPES
    from shared.models import PipelineRequest, PipelineResult, StageRequest, StageResult


@workflow.defn
class BaconPipelineWorkflow:
    def __init__(self) -> None:
        self.completed: List[StageResult] = []
        self.current_stage: Optional[str] = None
        self.cancel_requested: bool = False

    @workflow.run
    async def run(self, request: PipelineRequest) -> PipelineResult:
        for stage in request.stages:
            if self.cancel_requested:
                workflow.logger.info(f"Cancel requested - stopping before {stage}")
                break
            self.current_stage = stage
            workflow.logger.info(f"Starting stage {stage}")

            # Long chains report liveness through heartbeats
            result = await workflow.execute_activity_method(
                PipelineActivities.run_pipeline_stage,
                StageRequest(stage=stage, config=request.config),
                start_to_close_timeout=timedelta(hours=12),
                heartbeat_timeout=timedelta(minutes=5),
                retry_policy=RetryPolicy(
                    initial_interval=timedelta(seconds=1),
                    maximum_interval=timedelta(seconds=30),
                    maximum_attempts=3,
                    backoff_coefficient=2.0,
                    non_retryable_error_types=NON_RETRYABLE_ERROR_TYPES,
                ),
            )
            self.completed.append(result)
            workflow.logger.info(f"Stage {stage} {'skipped' if result.skipped else 'completed'}")

        self.current_stage = None
        return PipelineResult(
            run_dir=str(request.config.get("run_dir", "")),
            results=self.completed,
            cancelled=self.cancel_requested,
        )

    @workflow.query
    def get_progress(self) -> dict:
        return {
            "current_stage": self.current_stage,
            "completed": [r.stage for r in self.completed],
            "cancel_requested": self.cancel_requested,
        }

    @workflow.signal
    async def cancel_run(self) -> None:
        self.cancel_requested = True
