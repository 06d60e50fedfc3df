import time

from temporalio import activity
from temporalio.exceptions import ApplicationError

from config_run import RunConfig
from pipeline import run_stage
from shared.errors import BaconError
from shared.models import StageRequest, StageResult

# Seconds between heartbeats sent from inside a running chain
HEARTBEAT_INTERVAL = 10.0


class PipelineActivities:
    """Runs pipeline stages on the worker's thread pool."""

    def __init__(self, heartbeat_interval: float = HEARTBEAT_INTERVAL) -> None:
        self.heartbeat_interval = heartbeat_interval

    def _progress(self):
        last = [0.0]

        def report(stage: str, sweep: int) -> None:
            now = time.monotonic()
            if now - last[0] >= self.heartbeat_interval:
                last[0] = now
                activity.heartbeat({"stage": stage, "sweep": sweep})

        return report

    @activity.defn
    def run_pipeline_stage(self, request: StageRequest) -> StageResult:
        try:
            config = RunConfig.model_validate(request.config)
            activity.logger.info(f"Running stage {request.stage} in {config.run_dir}")
            result = run_stage(request.stage, config, progress=self._progress())
            activity.logger.info(
                f"Stage {request.stage} {'skipped' if result.skipped else 'finished'} "
                f"({result.wall_seconds:.1f}s)"
            )
            return result
        except BaconError as e:
            activity.logger.error(f"Stage {request.stage} failed: {str(e)}")
            raise ApplicationError(str(e), type=type(e).__name__, non_retryable=True) from e
        except Exception as e:
            activity.logger.error(f"Error in stage {request.stage}: {str(e)}")
            raise
