#!/usr/bin/env python3

import asyncio
import concurrent.futures
import logging
import sys

from temporalio.client import Client
from temporalio.contrib.pydantic import pydantic_data_converter
from temporalio.worker import Worker

from activities.stage_activities import PipelineActivities
from config_run import load_config
from shared.errors import ConfigError
from workflows.pipeline_workflow import BaconPipelineWorkflow


async def main(config_path=None):
    """Host BaconPipelineWorkflow and the stage activity on the configured task queue.

    Returns the process exit code; an invalid run file exits like the CLI does.
    """
    try:
        config = load_config(config_path)
    except ConfigError as e:
        print(f"✗ {e}")
        return e.exit_code

    print("✓ Configuration loaded")

    # bacon_cli.py fit --temporal submits to this host and queue
    try:
        client = await Client.connect(
            f"{config.temporal_host}:{config.temporal_port}",
            data_converter=pydantic_data_converter,
        )
        print(f"✓ Connected to local Temporal server: {config.temporal_host}:{config.temporal_port}")
    except Exception as e:
        print(f"✗ Failed to connect to local Temporal server: {e}")
        print("Make sure to start the local server with: temporal server start-dev")
        return 1

    activities = PipelineActivities()

    # Stages are CPU-bound and synchronous, so they run on a thread pool
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=config.max_concurrent_activities
    ) as activity_executor:

        worker = Worker(
            client,
            task_queue=config.task_queue,
            workflows=[BaconPipelineWorkflow],
            activities=[activities.run_pipeline_stage],
            activity_executor=activity_executor,
            max_concurrent_activities=config.max_concurrent_activities,
        )

        print(f"✓ Worker created for task queue: {config.task_queue}")
        print(f"✓ Scaling config: {config.max_concurrent_activities} concurrent stages")
        print("🚀 Starting local worker...")

        try:
            await worker.run()
        except KeyboardInterrupt:
            print("\n🛑 Worker shutting down...")
        except Exception as e:
            print(f"✗ Worker error: {e}")
            return 1

    return 0


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logging.getLogger('temporalio').setLevel(logging.INFO)

    exit_code = asyncio.run(main(sys.argv[1] if len(sys.argv) > 1 else None))
    sys.exit(exit_code)
