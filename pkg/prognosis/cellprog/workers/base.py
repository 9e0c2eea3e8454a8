import logging
import os
import traceback
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Any, Awaitable, Callable, Dict, List, Optional, Sequence

from ..config import DATA_SUBDIR
from ..core import CellSpec
from ..errors import InvalidPath, ValidationError
from ..ingest import Dataset, build_dataset, merge_datasets, parse_cycler_csv
from ..utils.state import RunState
from ..utils.validators import validate_cycler_csv

if TYPE_CHECKING:
    from ..main import RunConfig

logger = logging.getLogger('stage_worker')

# First existing file wins when a stage is run without --input
DEFAULT_INPUTS = ("denoised.csv", "ingested.csv", "synth.csv")

StageHandler = Callable[["RunConfig", "StageContext"], Awaitable[None]]


class StageContext:
    """Inputs read and artifacts written by one stage run"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.inputs: List[str] = []
        self.outputs: List[str] = []

    def path(self, *parts: str) -> str:
        path = os.path.join(self.output_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def wrote(self, path: str) -> str:
        self.outputs.append(path)
        return path

    def read(self, path: str) -> str:
        self.inputs.append(path)
        return path


def resolve_inputs(config: "RunConfig", candidates: Sequence[str] = DEFAULT_INPUTS) -> List[str]:
    """Explicit --input paths, else the first pipeline CSV found under <out>/data"""
    if config.input:
        return list(config.input)
    for name in candidates:
        path = os.path.join(config.out, DATA_SUBDIR, name)
        if os.path.exists(path):
            return [path]
    if not candidates:
        raise InvalidPath("No input files given (use --input)")
    raise InvalidPath(
        f"No input given and none of {', '.join(candidates)} found under {os.path.join(config.out, DATA_SUBDIR)}",
        path=os.path.join(config.out, DATA_SUBDIR),
    )


def read_cycler_files(paths: Sequence[str], spec: CellSpec, ctx: Optional[StageContext] = None) -> Dataset:
    """Validate, parse and merge cycler exports into one dataset"""
    parts = []
    for path in paths:
        is_valid, error_message = validate_cycler_csv(path)
        if not is_valid:
            raise InvalidPath(f"Invalid cycler file: {error_message}", path=path)
        records, report = parse_cycler_csv(path, spec)
        if report.skipped:
            logger.warning(f"{report.source}: skipped {report.skipped} of {report.rows_read} rows")
        parts.append(build_dataset(records, [report.source]))
        if ctx is not None:
            ctx.read(path)
    return merge_datasets(parts)


class StageWorker:
    """Runs named pipeline stages and records their status in the run state"""

    stages: Dict[str, str] = {}

    def __init__(self, output_dir: str, state: Optional[RunState] = None):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)
        self.state = state if state is not None else RunState(output_dir)
        self.logger = logging.getLogger(type(self).__name__)

    async def update_status(self, stage: str, status: str, progress: int = 0, error: Optional[str] = None):
        """Record a status transition for a stage"""
        try:
            self.state.update_state(stage, status, progress, error)
            if error:
                self.logger.error(f"Stage {stage} {status}: {error}")
            else:
                self.logger.info(f"Stage {stage} {status} ({progress}%)")
        except Exception as e:
            self.logger.error(f"Failed to update status: {str(e)}")

    def handler(self, stage: str) -> StageHandler:
        if stage not in self.stages:
            raise ValidationError(f"{type(self).__name__} does not run stage {stage!r}")
        return getattr(self, self.stages[stage])

    async def process_message(self, message: Dict[str, Any]) -> Dict[str, Any]:
        """Run one stage request ``{"stage": ..., "config": RunConfig}`` and describe the outcome"""
        stage = message.get("stage")
        ctx = StageContext(self.output_dir)
        result: Dict[str, Any] = {"stage": stage, "inputs": ctx.inputs, "outputs": ctx.outputs}
        try:
            if not stage or "config" not in message:
                raise ValidationError("Message must contain 'stage' and 'config'")
            run = self.handler(stage)
            await self.update_status(stage, "processing", 0)
            await run(message["config"], ctx)
            await self.update_status(stage, "completed", 100)
            result.update({"status": "completed", "error": None, "error_type": None, "path": None, "exit_code": 0})
        except ValidationError as e:
            await self.update_status(stage or "unknown", "failed", 0, str(e))
            result.update({"status": "failed", "error": str(e), "error_type": type(e).__name__,
                           "path": getattr(e, "path", None), "exit_code": 1})
        except Exception as e:
            self.logger.debug(traceback.format_exc())
            await self.update_status(stage or "unknown", "failed", 0, str(e))
            result.update({"status": "failed", "error": str(e), "error_type": type(e).__name__,
                           "path": getattr(e, "filename", None), "exit_code": 2})
        result["processed_at"] = datetime.now(timezone.utc).isoformat()
        return result
