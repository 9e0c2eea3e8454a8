import asyncio
import glob
import logging
import os
from typing import TYPE_CHECKING, Dict, List, Tuple

import pandas as pd

from ..config import MODELS_SUBDIR, PLOTS_SUBDIR, REPORTS_SUBDIR, TRAIN_EVAL_MODES
from ..core import cell_spec
from ..errors import InvalidPath, ValidationError
from ..nn import NetworkParams, load_checkpoint, save_checkpoint
from ..plotting import plot_loss_traces
from ..train import (
    GridResult,
    NormalizerStats,
    TrainReport,
    build_feature_rows,
    compare_variants,
    evaluate_model,
    grid_configs,
    grid_result,
    rank_results,
    split_70_30,
    split_regimes,
    train_per_regime,
)
from ..utils.state import write_json_atomic
from .base import StageContext, StageWorker, read_cycler_files, resolve_inputs

if TYPE_CHECKING:
    from ..main import RunConfig

logger = logging.getLogger('training_worker')

TrainResults = Dict[str, Tuple[NetworkParams, TrainReport]]


def write_loss_csv(report: TrainReport, path: str) -> str:
    """epoch,train_loss,test_loss with exact float reprs"""
    frame = pd.DataFrame({
        "epoch": range(1, len(report.train_loss) + 1),
        "train_loss": [repr(float(v)) for v in report.train_loss],
        "test_loss": [repr(float(v)) for v in report.test_loss],
    })
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


class TrainingWorker(StageWorker):
    """Trains, evaluates and grid-searches the capacity models"""

    stages = {"train": "train", "eval": "evaluate", "grid": "grid"}

    def _save_results(self, variant: str, results: TrainResults, ctx: StageContext) -> None:
        for regime, (params, report) in results.items():
            extra = {
                "regime": regime,
                "config": report.config,
                "feature_stats": report.feature_stats.to_dict(),
                "target_stats": report.target_stats.to_dict(),
            }
            save_checkpoint(ctx.wrote(ctx.path(MODELS_SUBDIR, variant, f"{regime}.npz")),
                            params, seed=report.config["seed"], extra=extra)
            write_loss_csv(report, ctx.wrote(ctx.path(REPORTS_SUBDIR, f"loss_{variant}_{regime}.csv")))

        write_json_atomic(ctx.wrote(ctx.path(REPORTS_SUBDIR, f"train_{variant}.json")),
                          {regime: report.to_dict() for regime, (_, report) in results.items()})
        traces = {regime: (report.train_loss, report.test_loss) for regime, (_, report) in results.items()}
        if any(len(train) for train, _ in traces.values()):
            plot_loss_traces(traces, ctx.wrote(ctx.path(PLOTS_SUBDIR, f"loss_{variant}.svg")),
                             title=f"{variant} training and testing loss")

    async def train(self, config: "RunConfig", ctx: StageContext) -> None:
        dataset = read_cycler_files(resolve_inputs(config), cell_spec(config.chemistry), ctx)
        train_config = config.train_config()
        if config.compare:
            by_variant = await asyncio.to_thread(compare_variants, dataset, train_config)
        else:
            by_variant = {
                train_config.model_variant.value: await asyncio.to_thread(train_per_regime, dataset, train_config)
            }
        await self.update_status("train", "processing", 90)
        for variant, results in by_variant.items():
            self._save_results(variant, results, ctx)

    async def evaluate(self, config: "RunConfig", ctx: StageContext) -> None:
        dataset = read_cycler_files(resolve_inputs(config), cell_spec(config.chemistry), ctx)
        variant = config.train.model_variant.value
        model_dir = config.models or os.path.join(config.out, MODELS_SUBDIR, variant)
        checkpoints = sorted(glob.glob(os.path.join(model_dir, "*.npz")))
        if not checkpoints:
            raise InvalidPath(f"No checkpoints found in {model_dir}", path=model_dir)

        evaluation = {}
        for path in checkpoints:
            params, _, header = load_checkpoint(ctx.read(path))
            extra = header["extra"]
            regime = extra["regime"]
            trained_with = extra["config"]
            regimes = split_regimes(dataset, per_c_rate=trained_with["per_c_rate"])
            if regime not in regimes:
                raise ValidationError(f"Checkpoint regime {regime} has no records in the input")
            _, test_records = split_70_30(regimes[regime])
            rows = build_feature_rows(test_records, trained_with["row_stride"])
            feature_stats = NormalizerStats.from_dict(extra["feature_stats"])
            target_stats = NormalizerStats.from_dict(extra["target_stats"])

            scores = {}
            for mode in TRAIN_EVAL_MODES:
                result = await asyncio.to_thread(evaluate_model, params, feature_stats, target_stats, rows,
                                                 trained_with["window_len"], mode)
                scores[mode] = {"mse": result.mse, "mae": result.mae, "rmse": result.rmse,
                                "n_windows": int(len(result.truth))}
            evaluation[regime] = scores
            logger.info(f"Evaluated {regime}: teacher-forced MSE {scores['teacher_forced']['mse']:.3e}, "
                        f"autoregressive MSE {scores['autoregressive']['mse']:.3e}")

        write_json_atomic(ctx.wrote(ctx.path(REPORTS_SUBDIR, f"eval_{variant}.json")), evaluation)

    async def grid(self, config: "RunConfig", ctx: StageContext) -> None:
        dataset = read_cycler_files(resolve_inputs(config), cell_spec(config.chemistry), ctx)
        configs = grid_configs(config.train_config(), config.grid.batch_sizes,
                               config.grid.epochs, config.grid.learning_rates)
        semaphore = asyncio.Semaphore(config.grid.max_workers)
        finished = 0

        async def run_one(train_config) -> GridResult:
            nonlocal finished
            async with semaphore:
                logger.info(f"Grid run started: {train_config.key}")
                results = await asyncio.to_thread(train_per_regime, dataset, train_config)
            finished += 1
            await self.update_status("grid", "processing", int(100 * finished / (len(configs) + 1)))
            return grid_result(train_config, results)

        ranked: List[GridResult] = rank_results(await asyncio.gather(*(run_one(c) for c in configs)))
        write_json_atomic(ctx.wrote(ctx.path(REPORTS_SUBDIR, "grid.json")), [
            {
                "rank": rank,
                "key": result.config.key,
                "config": result.config.model_dump(mode="json"),
                "test_mse": result.test_mse,
                "regimes": {regime: report.mse for regime, report in sorted(result.reports.items())},
            }
            for rank, result in enumerate(ranked, start=1)
        ])
        best = ranked[0]
        logger.info(f"Best grid point {best.config.key}: mean test MSE {best.test_mse:.3e}")
