import asyncio
import logging
from dataclasses import asdict
from typing import TYPE_CHECKING

from ..config import DATA_SUBDIR
from ..core import cell_spec
from ..ekf import denoise_records
from ..ingest import export_cycler_csv
from ..synth import generate_protocol_run_with_truth, synth_config
from ..utils.state import write_json_atomic
from .base import StageContext, StageWorker, read_cycler_files, resolve_inputs

if TYPE_CHECKING:
    from ..main import RunConfig

logger = logging.getLogger('cycler_worker')


class CyclerWorker(StageWorker):
    """Produces cycler datasets: synthetic runs, ingested exports and denoised copies"""

    stages = {"synth": "synthesize", "ingest": "ingest", "denoise": "denoise"}

    async def synthesize(self, config: "RunConfig", ctx: StageContext) -> None:
        options = config.synth
        cell = synth_config(
            config.chemistry,
            seed=config.seed,
            noise_sigma_v=options.noise_v,
            noise_sigma_a=options.noise_a,
            fade_per_cycle=options.fade_per_cycle,
            decimation=options.decimation,
        )
        protocol = [tuple(regime) for regime in options.protocol]
        dataset, truth = await asyncio.to_thread(generate_protocol_run_with_truth, cell, protocol, options.cycles)
        await self.update_status("synth", "processing", 60)

        export_cycler_csv(dataset.records(), ctx.wrote(ctx.path(DATA_SUBDIR, "synth.csv")))
        sidecar = {
            "chemistry": cell.chemistry.value,
            "seed": cell.seed,
            "cycles": options.cycles,
            "protocol": [list(regime) for regime in protocol],
            "noise_sigma_v": cell.noise_sigma_v,
            "noise_sigma_a": cell.noise_sigma_a,
            "fade_per_cycle": cell.fade_per_cycle,
            "half_cycles": [asdict(t) for t in truth],
        }
        write_json_atomic(ctx.wrote(ctx.path(DATA_SUBDIR, "synth_truth.json")), sidecar)
        logger.info(f"Synthesized {len(dataset)} records for {len(dataset.cells)} cells")

    async def ingest(self, config: "RunConfig", ctx: StageContext) -> None:
        # nothing to fall back to: ingest always reads explicit files
        paths = resolve_inputs(config, candidates=())
        dataset = read_cycler_files(paths, cell_spec(config.chemistry), ctx)
        await self.update_status("ingest", "processing", 70)
        export_cycler_csv(dataset.records(), ctx.wrote(ctx.path(DATA_SUBDIR, "ingested.csv")))
        write_json_atomic(ctx.wrote(ctx.path(DATA_SUBDIR, "ingest_report.json")), {
            "sources": dataset.provenance,
            "cells": {cell_id: len(rows) for cell_id, rows in dataset.cells.items()},
            "duplicates_dropped": dataset.duplicates_dropped,
        })

    async def denoise(self, config: "RunConfig", ctx: StageContext) -> None:
        paths = resolve_inputs(config, candidates=("ingested.csv", "synth.csv"))
        dataset = read_cycler_files(paths, cell_spec(config.chemistry), ctx)
        await self.update_status("denoise", "processing", 30)
        filtered, raw_current, raw_voltage = await asyncio.to_thread(
            denoise_records, dataset.records(), config.denoise.q, config.denoise.r
        )
        export_cycler_csv(
            filtered,
            ctx.wrote(ctx.path(DATA_SUBDIR, "denoised.csv")),
            extra_columns={"current_a_raw": raw_current, "voltage_v_raw": raw_voltage},
        )
