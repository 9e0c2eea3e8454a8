import glob
import logging
import os
from dataclasses import asdict
from itertools import groupby
from typing import TYPE_CHECKING, Dict, List, Tuple

import pandas as pd

from ..config import DCA_SUBDIR, PEAKS_SUBDIR, PLOTS_SUBDIR, REPORT_SUBDIR, REPORTS_SUBDIR
from ..core import Step, cell_spec, delivered_capacity, segment_cycles, state_of_health
from ..dca import DqDvCurve, analyze_curve, write_dqdv_csv
from ..errors import InvalidPath, ValidationError
from ..peaks import PeakTrend, detect_peaks, peak_trends, write_trend_csv
from ..plotting import Panel, PlotStyle, emit_svg_panels, emit_svg_plot, loss_series, plot_loss_traces, plot_trend
from ..utils.state import read_json, write_json_atomic
from .base import StageContext, StageWorker, read_cycler_files, resolve_inputs

if TYPE_CHECKING:
    from ..main import RunConfig

logger = logging.getLogger('analysis_worker')

DCA_INDEX = "index.json"
CAPACITY_COLUMNS = ["cell_id", "cycle", "step", "c_rate", "capacity_ah", "soh"]


def curve_name(cell_id: str, cycle: int, step: str) -> str:
    return f"{cell_id}_cycle{cycle}_{step}"


def read_dqdv_csv(path: str, entry: dict) -> DqDvCurve:
    frame = pd.read_csv(path, dtype=float, float_precision="round_trip")
    source = (entry["cell_id"], int(entry["cycle"]), Step(entry["step"]), float(entry["c_rate"]))
    return DqDvCurve(frame["voltage_v"].to_numpy(), frame["dqdv_ah_per_v"].to_numpy(), source, smoothed=True)


def _read_index(output_dir: str) -> List[dict]:
    path = os.path.join(output_dir, DCA_SUBDIR, DCA_INDEX)
    if not os.path.exists(path):
        raise InvalidPath(f"No dQ/dV index at {path}; run dca first", path=path)
    return read_json(path)


class AnalysisWorker(StageWorker):
    """Differential capacity curves, peak reports and the final plots"""

    stages = {"dca": "dca", "peaks": "peaks", "report": "report"}

    async def dca(self, config: "RunConfig", ctx: StageContext) -> None:
        spec = cell_spec(config.chemistry)
        dataset = read_cycler_files(resolve_inputs(config), spec, ctx)
        segmented = segment_cycles(dataset.records(), spec.nominal_capacity_ah)
        if not segmented.curves:
            raise ValidationError("No charge or discharge curves in the input")
        await self.update_status("dca", "processing", 20)

        options = config.analysis
        index: List[dict] = []
        by_group: Dict[Tuple[str, float], List[Tuple[str, DqDvCurve]]] = {}
        for curve in segmented.curves:
            dqdv = analyze_curve(curve, options.n_points, options.window, options.poly_order)
            name = curve_name(curve.cell_id, curve.cycle, curve.step.value)
            write_dqdv_csv(dqdv, ctx.wrote(ctx.path(DCA_SUBDIR, f"{name}.csv")))
            capacity = delivered_capacity(curve)
            index.append({
                "name": name,
                "cell_id": curve.cell_id,
                "cycle": curve.cycle,
                "step": curve.step.value,
                "c_rate": curve.c_rate,
                "capacity_ah": capacity,
                "soh": state_of_health(capacity, spec),
                "file": f"{name}.csv",
            })
            by_group.setdefault((curve.step.value, curve.c_rate), []).append((f"{curve.cell_id} cycle {curve.cycle}", dqdv))

        await self.update_status("dca", "processing", 80)
        for (step, c_rate), members in sorted(by_group.items()):
            series = {label: (list(c.voltage_v), list(c.dqdv_ah_per_v)) for label, c in members}
            style = PlotStyle(title=f"{config.chemistry.value} {step} {c_rate:g}C", xlabel="Voltage (V)",
                              ylabel="dQ/dV (Ah/V)")
            emit_svg_plot(series, ctx.wrote(ctx.path(PLOTS_SUBDIR, f"dqdv_{step}_{c_rate:g}C.svg")), style)

        write_json_atomic(ctx.wrote(ctx.path(DCA_SUBDIR, DCA_INDEX)), index)
        if segmented.empty_steps:
            logger.warning(f"{len(segmented.empty_steps)} steps had too few samples for a curve")

    async def peaks(self, config: "RunConfig", ctx: StageContext) -> None:
        index = _read_index(self.output_dir)
        options = config.analysis
        curves: Dict[str, DqDvCurve] = {}
        for entry in index:
            curve = read_dqdv_csv(ctx.read(os.path.join(self.output_dir, DCA_SUBDIR, entry["file"])), entry)
            curves[entry["name"]] = curve
            report = detect_peaks(curve, options.fraction)
            write_json_atomic(ctx.wrote(ctx.path(PEAKS_SUBDIR, f"{entry['name']}.json")), report.to_dict())
        await self.update_status("peaks", "processing", 60)

        selected = sorted((e for e in index if e["cycle"] == options.cycle),
                          key=lambda e: (e["step"], e["c_rate"], e["cell_id"]))
        if not selected:
            raise ValidationError(f"No dQ/dV curves for cycle {options.cycle}")
        for step, entries in groupby(selected, key=lambda e: e["step"]):
            groups = []
            for c_rate, same_rate in groupby(entries, key=lambda e: e["c_rate"]):
                same_rate = list(same_rate)
                if len(same_rate) > 1:
                    logger.warning(f"{len(same_rate)} {step} curves at {c_rate}C; using {same_rate[0]['cell_id']}")
                groups.append((c_rate, curves[same_rate[0]["name"]]))
            trend = peak_trends(groups, config.chemistry.value, options.gate_v, options.fraction)
            write_json_atomic(ctx.wrote(ctx.path(PEAKS_SUBDIR, f"trend_{step}.json")), trend.to_dict())

    def _trend_outputs(self, ctx: StageContext) -> int:
        written = 0
        for path in sorted(glob.glob(os.path.join(self.output_dir, PEAKS_SUBDIR, "trend_*.json"))):
            trend = PeakTrend.from_dict(read_json(ctx.read(path)))
            for label in trend.labels():
                stem = f"trend_{trend.step}_{label}"
                write_trend_csv(trend, label, ctx.wrote(ctx.path(REPORT_SUBDIR, f"{stem}.csv")))
                plot_trend([asdict(p) for p in trend.series[label]],
                           ctx.wrote(ctx.path(REPORT_SUBDIR, f"{stem}.svg")),
                           title=f"{trend.chemistry} {trend.step} peak {label}")
                written += 1
        return written

    def _capacity_summary(self, ctx: StageContext) -> bool:
        path = os.path.join(self.output_dir, DCA_SUBDIR, DCA_INDEX)
        if not os.path.exists(path):
            return False
        frame = pd.DataFrame(read_json(ctx.read(path)), columns=CAPACITY_COLUMNS)
        frame = frame.sort_values(["step", "c_rate", "cell_id", "cycle"], kind="stable")
        frame.to_csv(ctx.wrote(ctx.path(REPORT_SUBDIR, "capacity_summary.csv")), index=False,
                     lineterminator="\n", float_format="%.10g")
        return True

    def _loss_outputs(self, ctx: StageContext) -> int:
        reports = {}
        for path in sorted(glob.glob(os.path.join(self.output_dir, REPORTS_SUBDIR, "train_*.json"))):
            variant = os.path.basename(path)[len("train_"):-len(".json")]
            reports[variant] = read_json(ctx.read(path))
            traces = {regime: (r["train_loss"], r["test_loss"]) for regime, r in reports[variant].items()}
            if any(len(train) for train, _ in traces.values()):
                plot_loss_traces(traces, ctx.wrote(ctx.path(REPORT_SUBDIR, f"loss_{variant}.svg")),
                                 title=f"{variant} training and testing loss")

        if len(reports) > 1:
            regimes = sorted(set.intersection(*(set(r) for r in reports.values())))
            panels = []
            for regime in regimes:
                series = {}
                for variant, by_regime in sorted(reports.items()):
                    r = by_regime[regime]
                    series.update(loss_series(r["train_loss"], r["test_loss"], prefix=f"{variant} "))
                if all(len(xs) for xs, _ in series.values()):
                    panels.append(Panel(series, PlotStyle(title=regime, xlabel="epoch",
                                                          ylabel="MSE (normalized)", log_y=True)))
            if panels:
                emit_svg_panels(panels, ctx.wrote(ctx.path(REPORT_SUBDIR, "loss_comparison.svg")),
                                title="Model comparison")
        return len(reports)

    async def report(self, config: "RunConfig", ctx: StageContext) -> None:
        trend_files = self._trend_outputs(ctx)
        await self.update_status("report", "processing", 40)
        has_capacity = self._capacity_summary(ctx)
        variants = self._loss_outputs(ctx)
        if not (trend_files or has_capacity or variants):
            raise ValidationError(f"Nothing to report under {self.output_dir}; run peaks, dca or train first")
        logger.info(f"Report: {trend_files} peak trend series, {variants} trained variants")
