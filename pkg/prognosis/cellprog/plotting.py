"""
Deterministic SVG plots (matplotlib, Agg backend).

Every data series is drawn as one line element tagged ``gid="series-<n>"``,
numbered across all panels of a figure. Identical input gives identical
bytes: the SVG hash salt is fixed and the date metadata is dropped.
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import NonFiniteValue, ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

SVG_HASH_SALT = "cellprog"

Series = Mapping[str, Tuple[Sequence[float], Sequence[float]]]


@dataclass(frozen=True)
class PlotStyle:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    markers: bool = False
    log_y: bool = False
    width_in: float = 6.4
    height_in: float = 4.0


@dataclass(frozen=True)
class Panel:
    series: Series
    style: PlotStyle = PlotStyle()


def _check_series(series: Series) -> None:
    if not series:
        raise ValidationError("Plot needs at least one series")
    for name, (xs, ys) in series.items():
        if len(xs) != len(ys) or len(xs) == 0:
            raise ValidationError(f"Series {name!r} must have equal, non-zero x and y lengths")
        if not all(math.isfinite(float(v)) for v in list(xs) + list(ys)):
            raise NonFiniteValue(f"Series {name!r} contains a non-finite value")


def emit_svg_panels(panels: Sequence[Panel], path: str, title: str = "") -> str:
    """Stack panels vertically into one standalone SVG file"""
    if not panels:
        raise ValidationError("Figure needs at least one panel")
    for panel in panels:
        _check_series(panel.series)

    width = max(p.style.width_in for p in panels)
    height = sum(p.style.height_in for p in panels)
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "path"}):
        fig, axes = plt.subplots(len(panels), 1, figsize=(width, height), squeeze=False)
        try:
            gid = 0
            for ax, panel in zip(axes[:, 0], panels):
                style = panel.style
                for name, (xs, ys) in panel.series.items():
                    ax.plot(list(xs), list(ys), label=name, gid=f"series-{gid}",
                            marker="o" if style.markers else None, linewidth=1.2)
                    gid += 1
                if style.log_y:
                    ax.set_yscale("log")
                ax.set_title(style.title)
                ax.set_xlabel(style.xlabel)
                ax.set_ylabel(style.ylabel)
                ax.grid(True, alpha=0.3)
                ax.legend(fontsize="small")
            if title:
                fig.suptitle(title)
            fig.tight_layout()
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.debug(f"Wrote plot {path}")
    return path


def emit_svg_plot(series: Series, path: str, style: Optional[PlotStyle] = None) -> str:
    """Single-axes SVG with a legend and one line per series"""
    return emit_svg_panels([Panel(series, style or PlotStyle())], path)


def loss_series(train_loss: Sequence[float], test_loss: Sequence[float], prefix: str = "") -> Dict[str, tuple]:
    epochs = list(range(1, len(train_loss) + 1))
    series = {f"{prefix}train": (epochs, list(train_loss))}
    finite_test = [(e, v) for e, v in zip(epochs, test_loss) if math.isfinite(v)]
    if finite_test:
        series[f"{prefix}test"] = ([e for e, _ in finite_test], [v for _, v in finite_test])
    return series


def plot_loss_traces(traces: Mapping[str, Tuple[Sequence[float], Sequence[float]]], path: str,
                     title: str = "Training and testing loss") -> str:
    """One panel per regime with train and test MSE against epoch"""
    panels: List[Panel] = [
        Panel(loss_series(train, test), PlotStyle(title=regime, xlabel="epoch", ylabel="MSE (normalized)", log_y=True))
        for regime, (train, test) in traces.items()
        if len(train)
    ]
    return emit_svg_panels(panels, path, title)


def plot_trend(points: Sequence[dict], path: str, title: str) -> str:
    """Position, height, area and width of one peak label against C-rate"""
    c_rates = [p["c_rate"] for p in points]
    panels = [
        Panel({key: (c_rates, [p[key] for p in points])},
              PlotStyle(xlabel="C-rate", ylabel=unit, markers=True, height_in=2.4))
        for key, unit in (("position_v", "V"), ("height", "Ah/V"), ("area_ah", "Ah"), ("width_v", "V"))
    ]
    return emit_svg_panels(panels, path, title)
