import math
import os
import re

import pytest

from cellprog.errors import NonFiniteValue, ValidationError
from cellprog.plotting import Panel, PlotStyle, emit_svg_panels, emit_svg_plot, loss_series, plot_loss_traces, plot_trend


def series_ids(path):
    with open(path, encoding="utf-8") as f:
        return set(re.findall(r'id="(series-\d+)"', f.read()))


def test_one_line_per_series(tmp_path):
    path = emit_svg_plot({"a": ([0, 1, 2], [1.0, 2.0, 1.5]), "b": ([0, 1], [0.5, 0.7])},
                         os.path.join(tmp_path, "plots", "two.svg"), PlotStyle(title="two"))
    assert series_ids(path) == {"series-0", "series-1"}


def test_panel_ids_are_numbered_across_panels(tmp_path):
    panels = [Panel({"a": ([0, 1], [1, 2])}), Panel({"b": ([0, 1], [3, 4]), "c": ([0, 1], [5, 6])})]
    path = emit_svg_panels(panels, os.path.join(tmp_path, "panels.svg"), title="stack")
    assert series_ids(path) == {"series-0", "series-1", "series-2"}


def test_identical_input_gives_identical_bytes(tmp_path):
    series = {"x": ([3.0, 3.1, 3.2], [0.1, 0.9, 0.2])}
    first = emit_svg_plot(series, os.path.join(tmp_path, "a.svg"))
    second = emit_svg_plot(series, os.path.join(tmp_path, "b.svg"))
    with open(first, "rb") as f1, open(second, "rb") as f2:
        assert f1.read() == f2.read()


def test_non_finite_value_writes_nothing(tmp_path):
    path = os.path.join(tmp_path, "bad.svg")
    with pytest.raises(NonFiniteValue):
        emit_svg_plot({"x": ([0, 1], [1.0, math.nan])}, path)
    assert not os.path.exists(path)


def test_empty_and_ragged_series():
    with pytest.raises(ValidationError):
        emit_svg_plot({}, "unused.svg")
    with pytest.raises(ValidationError):
        emit_svg_plot({"x": ([0, 1, 2], [1.0])}, "unused.svg")
    with pytest.raises(ValidationError):
        emit_svg_panels([], "unused.svg")


def test_loss_series_drops_missing_test_loss():
    series = loss_series([1.0, 0.5, 0.25], [math.nan, math.nan, math.nan], prefix="EkfCnn ")
    assert list(series) == ["EkfCnn train"]
    assert series["EkfCnn train"] == ([1, 2, 3], [1.0, 0.5, 0.25])
    series = loss_series([1.0, 0.5], [0.9, 0.6])
    assert series["test"] == ([1, 2], [0.9, 0.6])


def test_loss_traces_skip_untrained_regimes(tmp_path):
    traces = {"0.2C": ([0.4, 0.2], [0.5, 0.3]), "0.5C": ([], [])}
    path = plot_loss_traces(traces, os.path.join(tmp_path, "loss.svg"))
    assert series_ids(path) == {"series-0", "series-1"}


def test_trend_plot_has_four_panels(tmp_path):
    points = [
        {"c_rate": c, "position_v": 3.3 + 0.1 * c, "height": 40.0 - c, "area_ah": 1.0, "width_v": 0.02 * c}
        for c in (0.2, 0.5, 1.0)
    ]
    path = plot_trend(points, os.path.join(tmp_path, "trend.svg"), title="LFP CHG peak A")
    assert series_ids(path) == {f"series-{i}" for i in range(4)}
