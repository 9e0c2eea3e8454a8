"""
dQ/dV peak identification: local maxima, topographic prominence, the
relative-prominence filter, peak measurement (position, height, width,
area) and peak-property trends across C-rates.
"""
import logging
import os
import string
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.signal import peak_prominences, peak_widths

from .config import PEAK_MATCH_GATE_V, PROMINENCE_FRACTION
from .dca import DqDvCurve
from .errors import CrossingNotFound, CurveTooShort, NotAMaximum, ValidationError

logger = logging.getLogger(__name__)

TREND_COLUMNS = ["c_rate", "position_v", "height", "area_ah", "width_v"]


@dataclass
class Peak:
    position_v: float
    height_ah_per_v: float
    prominence_ah_per_v: float
    width_v: float
    area_ah: float
    left_base_idx: int
    right_base_idx: int
    label: str = ""
    index: int = -1
    crossing_clamped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PeakReport:
    """Peaks found on one curve"""
    cell_id: str
    cycle: int
    step: str
    c_rate: float
    n_candidates: int
    peaks: List[Peak]

    @property
    def peak_count(self) -> int:
        return len(self.peaks)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["peak_count"] = self.peak_count
        return data


@dataclass
class TrendPoint:
    c_rate: float
    position_v: float
    height: float
    area_ah: float
    width_v: float


@dataclass
class TrendEvent:
    label: str
    c_rate: float
    kind: str  # "appeared" or "vanished"


@dataclass
class PeakTrend:
    chemistry: Optional[str]
    step: str
    series: Dict[str, List[TrendPoint]] = field(default_factory=dict)
    events: List[TrendEvent] = field(default_factory=list)
    peak_counts: List[Tuple[float, int]] = field(default_factory=list)

    def labels(self) -> List[str]:
        return sorted(self.series)

    def to_frame(self, label: str) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.series[label]], columns=TREND_COLUMNS)

    def to_dict(self) -> dict:
        return {
            "chemistry": self.chemistry,
            "step": self.step,
            "series": {k: [asdict(p) for p in v] for k, v in sorted(self.series.items())},
            "events": [asdict(e) for e in self.events],
            "peak_counts": [list(c) for c in self.peak_counts],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PeakTrend":
        return cls(
            chemistry=data.get("chemistry"),
            step=data["step"],
            series={k: [TrendPoint(**p) for p in v] for k, v in data.get("series", {}).items()},
            events=[TrendEvent(**e) for e in data.get("events", [])],
            peak_counts=[(float(c), int(n)) for c, n in data.get("peak_counts", [])],
        )


def label_for(k: int) -> str:
    """A, B, ..., Z, AA, AB, ..."""
    letters = string.ascii_uppercase
    label = ""
    k += 1
    while k:
        k, rem = divmod(k - 1, 26)
        label = letters[rem] + label
    return label


def find_local_maxima(curve: DqDvCurve) -> List[int]:
    """Interior i with v[i] > v[i-1] and v[i] >= v[i+1]; a plateau reports its leftmost index"""
    values = curve.dqdv_ah_per_v
    if len(values) < 3:
        raise CurveTooShort(f"Peak search needs at least 3 points, got {len(values)}")
    if not curve.smoothed:
        logger.warning(f"Searching peaks on an unsmoothed curve ({curve.cell_id} cycle {curve.cycle})")
    mid = values[1:-1]
    return (np.flatnonzero((mid > values[:-2]) & (mid >= values[2:])) + 1).tolist()


def _is_local_max(values: np.ndarray, idx: int) -> bool:
    return 0 < idx < len(values) - 1 and values[idx] > values[idx - 1] and values[idx] >= values[idx + 1]


def compute_prominence(curve: DqDvCurve, peak_idx: int) -> Tuple[float, int, int]:
    """Topographic prominence and the (left, right) base indices"""
    values = curve.dqdv_ah_per_v
    if not _is_local_max(values, peak_idx):
        raise NotAMaximum(f"Index {peak_idx} is not a local maximum")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        prominence, left, right = peak_prominences(values, [peak_idx])
    return float(prominence[0]), int(left[0]), int(right[0])


def _parabolic_apex(values: np.ndarray, idx: int) -> Tuple[float, float]:
    """Offset (in grid steps) and height of the parabola through idx-1, idx, idx+1"""
    y0, y1, y2 = values[idx - 1], values[idx], values[idx + 1]
    curvature = y0 - 2.0 * y1 + y2
    if curvature >= 0.0:
        return 0.0, float(y1)
    delta = float(np.clip(0.5 * (y0 - y2) / curvature, -0.5, 0.5))
    return delta, float(y1 - 0.25 * (y0 - y2) * delta)


def measure_peak(curve: DqDvCurve, peak_idx: int, bases: Tuple[float, int, int],
                 strict: bool = False) -> Peak:
    """Refined position and height, width at half prominence and the area under it.

    The half level sits midway between the refined apex height and the
    higher base, so height and width describe the same apex. Crossings are
    linearly interpolated on each side of the peak. A crossing that runs
    into its base is clamped there and flagged; with ``strict`` it raises
    CrossingNotFound instead.
    """
    values = curve.dqdv_ah_per_v
    voltage = curve.voltage_v
    prominence, left_base, right_base = bases
    if not _is_local_max(values, peak_idx):
        raise NotAMaximum(f"Index {peak_idx} is not a local maximum")

    delta, height = _parabolic_apex(values, peak_idx)
    step_v = curve.grid_step_v
    position = float(voltage[peak_idx] + delta * step_v)

    # peak_widths measures down from the sample value; this prominence puts
    # its half level at (refined height + base) / 2
    reference = float(values[peak_idx]) - prominence
    level = 0.5 * (height + reference)
    width_prominence = max(2.0 * (float(values[peak_idx]) - level), 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, crossing_height, left_ip, right_ip = peak_widths(
            values, [peak_idx], rel_height=0.5,
            prominence_data=(np.array([width_prominence]), np.array([left_base]), np.array([right_base])),
        )
    left_ip, right_ip, crossing_height = float(left_ip[0]), float(right_ip[0]), float(crossing_height[0])

    clamped = (left_ip <= left_base and values[left_base] > crossing_height) or \
              (right_ip >= right_base and values[right_base] > crossing_height) or prominence <= 0.0
    if clamped:
        message = f"Half-prominence crossing clamped to base for peak at {position:.4f} V"
        if strict:
            raise CrossingNotFound(message)
        logger.warning(message)

    grid = np.arange(len(values), dtype=np.float64)
    inner = grid[(grid > left_ip) & (grid < right_ip)].astype(int)
    xs = np.concatenate([[left_ip], inner, [right_ip]])
    ys = np.interp(xs, grid, values)
    area = float(trapezoid(ys, xs)) * step_v

    return Peak(
        position_v=position,
        height_ah_per_v=height,
        prominence_ah_per_v=prominence,
        width_v=(right_ip - left_ip) * step_v,
        area_ah=max(area, 0.0),
        left_base_idx=left_base,
        right_base_idx=right_base,
        index=int(peak_idx),
        crossing_clamped=bool(clamped),
    )


def filter_peaks(curve: DqDvCurve, candidates: Sequence[int],
                 fraction: float = PROMINENCE_FRACTION) -> List[Peak]:
    """Keep candidates whose prominence is at least ``fraction`` of the tallest candidate's height"""
    if not candidates:
        return []
    values = curve.dqdv_ah_per_v
    threshold = fraction * float(max(values[i] for i in candidates))
    kept = []
    for idx in candidates:
        bases = compute_prominence(curve, idx)
        if bases[0] >= threshold:
            kept.append(measure_peak(curve, idx, bases))
    kept.sort(key=lambda p: p.position_v)
    for k, peak in enumerate(kept):
        peak.label = label_for(k)
    logger.debug(f"Kept {len(kept)} of {len(candidates)} candidates (threshold {threshold:.4g})")
    return kept


def detect_peaks(curve: DqDvCurve, fraction: float = PROMINENCE_FRACTION) -> PeakReport:
    candidates = find_local_maxima(curve)
    return PeakReport(
        cell_id=curve.cell_id,
        cycle=curve.cycle,
        step=curve.step.value,
        c_rate=curve.c_rate,
        n_candidates=len(candidates),
        peaks=filter_peaks(curve, candidates, fraction),
    )


def _match(tracked: Dict[str, float], peaks: List[Peak], gate_v: float) -> Dict[str, Peak]:
    """One-to-one nearest-position matching, closest pairs first, within the gate"""
    pairs = sorted(
        (abs(p.position_v - pos), label, j)
        for label, pos in tracked.items()
        for j, p in enumerate(peaks)
    )
    matched: Dict[str, Peak] = {}
    used = set()
    for distance, label, j in pairs:
        if distance > gate_v or label in matched or j in used:
            continue
        matched[label] = peaks[j]
        used.add(j)
    return matched


def _estimate_drift(tracked: Dict[str, float], peaks: List[Peak], gate_v: float) -> float:
    """Common shift between consecutive rates.

    Every tracked/current pairing proposes a shift (plus zero); the one that
    matches the most peaks wins, then the smallest residual, then the
    smallest shift.
    """
    candidates = {0.0} | {p.position_v - pos for pos in tracked.values() for p in peaks}

    def score(drift: float) -> Tuple[int, float, float]:
        shifted = {k: v + drift for k, v in tracked.items()}
        matched = _match(shifted, peaks, gate_v)
        residual = sum(abs(p.position_v - shifted[k]) for k, p in matched.items())
        return -len(matched), round(residual, 12), abs(drift)

    return min(sorted(candidates), key=score)


def peak_trends(groups: Sequence[Tuple[float, DqDvCurve]], chemistry: Optional[str] = None,
                gate_v: float = PEAK_MATCH_GATE_V, fraction: float = PROMINENCE_FRACTION) -> PeakTrend:
    """Follow each peak across increasing C-rates.

    Labels come from the lowest-rate curve. Before matching, the common
    shift between consecutive rates is removed (see ``_estimate_drift``),
    then every tracked peak takes the nearest unclaimed peak within
    ``gate_v``. Unmatched peaks start new labels ("appeared"); tracked
    labels with no match are reported "vanished" at that rate.
    """
    ordered = sorted(groups, key=lambda g: g[0])
    rates = [c for c, _ in ordered]
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValidationError(f"C-rates must be distinct, got {rates}")
    steps = {curve.step for _, curve in ordered}
    if len(steps) > 1:
        raise ValidationError("Peak trends need curves of a single step type")
    if len(ordered) < 2:
        logger.warning("Peak trend over fewer than two C-rates")

    trend = PeakTrend(chemistry=chemistry, step=next(iter(steps)).value if steps else "")
    tracked: Dict[str, float] = {}
    next_label = 0

    for c_rate, curve in ordered:
        peaks = detect_peaks(curve, fraction).peaks
        trend.peak_counts.append((c_rate, len(peaks)))

        drift = _estimate_drift(tracked, peaks, gate_v) if tracked and peaks else 0.0
        matched = _match({k: v + drift for k, v in tracked.items()}, peaks, gate_v)

        for label in sorted(set(tracked) - set(matched)):
            trend.events.append(TrendEvent(label, c_rate, "vanished"))
            del tracked[label]
        claimed = {id(p) for p in matched.values()}
        for peak in sorted(peaks, key=lambda p: p.position_v):
            if id(peak) in claimed:
                continue
            label = label_for(next_label)
            next_label += 1
            matched[label] = peak
            if trend.peak_counts[0][0] != c_rate:
                trend.events.append(TrendEvent(label, c_rate, "appeared"))

        for label, peak in matched.items():
            peak.label = label
            tracked[label] = peak.position_v
            trend.series.setdefault(label, []).append(TrendPoint(
                c_rate=c_rate,
                position_v=peak.position_v,
                height=peak.height_ah_per_v,
                area_ah=peak.area_ah,
                width_v=peak.width_v,
            ))

    logger.info(f"Peak trend ({chemistry}, {trend.step}): {len(trend.series)} labels, "
                f"{len(trend.events)} appear/vanish events")
    return trend


def write_trend_csv(trend: PeakTrend, label: str, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    trend.to_frame(label).to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    return path
