"""
Differential capacity (dQ/dV) of resampled half-cycle curves and
Savitzky-Golay smoothing.
"""
import logging
import os
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.signal import savgol_coeffs

from .config import RESAMPLE_POINTS, SMOOTHING_POLY_ORDER, SMOOTHING_WINDOW
from .core import HalfCycleCurve, Step, resample_uniform
from .errors import BadWindow, NonMonotoneVoltage, ValidationError

logger = logging.getLogger(__name__)

GRID_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class DqDvCurve:
    """dQ/dV on an ascending, uniform voltage grid"""
    voltage_v: np.ndarray
    dqdv_ah_per_v: np.ndarray
    source: Tuple[str, int, Step, float]
    smoothed: bool = False

    def __post_init__(self):
        voltage = np.array(self.voltage_v, dtype=np.float64)
        values = np.array(self.dqdv_ah_per_v, dtype=np.float64)
        if voltage.ndim != 1 or voltage.shape != values.shape:
            raise ValidationError("voltage_v and dqdv_ah_per_v must be 1-D arrays of equal length")
        if len(voltage) > 2:
            spacing = np.diff(voltage)
            if not np.allclose(spacing, spacing[0], rtol=GRID_RTOL, atol=0.0):
                raise ValidationError("dQ/dV grid is not uniform")
        voltage.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "voltage_v", voltage)
        object.__setattr__(self, "dqdv_ah_per_v", values)

    def __len__(self) -> int:
        return len(self.voltage_v)

    @property
    def cell_id(self) -> str:
        return self.source[0]

    @property
    def cycle(self) -> int:
        return self.source[1]

    @property
    def step(self) -> Step:
        return self.source[2]

    @property
    def c_rate(self) -> float:
        return self.source[3]

    @property
    def grid_step_v(self) -> float:
        return float(self.voltage_v[1] - self.voltage_v[0])

    def scaled(self, factor: float) -> "DqDvCurve":
        return replace(self, dqdv_ah_per_v=self.dqdv_ah_per_v * factor)


def compute_dqdv(curve: HalfCycleCurve) -> DqDvCurve:
    """Forward difference (Q[k+1] - Q[k]) / (V[k+1] - V[k]) at the left node.

    Discharge curves are taken in ascending-voltage order with absolute
    capacity increments, so their peaks are positive too.
    """
    voltage = np.asarray(curve.voltage_v, dtype=np.float64)
    capacity = np.asarray(curve.capacity_ah, dtype=np.float64)
    if curve.step is Step.DISCHARGE:
        voltage, capacity = voltage[::-1], capacity[::-1]

    d_v = np.diff(voltage)
    if np.any(d_v <= 0):
        raise NonMonotoneVoltage(
            f"Voltage not strictly monotone for {curve.cell_id} cycle {curve.cycle} {curve.step.value}"
        )
    d_q = np.diff(capacity)
    if curve.step is Step.DISCHARGE:
        d_q = np.abs(d_q)

    return DqDvCurve(
        voltage_v=voltage[:-1],
        dqdv_ah_per_v=d_q / d_v,
        source=(curve.cell_id, curve.cycle, curve.step, curve.c_rate),
    )


@lru_cache(maxsize=None)
def _kernel(half_width: int, poly_order: int) -> np.ndarray:
    return savgol_coeffs(2 * half_width + 1, min(poly_order, 2 * half_width), use="dot")


def smooth(curve: DqDvCurve, window: int = SMOOTHING_WINDOW,
           poly_order: int = SMOOTHING_POLY_ORDER) -> DqDvCurve:
    """Savitzky-Golay smoothing; near the ends the window shrinks symmetrically.

    A point i uses half-width min(window // 2, i, n - 1 - i) and polynomial
    order min(poly_order, 2 * half-width), so the endpoints pass through
    unchanged and any polynomial of degree <= poly_order is reproduced.
    """
    if window < 3 or window % 2 == 0:
        raise BadWindow(f"Smoothing window must be odd and >= 3, got {window}")
    if not 0 <= poly_order < window:
        raise BadWindow(f"poly_order must be in [0, {window}), got {poly_order}")

    values = curve.dqdv_ah_per_v
    n = len(values)
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = values[i] if h == 0 else _kernel(h, poly_order) @ values[i - h:i + h + 1]
    return replace(curve, dqdv_ah_per_v=out, smoothed=True)


def analyze_curve(curve: HalfCycleCurve, n_points: int = RESAMPLE_POINTS,
                  window: int = SMOOTHING_WINDOW, poly_order: int = SMOOTHING_POLY_ORDER) -> DqDvCurve:
    """resample_uniform -> compute_dqdv -> smooth"""
    return smooth(compute_dqdv(resample_uniform(curve, n_points)), window, poly_order)


def integrate(curve: DqDvCurve) -> float:
    """Trapezoidal integral of dQ/dV over the curve's grid, in Ah"""
    return float(trapezoid(curve.dqdv_ah_per_v, curve.voltage_v))


def write_dqdv_csv(curve: DqDvCurve, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame({
        "voltage_v": [repr(float(v)) for v in curve.voltage_v],
        "dqdv_ah_per_v": [repr(float(v)) for v in curve.dqdv_ah_per_v],
    })
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.debug(f"Wrote dQ/dV curve ({len(curve)} points) to {path}")
    return path
