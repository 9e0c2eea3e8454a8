"""
Domain types shared by every module, plus cycle segmentation and
uniform-voltage resampling of raw cycler records.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import groupby
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import PROTECTION_WINDOW_V, RESAMPLE_POINTS
from .errors import DegenerateSpan, ValidationError

logger = logging.getLogger(__name__)


class Step(str, Enum):
    CHARGE = "CHG"
    DISCHARGE = "DCH"
    REST = "REST"


class Chemistry(str, Enum):
    LINICOALO2 = "LiNiCoAlO2"
    LIFEPO4 = "LiFePO4"

    @classmethod
    def from_name(cls, name: str) -> "Chemistry":
        """Accept CLI-style names (nca, lnca, lifepo4, lfp) as well as enum values"""
        key = name.strip().lower()
        aliases = {
            "linicoalo2": cls.LINICOALO2, "nca": cls.LINICOALO2, "lnca": cls.LINICOALO2,
            "lifepo4": cls.LIFEPO4, "lfp": cls.LIFEPO4,
        }
        if key not in aliases:
            raise ValidationError(f"Unknown chemistry: {name}")
        return aliases[key]


@dataclass(frozen=True, slots=True)
class CycleRecord:
    """One timestamped sample of a cell under test. Positive current charges."""
    cell_id: str
    cycle: int
    step: Step
    time_s: float
    current_a: float
    voltage_v: float
    capacity_ah: float


@dataclass(frozen=True)
class CellSpec:
    chemistry: Chemistry
    nominal_capacity_ah: float
    nominal_voltage_v: float
    max_voltage_v: float
    min_voltage_v: float
    protection_window_v: Tuple[float, float] = PROTECTION_WINDOW_V

    def __post_init__(self):
        if not self.min_voltage_v < self.nominal_voltage_v < self.max_voltage_v:
            raise ValidationError(
                f"Voltage limits out of order: min={self.min_voltage_v} "
                f"nominal={self.nominal_voltage_v} max={self.max_voltage_v}"
            )
        if self.nominal_capacity_ah <= 0:
            raise ValidationError("nominal_capacity_ah must be positive")


_CELL_SPECS = {
    # Hongli A18650
    Chemistry.LINICOALO2: dict(nominal_capacity_ah=2.2, nominal_voltage_v=3.7,
                               max_voltage_v=4.2, min_voltage_v=2.5),
    # A123 ANR26650
    Chemistry.LIFEPO4: dict(nominal_capacity_ah=2.5, nominal_voltage_v=3.3,
                            max_voltage_v=3.6, min_voltage_v=2.5),
}


def cell_spec(chemistry: Chemistry) -> CellSpec:
    """Datasheet preset for a chemistry"""
    return CellSpec(chemistry=chemistry, **_CELL_SPECS[chemistry])


@dataclass(frozen=True, eq=False)
class HalfCycleCurve:
    """Capacity against voltage for one charge or discharge step.

    Voltage is strictly increasing for Charge and strictly decreasing for
    Discharge; both arrays are read-only.
    """
    cell_id: str
    cycle: int
    step: Step
    c_rate: float
    voltage_v: np.ndarray
    capacity_ah: np.ndarray

    def __post_init__(self):
        voltage = np.array(self.voltage_v, dtype=np.float64)
        capacity = np.array(self.capacity_ah, dtype=np.float64)
        if self.step is Step.REST:
            raise ValidationError("Rest steps do not form half-cycle curves")
        if voltage.ndim != 1 or voltage.shape != capacity.shape:
            raise ValidationError("voltage_v and capacity_ah must be 1-D arrays of equal length")
        if len(voltage) < 2:
            raise ValidationError("A half-cycle curve needs at least two points")
        steps = np.diff(voltage)
        monotone = np.all(steps > 0) if self.step is Step.CHARGE else np.all(steps < 0)
        if not monotone:
            raise ValidationError(
                f"Voltage not strictly monotone for {self.cell_id} cycle {self.cycle} {self.step.value}"
            )
        voltage.setflags(write=False)
        capacity.setflags(write=False)
        object.__setattr__(self, "voltage_v", voltage)
        object.__setattr__(self, "capacity_ah", capacity)

    def __len__(self) -> int:
        return len(self.voltage_v)

    @property
    def key(self) -> Tuple[str, int, Step]:
        return (self.cell_id, self.cycle, self.step)


class EmptyStepReport(NamedTuple):
    cell_id: str
    cycle: int
    step: Step
    n_samples: int


class SegmentResult(NamedTuple):
    curves: List[HalfCycleCurve]
    empty_steps: List[EmptyStepReport]


def _monotone_mask(voltage: np.ndarray, increasing: bool) -> np.ndarray:
    """Keep samples that strictly extend the running extremum; drop the rest"""
    keep = np.zeros(len(voltage), dtype=bool)
    if len(voltage) == 0:
        return keep
    extremum = voltage[0]
    keep[0] = True
    for i in range(1, len(voltage)):
        v = voltage[i]
        if (v > extremum) if increasing else (v < extremum):
            keep[i] = True
            extremum = v
    return keep


def segment_cycles(
    records: Sequence[CycleRecord],
    nominal_capacity_ah: Optional[float] = None,
) -> SegmentResult:
    """Group records into one curve per contiguous Charge or Discharge step.

    Rest steps are dropped. Samples that break strict voltage monotonicity
    against the running extremum are removed. Steps left with fewer than two
    samples are reported in ``empty_steps`` instead of raising.
    """
    curves: List[HalfCycleCurve] = []
    empty_steps: List[EmptyStepReport] = []

    for (cell_id, cycle, step), group in groupby(records, key=lambda r: (r.cell_id, r.cycle, r.step)):
        if step is Step.REST:
            continue
        rows = list(group)
        voltage = np.fromiter((r.voltage_v for r in rows), dtype=np.float64, count=len(rows))
        capacity = np.fromiter((r.capacity_ah for r in rows), dtype=np.float64, count=len(rows))
        keep = _monotone_mask(voltage, increasing=step is Step.CHARGE)
        dropped = len(rows) - int(keep.sum())
        if dropped:
            logger.debug(f"Dropped {dropped} non-monotone samples in {cell_id} cycle {cycle} {step.value}")

        if keep.sum() < 2:
            logger.warning(f"Skipping {cell_id} cycle {cycle} {step.value}: only {int(keep.sum())} usable samples")
            empty_steps.append(EmptyStepReport(cell_id, cycle, step, int(keep.sum())))
            continue

        if nominal_capacity_ah:
            current = np.abs([r.current_a for r in rows])
            c_rate = round(float(np.median(current)) / nominal_capacity_ah, 2)
        else:
            c_rate = 0.0

        curves.append(HalfCycleCurve(
            cell_id=cell_id,
            cycle=cycle,
            step=step,
            c_rate=c_rate,
            voltage_v=voltage[keep],
            capacity_ah=capacity[keep],
        ))

    if not curves:
        logger.warning(f"No half-cycle curves found ({len(empty_steps)} empty steps)")
    return SegmentResult(curves, empty_steps)


def curves_to_records(
    curves: Iterable[HalfCycleCurve],
    nominal_capacity_ah: float = 1.0,
    sample_period_s: float = 1.0,
) -> List[CycleRecord]:
    """Flatten curves back into records (one per curve point)"""
    records: List[CycleRecord] = []
    t = 0.0
    for curve in curves:
        amps = curve.c_rate * nominal_capacity_ah
        current = amps if curve.step is Step.CHARGE else -amps
        for v, q in zip(curve.voltage_v, curve.capacity_ah):
            records.append(CycleRecord(curve.cell_id, curve.cycle, curve.step, t, current, float(v), float(q)))
            t += sample_period_s
    return records


def resample_uniform(curve: HalfCycleCurve, n_points: int = RESAMPLE_POINTS) -> HalfCycleCurve:
    """Linearly interpolate capacity onto ``n_points`` evenly spaced voltages.

    The grid spans [min(V), max(V)] and keeps the curve's sweep direction,
    so both endpoints are reproduced exactly.
    """
    if n_points < 2:
        raise ValidationError("n_points must be at least 2")
    voltage = curve.voltage_v
    capacity = curve.capacity_ah
    if curve.step is Step.DISCHARGE:
        voltage, capacity = voltage[::-1], capacity[::-1]

    v_min, v_max = float(voltage[0]), float(voltage[-1])
    if v_max == v_min:
        raise DegenerateSpan(f"Zero voltage span for {curve.cell_id} cycle {curve.cycle}")

    grid = np.linspace(v_min, v_max, n_points)
    resampled = np.interp(grid, voltage, capacity)
    if curve.step is Step.DISCHARGE:
        grid, resampled = grid[::-1], resampled[::-1]

    return HalfCycleCurve(
        cell_id=curve.cell_id,
        cycle=curve.cycle,
        step=curve.step,
        c_rate=curve.c_rate,
        voltage_v=grid,
        capacity_ah=resampled,
    )


def delivered_capacity(curve: HalfCycleCurve) -> float:
    """Capacity swing of a half-cycle in Ah"""
    return float(abs(curve.capacity_ah[-1] - curve.capacity_ah[0]))


def state_of_health(capacity_ah: float, spec: CellSpec) -> float:
    """Delivered capacity as a fraction of the nominal rating"""
    return capacity_ah / spec.nominal_capacity_ah
