"""
Synthetic cell cycler with a known dQ/dV.

Each charge or discharge step has a differential capacity made of a flat
baseline plus Gaussian peaks, so Q(V) has a closed form through erf and
every downstream number can be checked against the construction. C-rate
polarization moves, shrinks and widens the peaks linearly in (c - 0.2);
capacity fades geometrically with the cycle number.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .config import (
    DEFAULT_PROTOCOL,
    DEFAULT_SEED,
    DISCHARGE_CUTOFF_V,
    INTER_CYCLE_REST_S,
    REST_PERIOD_S,
    SYNTH_DECIMATION,
    SYNTH_NOISE_A,
    SYNTH_NOISE_V,
    SYNTH_SAMPLE_HZ,
)
from .core import CellSpec, Chemistry, CycleRecord, HalfCycleCurve, Step, cell_spec, segment_cycles
from .errors import EmptyStep, PeakOutOfWindow, ValidationError
from .ingest import Dataset, build_dataset
from .utils.seeding import child_rng

logger = logging.getLogger(__name__)

REFERENCE_C_RATE = 0.2
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548
FINE_GRID_POINTS = 20001
SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


@dataclass(frozen=True)
class PeakSpec:
    center_v: float
    height_ah_per_v: float
    sigma_v: float

    def __post_init__(self):
        if self.sigma_v <= 0:
            raise ValidationError("sigma_v must be positive")
        if self.height_ah_per_v <= 0:
            raise ValidationError("height_ah_per_v must be positive")

    @property
    def fwhm_v(self) -> float:
        return self.sigma_v * FWHM_PER_SIGMA

    def density(self, v: np.ndarray) -> np.ndarray:
        return self.height_ah_per_v * np.exp(-0.5 * ((np.asarray(v) - self.center_v) / self.sigma_v) ** 2)

    def integral(self, lo: float, hi) -> np.ndarray:
        """Integral of the Gaussian from lo to hi (hi may be an array)"""
        scale = self.sigma_v * math.sqrt(2.0)
        return self.height_ah_per_v * self.sigma_v * SQRT_HALF_PI * (
            erf((np.asarray(hi) - self.center_v) / scale) - erf((lo - self.center_v) / scale)
        )


@dataclass(frozen=True)
class Polarization:
    """Per-C coefficients relative to the 0.2C reference.

    center: + shift_v_per_c * (c - 0.2) on charge, - on discharge;
    height, sigma and baseline: multiplied by 1 + k * (c - 0.2).
    """
    shift_v_per_c: float = 0.0
    height_per_c: float = 0.0
    width_per_c: float = 0.0
    baseline_per_c: float = 0.0


@dataclass(frozen=True)
class StepCalibration:
    """Voltage window (start, end) in sweep order, reference peaks and baseline"""
    window_v: Tuple[float, float]
    base_peaks: Tuple[PeakSpec, ...]
    polarization: Polarization
    baseline_ah_per_v: float

    @property
    def v_lo(self) -> float:
        return min(self.window_v)

    @property
    def v_hi(self) -> float:
        return max(self.window_v)


@dataclass(frozen=True)
class SynthCellConfig:
    chemistry: Chemistry
    spec: CellSpec
    charge: StepCalibration
    discharge: StepCalibration
    fade_per_cycle: float = 0.001
    noise_sigma_v: float = SYNTH_NOISE_V
    noise_sigma_a: float = SYNTH_NOISE_A
    seed: int = DEFAULT_SEED
    sample_hz: float = SYNTH_SAMPLE_HZ
    decimation: int = SYNTH_DECIMATION

    def __post_init__(self):
        if not 0.0 <= self.fade_per_cycle < 1.0:
            raise ValidationError("fade_per_cycle must be in [0, 1)")
        if self.noise_sigma_v < 0 or self.noise_sigma_a < 0:
            raise ValidationError("noise levels must be non-negative")
        if self.sample_hz <= 0 or self.decimation < 1:
            raise ValidationError("sample_hz must be positive and decimation >= 1")

    @property
    def base_peaks(self) -> Tuple[PeakSpec, ...]:
        return self.charge.base_peaks

    @property
    def sample_period_s(self) -> float:
        return self.decimation / self.sample_hz

    def calibration(self, step: Step) -> StepCalibration:
        if step is Step.CHARGE:
            return self.charge
        if step is Step.DISCHARGE:
            return self.discharge
        raise ValidationError("Rest steps have no dQ/dV calibration")

    def noiseless(self) -> "SynthCellConfig":
        return replace(self, noise_sigma_v=0.0, noise_sigma_a=0.0)


@dataclass(frozen=True)
class StepModel:
    """Effective dQ/dV of one half-cycle after polarization and fade"""
    step: Step
    c_rate: float
    window_v: Tuple[float, float]
    peaks: Tuple[PeakSpec, ...]
    baseline_ah_per_v: float

    def capacity_at(self, v) -> np.ndarray:
        """Charge passed since the start of the sweep when the voltage reaches v"""
        start = self.window_v[0]
        v = np.asarray(v, dtype=np.float64)
        if self.step is Step.CHARGE:
            q = self.baseline_ah_per_v * (v - start)
            for p in self.peaks:
                q = q + p.integral(start, v)
        else:
            q = self.baseline_ah_per_v * (start - v)
            for p in self.peaks:
                q = q - p.integral(start, v)
        return q

    @property
    def total_capacity_ah(self) -> float:
        return float(self.capacity_at(self.window_v[1]))

    def dqdv(self, v) -> np.ndarray:
        return self.baseline_ah_per_v + sum(p.density(v) for p in self.peaks)


@dataclass
class HalfCycleTruth:
    cell_id: str
    cycle: int
    step: str
    c_rate: float
    baseline_ah_per_v: float
    capacity_ah: float
    peaks: List[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def fit_two_point(c_lo: float, value_lo: float, c_hi: float, value_hi: float,
                  multiplicative: bool = True, c_ref: float = REFERENCE_C_RATE) -> Tuple[float, float]:
    """Coefficients of the line through two (C-rate, value) endpoints.

    Returns (value at c_ref, k). Multiplicative: value = v0 * (1 + k (c - c_ref));
    additive: value = v0 + k (c - c_ref).
    """
    if c_lo == c_hi:
        raise ValidationError("Two-point fit needs distinct C-rates")
    d_lo, d_hi = c_lo - c_ref, c_hi - c_ref
    if not multiplicative:
        k = (value_hi - value_lo) / (c_hi - c_lo)
        return value_lo - k * d_lo, k
    ratio = value_lo / value_hi
    k = (ratio - 1.0) / (d_lo - ratio * d_hi)
    return value_lo / (1.0 + k * d_lo), k


def _peaks_integral(peaks: Sequence[PeakSpec], polarization: Polarization, step: Step,
                    c_rate: float, window_v: Tuple[float, float]) -> float:
    bare = StepModel(step, c_rate, window_v, tuple(_polarize(peaks, polarization, step, c_rate)), 0.0)
    return bare.total_capacity_ah


def fit_baseline(peaks: Sequence[PeakSpec], polarization: Polarization, step: Step,
                 window_v: Tuple[float, float], c_lo: float, capacity_lo: float,
                 c_hi: float, capacity_hi: float) -> Tuple[float, float]:
    """Baseline (at 0.2C) and baseline_per_c that make a fresh cell deliver the target capacities"""
    span = abs(window_v[1] - window_v[0])
    b_lo = (capacity_lo - _peaks_integral(peaks, polarization, step, c_lo, window_v)) / span
    b_hi = (capacity_hi - _peaks_integral(peaks, polarization, step, c_hi, window_v)) / span
    if b_lo <= 0 or b_hi <= 0:
        raise ValidationError("Capacity targets are smaller than the peak area alone")
    return fit_two_point(c_lo, b_lo, c_hi, b_hi)


def _peak(center_v: float, height: float, fwhm_v: float) -> PeakSpec:
    return PeakSpec(center_v, height, fwhm_v / FWHM_PER_SIGMA)


def _calibrate_step(step: Step, window_v: Tuple[float, float], peaks: Sequence[PeakSpec],
                    shift_v_per_c: float, height_per_c: float, width_per_c: float,
                    capacity_targets: Tuple[Tuple[float, float], Tuple[float, float]]) -> StepCalibration:
    partial = Polarization(shift_v_per_c, height_per_c, width_per_c)
    (c_lo, q_lo), (c_hi, q_hi) = capacity_targets
    baseline, baseline_per_c = fit_baseline(peaks, partial, step, window_v, c_lo, q_lo, c_hi, q_hi)
    return StepCalibration(
        window_v=window_v,
        base_peaks=tuple(peaks),
        polarization=replace(partial, baseline_per_c=baseline_per_c),
        baseline_ah_per_v=baseline,
    )


def _lifepo4() -> SynthCellConfig:
    spec = cell_spec(Chemistry.LIFEPO4)
    # Charge main peak: 3.34 V -> 3.48 V, FWHM 25 -> 50 mV, height 42 -> 25 (0.2C -> 1.5C)
    center, shift = fit_two_point(0.2, 3.34, 1.5, 3.48, multiplicative=False)
    height, height_k = fit_two_point(0.2, 42.0, 1.5, 25.0)
    fwhm, width_k = fit_two_point(0.2, 0.025, 1.5, 0.050)
    charge = _calibrate_step(
        Step.CHARGE, (3.25, spec.max_voltage_v), [_peak(center, height, fwhm)],
        shift, height_k, width_k,
        capacity_targets=((0.2, 2.35), (1.5, 2.35 * 0.9)),
    )
    discharge = _calibrate_step(
        Step.DISCHARGE, (3.45, DISCHARGE_CUTOFF_V),
        [_peak(3.31, 30.0, 0.030), _peak(3.21, 15.0, 0.040)],
        shift_v_per_c=0.05, height_per_c=-0.30, width_per_c=0.70,
        capacity_targets=((0.5, 2.30), (1.6, 2.10)),
    )
    return SynthCellConfig(Chemistry.LIFEPO4, spec, charge, discharge)


def _linicoalo2() -> SynthCellConfig:
    spec = cell_spec(Chemistry.LINICOALO2)
    # Charge: A at 3.4 V is the broad dominant peak; B-E stay narrow and clear of its flanks
    # up to 1.5C; E stays far enough below 4.2 V that the window top sits on the baseline
    charge = _calibrate_step(
        Step.CHARGE, (DISCHARGE_CUTOFF_V, spec.max_voltage_v),
        [
            _peak(3.40, 3.0, 0.140),
            _peak(3.64, 1.8, 0.070),
            _peak(3.80, 1.8, 0.060),
            _peak(3.93, 1.7, 0.055),
            _peak(4.03, 1.6, 0.050),
        ],
        shift_v_per_c=0.06, height_per_c=-0.35, width_per_c=0.45,
        capacity_targets=((0.2, 2.15), (1.5, 1.95)),
    )
    # Discharge A: 3.78 V -> 3.35 V, height 1.4 -> 0.6, FWHM 120 -> 400 mV (0.5C -> 1.6C).
    # The heights are above the baseline; the capacity targets keep the baseline low
    # enough that the broad 1.6C peak clears the relative prominence filter.
    center, slope = fit_two_point(0.5, 3.78, 1.6, 3.35, multiplicative=False)
    height, height_k = fit_two_point(0.5, 1.4, 1.6, 0.6)
    fwhm, width_k = fit_two_point(0.5, 0.120, 1.6, 0.400)
    discharge = _calibrate_step(
        Step.DISCHARGE, (spec.max_voltage_v, DISCHARGE_CUTOFF_V), [_peak(center, height, fwhm)],
        shift_v_per_c=-slope, height_per_c=height_k, width_per_c=width_k,
        capacity_targets=((0.5, 1.60), (1.6, 1.20)),
    )
    return SynthCellConfig(Chemistry.LINICOALO2, spec, charge, discharge)


def default_calibrations() -> Dict[Chemistry, SynthCellConfig]:
    return {Chemistry.LINICOALO2: _linicoalo2(), Chemistry.LIFEPO4: _lifepo4()}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _factor(k: float, c_rate: float) -> float:
    return 1.0 + k * (c_rate - REFERENCE_C_RATE)


def _polarize(peaks: Sequence[PeakSpec], pol: Polarization, step: Step, c_rate: float,
              fade: float = 1.0) -> List[PeakSpec]:
    direction = 1.0 if step is Step.CHARGE else -1.0
    height_factor, width_factor = _factor(pol.height_per_c, c_rate), _factor(pol.width_per_c, c_rate)
    if height_factor <= 0 or width_factor <= 0:
        raise ValidationError(f"Polarization leaves non-positive peaks at {c_rate}C")
    return [
        PeakSpec(
            center_v=p.center_v + direction * pol.shift_v_per_c * (c_rate - REFERENCE_C_RATE),
            height_ah_per_v=p.height_ah_per_v * height_factor * fade,
            sigma_v=p.sigma_v * width_factor,
        )
        for p in peaks
    ]


def step_model(config: SynthCellConfig, c_rate: float, cycle: int, step: Step) -> StepModel:
    """Effective baseline and peaks for one half-cycle"""
    if c_rate <= 0:
        raise ValidationError("c_rate must be positive")
    calibration = config.calibration(step)
    fade = (1.0 - config.fade_per_cycle) ** cycle
    peaks = _polarize(calibration.base_peaks, calibration.polarization, step, c_rate, fade)
    for p in peaks:
        if not calibration.v_lo <= p.center_v <= calibration.v_hi:
            raise PeakOutOfWindow(
                f"{config.chemistry.value} {step.value} peak at {p.center_v:.3f} V leaves "
                f"[{calibration.v_lo}, {calibration.v_hi}] V at {c_rate}C"
            )
    baseline = calibration.baseline_ah_per_v * _factor(calibration.polarization.baseline_per_c, c_rate) * fade
    if baseline <= 0:
        raise ValidationError(f"Baseline is non-positive at {c_rate}C")
    return StepModel(step, c_rate, calibration.window_v, tuple(peaks), baseline)


def _cc_step(config: SynthCellConfig, model: StepModel, t0: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free (time, voltage, capacity) of a constant-current sweep across the window"""
    amps = model.c_rate * config.spec.nominal_capacity_ah
    total = model.total_capacity_ah
    duration = total * 3600.0 / amps
    dt = config.sample_period_s
    elapsed = np.arange(0.0, duration, dt)
    if elapsed[-1] < duration:
        elapsed = np.append(elapsed, duration)

    fine_v = np.linspace(model.window_v[0], model.window_v[1], FINE_GRID_POINTS)
    fine_q = model.capacity_at(fine_v)
    capacity = np.minimum(elapsed * amps / 3600.0, total)
    voltage = np.interp(capacity, fine_q, fine_v)
    return t0 + elapsed, voltage, capacity


def _rest_step(config: SynthCellConfig, t0: float, duration: float, v_from: float,
               v_to: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exponential relaxation from v_from toward v_to (time constant duration / 5)"""
    elapsed = np.arange(0.0, duration + 1e-9, config.sample_period_s)
    voltage = v_to + (v_from - v_to) * np.exp(-elapsed / (duration / 5.0))
    return t0 + elapsed, voltage


def _rows(cell_id: str, cycle: int, step: Step, t: np.ndarray, current: float, voltage: np.ndarray,
          capacity: np.ndarray, config: SynthCellConfig) -> List[CycleRecord]:
    rng = child_rng(config.seed, "synth", cell_id, cycle, step.value)
    v_noise = rng.normal(0.0, config.noise_sigma_v, len(t)) if config.noise_sigma_v else np.zeros(len(t))
    i_noise = rng.normal(0.0, config.noise_sigma_a, len(t)) if config.noise_sigma_a else np.zeros(len(t))
    return [
        CycleRecord(cell_id, cycle, step, float(ti), float(current + di), float(vi + dv), float(qi))
        for ti, vi, qi, dv, di in zip(t, voltage, capacity, v_noise, i_noise)
    ]


def _half_cycle_rows(config: SynthCellConfig, cell_id: str, c_rate: float, cycle: int, step: Step,
                     t0: float) -> Tuple[List[CycleRecord], StepModel]:
    model = step_model(config, c_rate, cycle, step)
    t, voltage, capacity = _cc_step(config, model, t0)
    amps = c_rate * config.spec.nominal_capacity_ah
    current = amps if step is Step.CHARGE else -amps
    return _rows(cell_id, cycle, step, t, current, voltage, capacity, config), model


def generate_half_cycle(config: SynthCellConfig, c_rate: float, cycle: int, step: Step,
                        cell_id: str = "synthetic") -> Tuple[HalfCycleCurve, List[PeakSpec]]:
    """One constant-current half-cycle and the exact peaks that built it"""
    records, model = _half_cycle_rows(config, cell_id, c_rate, cycle, step, 0.0)
    curves = segment_cycles(records, config.spec.nominal_capacity_ah).curves
    if not curves:
        raise EmptyStep(f"Synthetic {step.value} step at {c_rate}C has fewer than two usable samples")
    return curves[0], list(model.peaks)


def regime_cell_id(chemistry: Chemistry, charge_c: float, discharge_c: float) -> str:
    short = "LFP" if chemistry is Chemistry.LIFEPO4 else "NCA"
    return f"{short}-{charge_c:g}C-{discharge_c:g}C"


def _regime_records(config: SynthCellConfig, charge_c: float, discharge_c: float,
                    cycles: int) -> Tuple[List[CycleRecord], List[HalfCycleTruth]]:
    cell_id = regime_cell_id(config.chemistry, charge_c, discharge_c)
    dt = config.sample_period_s
    charge_start = config.charge.window_v[0]
    discharge_start = config.discharge.window_v[0]
    records: List[CycleRecord] = []
    truth: List[HalfCycleTruth] = []
    t = 0.0
    v_now = charge_start

    def rest(cycle: int, duration: float, v_target: float) -> None:
        nonlocal t, v_now
        times, voltage = _rest_step(config, t, duration, v_now, v_target)
        records.extend(_rows(cell_id, cycle, Step.REST, times, 0.0, voltage, np.zeros(len(times)), config))
        t, v_now = float(times[-1]) + dt, float(voltage[-1])

    for cycle in range(1, cycles + 1):
        rest(cycle, REST_PERIOD_S if cycle == 1 else INTER_CYCLE_REST_S, charge_start)
        for step, c_rate, next_start in ((Step.CHARGE, charge_c, discharge_start),
                                         (Step.DISCHARGE, discharge_c, charge_start)):
            rows, model = _half_cycle_rows(config, cell_id, c_rate, cycle, step, t)
            records.extend(rows)
            truth.append(HalfCycleTruth(
                cell_id=cell_id, cycle=cycle, step=step.value, c_rate=c_rate,
                baseline_ah_per_v=model.baseline_ah_per_v,
                capacity_ah=model.total_capacity_ah,
                peaks=[asdict(p) for p in model.peaks],
            ))
            t = rows[-1].time_s + dt
            v_now = float(model.window_v[1])
            rest(cycle, REST_PERIOD_S, next_start)
    return records, truth


def generate_protocol_run(config: SynthCellConfig,
                          protocol: Sequence[Tuple[float, float]] = DEFAULT_PROTOCOL,
                          cycles: int = 5) -> Dataset:
    """A full cycling test, one cell per (charge C, discharge C) regime"""
    return generate_protocol_run_with_truth(config, protocol, cycles)[0]


def generate_protocol_run_with_truth(config: SynthCellConfig,
                                     protocol: Sequence[Tuple[float, float]] = DEFAULT_PROTOCOL,
                                     cycles: int = 5) -> Tuple[Dataset, List[HalfCycleTruth]]:
    if not protocol:
        raise ValidationError("Protocol must contain at least one (charge, discharge) regime")
    if cycles < 1:
        raise ValidationError("cycles must be >= 1")
    records: List[CycleRecord] = []
    truth: List[HalfCycleTruth] = []
    for charge_c, discharge_c in protocol:
        regime_rows, regime_truth = _regime_records(config, charge_c, discharge_c, cycles)
        records.extend(regime_rows)
        truth.extend(regime_truth)
        logger.info(f"Generated {regime_truth[0].cell_id}: {cycles} cycles, {len(regime_rows)} rows")
    provenance = [f"synth:{config.chemistry.value}:seed={config.seed}"]
    return build_dataset(records, provenance), truth


def synth_config(chemistry: Chemistry, seed: Optional[int] = None, noise_sigma_v: Optional[float] = None,
                 noise_sigma_a: Optional[float] = None, fade_per_cycle: Optional[float] = None,
                 decimation: Optional[int] = None) -> SynthCellConfig:
    """Default calibration for a chemistry with selected fields overridden"""
    overrides = {
        "seed": seed, "noise_sigma_v": noise_sigma_v, "noise_sigma_a": noise_sigma_a,
        "fade_per_cycle": fade_per_cycle, "decimation": decimation,
    }
    return replace(default_calibrations()[chemistry], **{k: v for k, v in overrides.items() if v is not None})
