import os
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from scipy.special import erf

from cellprog.core import HalfCycleCurve, Step
from cellprog.dca import DqDvCurve, analyze_curve, compute_dqdv, integrate, smooth, write_dqdv_csv
from cellprog.errors import BadWindow, NonMonotoneVoltage, ValidationError


def charge_curve(voltage, capacity):
    return HalfCycleCurve("A", 1, Step.CHARGE, 0.5, voltage, capacity)


def flat_dqdv(values, start=3.0, step=0.01):
    values = np.asarray(values, dtype=float)
    return DqDvCurve(start + step * np.arange(len(values)), values, ("A", 1, Step.CHARGE, 0.5))


def gaussian_step(voltage, center=3.4, sigma=0.02, total=2.0):
    return total * 0.5 * (1.0 + erf((voltage - center) / (sigma * np.sqrt(2.0))))


def test_linear_capacity_gives_constant():
    voltage = np.linspace(3.0, 4.0, 101)
    out = compute_dqdv(charge_curve(voltage, voltage))
    assert len(out) == 100
    np.testing.assert_array_equal(out.dqdv_ah_per_v, np.ones(100))
    np.testing.assert_array_equal(out.voltage_v, voltage[:-1])
    assert not out.smoothed


def test_quadratic_forward_difference():
    voltage = np.linspace(0.0, 1.0, 101)
    out = compute_dqdv(charge_curve(voltage, voltage ** 2))
    np.testing.assert_allclose(out.dqdv_ah_per_v, 2.0 * voltage[:-1] + 0.01, rtol=0, atol=1e-12)


def test_two_point_curve():
    out = compute_dqdv(charge_curve([3.0, 3.5], [0.2, 1.2]))
    np.testing.assert_allclose(out.dqdv_ah_per_v, [2.0])


def test_discharge_is_flipped_and_positive():
    voltage = np.linspace(3.6, 3.0, 61)
    capacity = 2.0 - gaussian_step(voltage)
    curve = HalfCycleCurve("A", 1, Step.DISCHARGE, 1.0, voltage, capacity)
    out = compute_dqdv(curve)
    assert np.all(np.diff(out.voltage_v) > 0)
    assert np.all(out.dqdv_ah_per_v >= 0.0)
    assert out.step is Step.DISCHARGE
    assert out.source == ("A", 1, Step.DISCHARGE, 1.0)


def test_non_monotone_voltage():
    broken = SimpleNamespace(cell_id="A", cycle=1, step=Step.CHARGE, c_rate=0.5,
                             voltage_v=np.array([3.0, 3.2, 3.1]), capacity_ah=np.array([0.0, 1.0, 2.0]))
    with pytest.raises(NonMonotoneVoltage):
        compute_dqdv(broken)


def test_dqdv_is_linear_in_capacity():
    voltage = np.linspace(3.0, 3.6, 80)
    q1, q2 = gaussian_step(voltage), voltage ** 3
    combined = compute_dqdv(charge_curve(voltage, 0.3 * q1 + 1.7 * q2)).dqdv_ah_per_v
    separate = (0.3 * compute_dqdv(charge_curve(voltage, q1)).dqdv_ah_per_v
                + 1.7 * compute_dqdv(charge_curve(voltage, q2)).dqdv_ah_per_v)
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12 * np.abs(separate).max())


def test_integral_matches_capacity_swing():
    voltage = np.linspace(3.0, 4.0, 101)
    capacity = voltage ** 3
    out = compute_dqdv(charge_curve(voltage, capacity))
    swing = abs(capacity[-1] - capacity[0])
    assert abs(integrate(out) - swing) <= out.grid_step_v * np.abs(out.dqdv_ah_per_v).max()


def test_dqdv_curve_rejects_non_uniform_grid():
    with pytest.raises(ValidationError):
        DqDvCurve(np.array([3.0, 3.1, 3.3]), np.zeros(3), ("A", 1, Step.CHARGE, 0.5))


def test_smooth_keeps_constant():
    curve = flat_dqdv(np.full(30, 4.2))
    out = smooth(curve, 11, 3)
    np.testing.assert_allclose(out.dqdv_ah_per_v, curve.dqdv_ah_per_v, rtol=0, atol=1e-12)
    assert out.smoothed


@pytest.mark.parametrize("window", [5, 7, 11])
def test_smooth_reproduces_cubic(window):
    x = np.linspace(-1.0, 1.0, 40)
    values = 0.5 * x ** 3 - x ** 2 + 2.0 * x + 0.25
    out = smooth(flat_dqdv(values), window, 3)
    np.testing.assert_allclose(out.dqdv_ah_per_v, values, rtol=0, atol=1e-10)


def test_smooth_impulse_center_coefficient():
    values = np.zeros(21)
    values[10] = 1.0
    out = smooth(flat_dqdv(values), 5, 2)
    # least-squares quadratic over five points has center weight 17/35
    assert out.dqdv_ah_per_v[10] == pytest.approx(17.0 / 35.0, abs=1e-12)
    assert out.dqdv_ah_per_v[10] < 1.0


def test_smooth_keeps_endpoints():
    values = np.random.default_rng(0).normal(size=25)
    out = smooth(flat_dqdv(values), 11, 3)
    assert out.dqdv_ah_per_v[0] == values[0]
    assert out.dqdv_ah_per_v[-1] == values[-1]


def test_smooth_bad_window():
    curve = flat_dqdv(np.zeros(10))
    for window, order in ((4, 2), (1, 0), (5, 5), (5, -1)):
        with pytest.raises(BadWindow):
            smooth(curve, window, order)


def test_smoothing_preserves_integral():
    rng = np.random.default_rng(4)
    for center in (3.3, 3.4, 3.45):
        voltage = np.linspace(3.2, 3.6, 200)
        capacity = gaussian_step(voltage, center=center) + 0.3 * (voltage - 3.2)
        raw = compute_dqdv(charge_curve(voltage, capacity))
        noisy = DqDvCurve(raw.voltage_v, raw.dqdv_ah_per_v + rng.normal(scale=0.5, size=len(raw)), raw.source)
        smoothed = smooth(noisy)
        assert integrate(smoothed) == pytest.approx(integrate(noisy), rel=0.01)


def test_analyze_curve_pipeline():
    voltage = np.cumsum(np.random.default_rng(5).uniform(0.001, 0.01, 90)) + 3.0
    curve = charge_curve(voltage, gaussian_step(voltage, center=float(np.median(voltage))))
    out = analyze_curve(curve, n_points=100, window=11, poly_order=3)
    assert len(out) == 99
    assert out.smoothed
    assert out.voltage_v[0] == voltage[0]
    assert out.grid_step_v == pytest.approx((voltage[-1] - voltage[0]) / 99)


def test_write_dqdv_csv_is_exact(tmp_path):
    voltage = np.linspace(3.0, 3.6, 50)
    out = compute_dqdv(charge_curve(voltage, gaussian_step(voltage)))
    path = write_dqdv_csv(out, os.path.join(tmp_path, "dca", "A.csv"))
    frame = pd.read_csv(path, dtype=float, float_precision="round_trip")
    assert list(frame.columns) == ["voltage_v", "dqdv_ah_per_v"]
    np.testing.assert_array_equal(frame["voltage_v"].to_numpy(), out.voltage_v)
    np.testing.assert_array_equal(frame["dqdv_ah_per_v"].to_numpy(), out.dqdv_ah_per_v)
