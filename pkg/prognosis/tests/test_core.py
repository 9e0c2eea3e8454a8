import numpy as np
import pytest

from cellprog.core import (
    CellSpec,
    Chemistry,
    CycleRecord,
    HalfCycleCurve,
    Step,
    cell_spec,
    curves_to_records,
    delivered_capacity,
    resample_uniform,
    segment_cycles,
    state_of_health,
)
from cellprog.errors import ValidationError


def make_step(cell_id, cycle, step, voltages, t0=0.0, current=1.0):
    sign = {Step.CHARGE: 1.0, Step.DISCHARGE: -1.0, Step.REST: 0.0}[step]
    return [
        CycleRecord(cell_id, cycle, step, t0 + i, sign * current, v, 0.01 * i if step is not Step.REST else 0.0)
        for i, v in enumerate(voltages)
    ]


@pytest.fixture
def one_cycle():
    """Rest, 10 charge samples, rest, 10 discharge samples, rest"""
    records = make_step("A", 1, Step.REST, [3.0] * 3, t0=0)
    records += make_step("A", 1, Step.CHARGE, np.linspace(3.0, 3.6, 10), t0=3)
    records += make_step("A", 1, Step.REST, [3.6] * 3, t0=13)
    records += make_step("A", 1, Step.DISCHARGE, np.linspace(3.5, 3.0, 10), t0=16)
    records += make_step("A", 1, Step.REST, [3.0] * 3, t0=26)
    return records


def test_segment_one_cycle(one_cycle):
    result = segment_cycles(one_cycle)
    assert len(result.curves) == 2
    assert [c.step for c in result.curves] == [Step.CHARGE, Step.DISCHARGE]
    assert all(len(c) == 10 for c in result.curves)
    assert result.empty_steps == []


def test_segment_drops_voltage_dip():
    records = make_step("A", 1, Step.CHARGE, [3.0, 3.1, 3.2, 3.199, 3.3])
    curve = segment_cycles(records).curves[0]
    np.testing.assert_array_equal(curve.voltage_v, [3.0, 3.1, 3.2, 3.3])
    assert np.all(np.diff(curve.voltage_v) > 0)


def test_segment_only_rest():
    records = make_step("A", 1, Step.REST, [3.3] * 5)
    result = segment_cycles(records)
    assert result.curves == []


def test_segment_reports_short_step():
    records = make_step("A", 1, Step.CHARGE, [3.0])
    records += make_step("A", 1, Step.DISCHARGE, [3.4, 3.3, 3.2], t0=1)
    result = segment_cycles(records)
    assert len(result.curves) == 1
    assert result.empty_steps[0].step is Step.CHARGE
    assert result.empty_steps[0].n_samples == 1


def test_segment_labels_c_rate():
    records = make_step("A", 1, Step.CHARGE, [3.0, 3.1, 3.2], current=1.25)
    curve = segment_cycles(records, nominal_capacity_ah=2.5).curves[0]
    assert curve.c_rate == 0.5


def test_segment_idempotent(one_cycle):
    first = segment_cycles(one_cycle, nominal_capacity_ah=1.0).curves
    second = segment_cycles(curves_to_records(first, nominal_capacity_ah=1.0), nominal_capacity_ah=1.0).curves
    assert len(first) == len(second)
    for a, b in zip(first, second):
        assert a.key == b.key
        np.testing.assert_array_equal(a.voltage_v, b.voltage_v)
        np.testing.assert_array_equal(a.capacity_ah, b.capacity_ah)


def test_resample_linear():
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.5, [3.0, 3.2, 3.4], [0.0, 1.0, 2.0])
    out = resample_uniform(curve, 5)
    np.testing.assert_allclose(out.voltage_v, [3.0, 3.1, 3.2, 3.3, 3.4], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.capacity_ah, [0.0, 0.5, 1.0, 1.5, 2.0], rtol=0, atol=1e-12)
    assert out.voltage_v[0] == 3.0 and out.voltage_v[-1] == 3.4


def test_resample_identity_on_uniform_grid():
    grid = np.linspace(3.0, 3.4, 5)
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.5, grid, grid ** 2)
    out = resample_uniform(curve, 5)
    np.testing.assert_array_equal(out.voltage_v, curve.voltage_v)
    np.testing.assert_array_equal(out.capacity_ah, curve.capacity_ah)


def test_resample_interpolates_on_segment():
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.5, [3.0, 3.1, 3.4], [0.0, 1.0, 2.0])
    out = resample_uniform(curve, 3)
    assert out.capacity_ah[1] == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_resample_discharge_keeps_direction():
    curve = HalfCycleCurve("A", 1, Step.DISCHARGE, 0.5, [3.4, 3.3, 3.0], [0.0, 0.4, 2.0])
    out = resample_uniform(curve, 7)
    assert np.all(np.diff(out.voltage_v) < 0)
    assert out.voltage_v[0] == 3.4 and out.voltage_v[-1] == 3.0
    assert out.capacity_ah[0] == 0.0 and out.capacity_ah[-1] == 2.0


def test_resample_properties():
    rng = np.random.default_rng(3)
    voltage = np.cumsum(rng.uniform(0.001, 0.02, 60)) + 3.0
    capacity = np.cumsum(rng.uniform(0.0, 0.05, 60))
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.2, voltage, capacity)
    once = resample_uniform(curve, 100)
    twice = resample_uniform(once, 100)
    assert delivered_capacity(once) == pytest.approx(delivered_capacity(curve), rel=1e-15)
    np.testing.assert_array_equal(once.voltage_v, twice.voltage_v)
    np.testing.assert_array_equal(once.capacity_ah, twice.capacity_ah)


def test_resample_rejects_tiny_grid():
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.5, [3.0, 3.2], [0.0, 1.0])
    with pytest.raises(ValidationError):
        resample_uniform(curve, 1)


def test_curve_rejects_non_monotone_voltage():
    with pytest.raises(ValidationError):
        HalfCycleCurve("A", 1, Step.CHARGE, 0.5, [3.0, 3.2, 3.1], [0.0, 1.0, 2.0])
    with pytest.raises(ValidationError):
        HalfCycleCurve("A", 1, Step.REST, 0.0, [3.0, 3.2], [0.0, 1.0])


def test_curve_arrays_are_read_only():
    curve = HalfCycleCurve("A", 1, Step.CHARGE, 0.5, [3.0, 3.2], [0.0, 1.0])
    with pytest.raises(ValueError):
        curve.voltage_v[0] = 1.0


def test_cell_specs():
    lfp = cell_spec(Chemistry.LIFEPO4)
    nca = cell_spec(Chemistry.LINICOALO2)
    assert lfp.nominal_capacity_ah == 2.5
    assert nca.nominal_capacity_ah == 2.2
    assert nca.protection_window_v == (2.5, 4.3)
    assert Chemistry.from_name("lfp") is Chemistry.LIFEPO4
    assert Chemistry.from_name("NCA") is Chemistry.LINICOALO2
    with pytest.raises(ValidationError):
        Chemistry.from_name("lead-acid")


def test_cell_spec_invariants():
    with pytest.raises(ValidationError):
        CellSpec(Chemistry.LIFEPO4, 2.5, 3.7, 3.6, 2.5)
    with pytest.raises(ValidationError):
        CellSpec(Chemistry.LIFEPO4, 0.0, 3.3, 3.6, 2.5)


def test_state_of_health():
    curve = HalfCycleCurve("A", 1, Step.DISCHARGE, 0.5, [3.4, 3.0], [0.0, 2.0])
    assert delivered_capacity(curve) == 2.0
    assert state_of_health(2.0, cell_spec(Chemistry.LIFEPO4)) == pytest.approx(0.8)
