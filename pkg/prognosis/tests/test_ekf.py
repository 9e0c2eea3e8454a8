import numpy as np
import pytest

from cellprog.core import CycleRecord, Step
from cellprog.ekf import (
    EkfModel,
    EkfState,
    default_noise,
    denoise_records,
    denoise_signal,
    ekf_predict,
    ekf_update,
)
from cellprog.errors import DimensionMismatch, SingularInnovation, ValidationError


def scalar_model(f_gain=1.0, q=0.0, r=1.0):
    return EkfModel.linear([[f_gain]], [[1.0]], [[q]], [[r]])


def test_predict_identity_without_noise():
    state = ekf_predict(EkfState([1.0], [[2.0]]), scalar_model())
    np.testing.assert_array_equal(state.x_hat, [1.0])
    np.testing.assert_array_equal(state.p, [[2.0]])


def test_predict_adds_process_noise():
    state = ekf_predict(EkfState([0.0], [[1.0]]), scalar_model(q=0.5))
    np.testing.assert_array_equal(state.p, [[1.5]])


def test_predict_propagates_jacobian():
    state = ekf_predict(EkfState([1.0], [[1.0]]), scalar_model(f_gain=2.0))
    np.testing.assert_array_equal(state.x_hat, [2.0])
    np.testing.assert_array_equal(state.p, [[4.0]])


def test_update_scalar_recursion():
    state, residual = ekf_update(EkfState([0.0], [[1.0]]), scalar_model(r=1.0), [2.0])
    np.testing.assert_allclose(residual, [2.0])
    np.testing.assert_allclose(state.x_hat, [1.0])
    np.testing.assert_allclose(state.p, [[0.5]])


def test_update_ignores_huge_measurement_noise():
    state, _ = ekf_update(EkfState([0.3], [[1.0]]), scalar_model(r=1e12), [5.0])
    assert abs(state.x_hat[0] - 0.3) < 1e-9


def test_update_zero_innovation():
    prior = EkfState([0.7], [[2.0]])
    state, residual = ekf_update(prior, scalar_model(r=1.0), [0.7])
    np.testing.assert_array_equal(residual, [0.0])
    np.testing.assert_array_equal(state.x_hat, prior.x_hat)
    assert state.p[0, 0] < prior.p[0, 0]


def test_dimension_mismatch():
    model = scalar_model()
    with pytest.raises(DimensionMismatch):
        ekf_predict(EkfState([0.0, 0.0], np.eye(2)), model)
    with pytest.raises(DimensionMismatch):
        ekf_update(EkfState([0.0], [[1.0]]), model, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        EkfState([0.0, 1.0], [[1.0]])


def test_singular_innovation():
    with pytest.raises(SingularInnovation):
        ekf_update(EkfState([0.0], [[0.0]]), scalar_model(r=0.0), [1.0])


def test_model_rejects_asymmetric_noise():
    with pytest.raises(ValidationError):
        EkfModel.linear(np.eye(2), np.eye(2), [[1.0, 0.5], [0.0, 1.0]], np.eye(2))


def _random_psd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + 1e-3 * np.eye(n)


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        model = EkfModel.linear(rng.normal(scale=0.5, size=(n, n)), rng.normal(size=(n, n)),
                                _random_psd(rng, n), _random_psd(rng, n))
        state = EkfState(rng.normal(size=n), _random_psd(rng, n))
        for _ in range(10):
            state = ekf_predict(state, model)
            state, _ = ekf_update(state, model, rng.normal(size=n))
            np.testing.assert_array_equal(state.p, state.p.T)
            assert np.linalg.eigvalsh(state.p).min() > -1e-9


def kalman_oracle(a, h, q, r, x0, p0, measurements):
    """Textbook linear Kalman filter, written out independently"""
    x, p = np.array(x0, dtype=float), np.array(p0, dtype=float)
    history = []
    for z in measurements:
        x = a.dot(x)
        p = a.dot(p).dot(a.T) + q
        s = h.dot(p).dot(h.T) + r
        k = p.dot(h.T).dot(np.linalg.inv(s))
        x = x + k.dot(z - h.dot(x))
        p = (np.eye(len(x)) - k.dot(h)).dot(p)
        history.append(x.copy())
    return history


def test_linear_model_matches_kalman_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = 1 if trial % 2 == 0 else 2
        a = rng.normal(size=(n, n))
        a *= 0.9 / max(1.0, np.abs(np.linalg.eigvals(a)).max())
        h = rng.normal(size=(n, n)) + 2.0 * np.eye(n)
        q, r = _random_psd(rng, n), _random_psd(rng, n)
        x0, p0 = rng.normal(size=n), _random_psd(rng, n)
        zs = rng.normal(size=(25, n))

        model = EkfModel.linear(a, h, q, r)
        state = EkfState(x0, p0)
        expected = kalman_oracle(a, h, q, r, x0, p0, zs)
        for z, x_ref in zip(zs, expected):
            state = ekf_predict(state, model)
            state, _ = ekf_update(state, model, z)
            worst = max(worst, float(np.abs(state.x_hat - x_ref).max()))
    assert worst < 1e-10


def test_denoise_constant_signal():
    out = denoise_signal([5.0, 5.0, 5.0, 5.0], q_scalar=0.1, r_scalar=2.0)
    assert len(out) == 4
    assert abs(out[-1] - 5.0) < 1e-6


def test_denoise_single_sample():
    assert denoise_signal([7.0]) == [7.0]


def test_denoise_matches_scalar_recursion():
    assert denoise_signal([0.0, 2.0], q_scalar=0.0, r_scalar=1.0) == pytest.approx([0.0, 1.0])


def test_denoise_matches_random_walk_filter():
    rng = np.random.default_rng(9)
    raw = 2.0 + rng.normal(scale=0.3, size=60)
    one = np.eye(1)
    expected = kalman_oracle(one, one, [[0.01]], [[0.2]], raw[:1], [[0.2]], raw[1:, None])
    out = denoise_signal(raw, q_scalar=0.01, r_scalar=0.2)
    assert out == pytest.approx([raw[0]] + [float(x[0]) for x in expected], abs=1e-12)


def test_denoise_runs_through_general_filter(monkeypatch):
    calls = []

    def counting_update(state, model, z):
        calls.append(float(np.atleast_1d(z)[0]))
        return ekf_update(state, model, z)

    monkeypatch.setattr("cellprog.ekf.ekf_update", counting_update)
    denoise_signal([1.0, 2.0, 3.0, 4.0], q_scalar=0.1, r_scalar=1.0)
    assert calls == [2.0, 3.0, 4.0]


def test_denoise_rejects_bad_parameters():
    with pytest.raises(ValidationError):
        denoise_signal([])
    with pytest.raises(ValidationError):
        denoise_signal([1.0, 2.0], q_scalar=-1.0, r_scalar=1.0)
    with pytest.raises(ValidationError):
        denoise_signal([1.0, 2.0], q_scalar=0.0, r_scalar=0.0)


def test_denoise_reduces_noise():
    rng = np.random.default_rng(7)
    truth = 3.3
    raw = truth + rng.normal(scale=0.05, size=10_000)
    filtered = np.asarray(denoise_signal(raw))
    raw_rmse = np.sqrt(np.mean((raw - truth) ** 2))
    filtered_rmse = np.sqrt(np.mean((filtered - truth) ** 2))
    assert filtered_rmse <= 0.5 * raw_rmse


def test_denoise_converges_without_process_noise():
    rng = np.random.default_rng(8)
    raw = 1.0 + rng.normal(scale=0.1, size=2000)
    filtered = np.asarray(denoise_signal(raw, q_scalar=0.0, r_scalar=0.01))
    tail = filtered[-200:]
    assert np.var(tail) < np.var(raw)


def test_default_noise():
    q, r = default_noise([1.0, 3.0, 1.0, 3.0])
    # first differences [2, -2, 2] have sample variance 16/3
    assert r == pytest.approx(8.0 / 3.0)
    assert q == pytest.approx(r / 100.0)
    assert default_noise([2.0, 2.0, 2.0]) == pytest.approx((1e-14, 1e-12), rel=1e-12)


def test_default_noise_needs_two_differences():
    assert default_noise([1.0, 5.0]) == pytest.approx((1e-14, 1e-12), rel=1e-12)
    assert default_noise([4.0]) == pytest.approx((1e-14, 1e-12), rel=1e-12)


def test_denoise_records_keeps_raw_columns():
    rng = np.random.default_rng(5)
    records = [
        CycleRecord("A", 1, Step.CHARGE, float(i), 1.0 + rng.normal(scale=0.01), 3.3 + 0.001 * i, 0.0)
        for i in range(50)
    ]
    filtered, raw_current, raw_voltage = denoise_records(records)
    assert len(filtered) == len(records)
    assert raw_current == [r.current_a for r in records]
    assert raw_voltage == [r.voltage_v for r in records]
    assert [r.time_s for r in filtered] == [r.time_s for r in records]
    assert np.std([r.current_a for r in filtered[10:]]) < np.std(raw_current[10:])
