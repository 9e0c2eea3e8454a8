import json
import os

import numpy as np
import pytest

from cellprog.config import CHECKPOINT_FORMAT_VERSION
from cellprog.errors import CheckpointFormatError, ShapeMismatch, StaleCache, ValidationError
from cellprog.nn import (
    AdamState,
    Conv1dLayer,
    DenseLayer,
    LstmLayer,
    Mode,
    Variant,
    adam_update,
    conv1d_forward,
    dense_forward,
    init_params,
    load_checkpoint,
    lstm_step,
    max_pool1d,
    network_backward,
    network_forward,
    relu,
    relu_grad_mask,
    save_checkpoint,
)


def filled_lstm(inputs, hidden, value=0.0, **overrides):
    arrays = {}
    for gate in "ufco":
        arrays[f"w_x{gate}"] = np.full((hidden, inputs), value)
        arrays[f"w_h{gate}"] = np.full((hidden, hidden), value)
        arrays[f"b_{gate}"] = np.zeros(hidden)
    arrays.update({k: np.asarray(v, dtype=float) for k, v in overrides.items()})
    return LstmLayer(**arrays)


def small_params(seed=0, variant=Variant.EKF_CNN_LSTM, window_len=4, dropout_rate=0.2):
    return init_params(np.random.default_rng(seed), input_features=5, window_len=window_len,
                       conv_filters=2, kernel=2, lstm_units=(3, 3), pool_window=2,
                       dropout_rate=dropout_rate, variant=variant)


def test_conv_identity_filter():
    layer = Conv1dLayer(np.ones((1, 1, 1)), np.zeros(1))
    x = np.array([[1.0], [-2.0], [3.5]])
    np.testing.assert_array_equal(conv1d_forward(layer, x), x)


def test_conv_zero_weights():
    layer = Conv1dLayer(np.zeros((1, 2, 2)), np.array([0.5]))
    out = conv1d_forward(layer, np.random.default_rng(0).normal(size=(6, 2)))
    np.testing.assert_array_equal(out, np.full((5, 1), 0.5))


def test_conv_sliding_sum():
    layer = Conv1dLayer(np.ones((1, 1, 3)), np.zeros(1))
    out = conv1d_forward(layer, np.array([[1.0], [2.0], [3.0], [4.0]]))
    np.testing.assert_array_equal(out[:, 0], [6.0, 9.0])


def test_conv_shape_errors():
    layer = Conv1dLayer(np.ones((1, 1, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv1d_forward(layer, np.ones((2, 1)))
    with pytest.raises(ShapeMismatch):
        conv1d_forward(layer, np.ones((5, 2)))
    with pytest.raises(ShapeMismatch):
        Conv1dLayer(np.ones((1, 1, 3)), np.zeros(2))


def test_relu_and_mask():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    positive = np.array([0.1, 4.0])
    np.testing.assert_array_equal(relu(positive), positive)
    np.testing.assert_array_equal(relu_grad_mask(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])


def test_max_pool():
    x = np.array([[1.0], [3.0], [2.0], [5.0]])
    np.testing.assert_array_equal(max_pool1d(x, 1), x)
    np.testing.assert_array_equal(max_pool1d(x, 2)[:, 0], [3.0, 5.0])
    np.testing.assert_array_equal(max_pool1d(x[:3], 2)[:, 0], [3.0, 2.0])
    with pytest.raises(ValidationError):
        max_pool1d(x, 0)


def test_lstm_step_zero_parameters():
    h, c, _ = lstm_step(filled_lstm(2, 3), np.array([0.4, -1.0]), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(h, np.zeros(3))
    np.testing.assert_array_equal(c, np.zeros(3))


def test_lstm_step_saturated_forget_gate():
    layer = filled_lstm(1, 1, b_f=[50.0])
    _, c, _ = lstm_step(layer, np.array([0.7]), np.zeros(1), np.array([1.0]))
    assert c[0] == pytest.approx(1.0, abs=1e-12)


def test_lstm_step_hand_evaluated():
    h, c, cache = lstm_step(filled_lstm(1, 1, value=0.1), np.array([1.0]), np.zeros(1), np.zeros(1))
    assert c[0] == pytest.approx(0.052324, abs=1e-6)
    assert h[0] == pytest.approx(0.027442, abs=1e-6)
    assert cache.u[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-0.1)))


def test_lstm_step_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        lstm_step(filled_lstm(2, 3), np.zeros(4), np.zeros(3), np.zeros(3))


def test_dense_forward():
    np.testing.assert_array_equal(dense_forward(DenseLayer(np.eye(2), np.zeros(2)), np.array([1.5, -2.0])),
                                  [1.5, -2.0])
    np.testing.assert_array_equal(dense_forward(DenseLayer(np.zeros((1, 4)), np.array([3.0])), np.ones(4)),
                                  [3.0])
    np.testing.assert_array_equal(
        dense_forward(DenseLayer(np.array([[1.0, 2.0]]), np.array([1.0])), np.array([3.0, 4.0])), [12.0]
    )
    with pytest.raises(ShapeMismatch):
        dense_forward(DenseLayer(np.eye(2), np.zeros(2)), np.ones(3))


def test_network_zero_parameters():
    params = small_params().zeros_like()
    window = np.random.default_rng(1).normal(size=(4, 5))
    prediction, _ = network_forward(params, window)
    assert prediction == 0.0


def test_network_infer_is_deterministic():
    params = small_params()
    window = np.random.default_rng(2).normal(size=(4, 5))
    first, _ = network_forward(params, window, Mode.INFER)
    second, _ = network_forward(params, window, Mode.INFER)
    assert first == second


def test_network_single_step_composition():
    params = init_params(np.random.default_rng(3), input_features=5, window_len=1, conv_filters=4,
                         kernel=1, lstm_units=(3, 2), pool_window=1)
    window = np.random.default_rng(4).normal(size=(1, 5))
    prediction, _ = network_forward(params, window)

    conv = relu(conv1d_forward(params.conv, window))[0]
    h1, _, _ = lstm_step(params.lstm1, conv, np.zeros(3), np.zeros(3))
    h2, _, _ = lstm_step(params.lstm2, relu(h1), np.zeros(2), np.zeros(2))
    expected = dense_forward(params.head, relu(h2))[0]
    assert prediction == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_network_batch_matches_single():
    params = small_params()
    windows = np.random.default_rng(5).normal(size=(3, 4, 5))
    batch, _ = network_forward(params, windows)
    assert batch.shape == (3,)
    for i in range(3):
        single, _ = network_forward(params, windows[i])
        assert single == pytest.approx(batch[i], rel=1e-12)


def test_network_rejects_wrong_feature_count():
    with pytest.raises(ShapeMismatch):
        network_forward(small_params(), np.zeros((4, 3)))


def test_train_mode_needs_rng():
    with pytest.raises(ValidationError):
        network_forward(small_params(), np.zeros((4, 5)), Mode.TRAIN)


def test_backward_zero_upstream():
    params = small_params()
    _, cache = network_forward(params, np.random.default_rng(6).normal(size=(4, 5)))
    grads = network_backward(params, cache, 0.0)
    assert all(not np.any(g) for g in grads.arrays().values())


def test_backward_head_bias_is_upstream():
    params = small_params()
    _, cache = network_forward(params, np.random.default_rng(7).normal(size=(4, 5)))
    grads = network_backward(params, cache, 0.37)
    assert grads.head.b[0] == 0.37


def test_backward_rejects_stale_cache():
    params = small_params()
    _, cache = network_forward(params, np.zeros((4, 5)))
    with pytest.raises(StaleCache):
        network_backward(small_params(seed=1), cache, 1.0)


def _numeric_gradients(params, windows, d_pred, mode, rng_seed, eps=1e-6):
    arrays = params.arrays()

    def objective(candidate):
        rng = np.random.default_rng(rng_seed) if mode is Mode.TRAIN else None
        prediction, _ = network_forward(candidate, windows, mode, rng)
        return float(np.sum(d_pred * prediction))

    numeric = {}
    for name, value in arrays.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            shifted = {k: v.copy() for k, v in arrays.items()}
            shifted[name][idx] = value[idx] + eps
            upper = objective(params.with_arrays(shifted))
            shifted[name][idx] = value[idx] - eps
            lower = objective(params.with_arrays(shifted))
            grad[idx] = (upper - lower) / (2.0 * eps)
        numeric[name] = grad
    return numeric


def _max_relative_error(analytic, numeric):
    worst = 0.0
    for name, expected in numeric.items():
        got = analytic[name]
        err = np.abs(got - expected) / np.maximum(np.abs(got) + np.abs(expected), 1e-4)
        worst = max(worst, float(err.max()))
    return worst


@pytest.mark.parametrize("variant", [Variant.EKF_CNN_LSTM, Variant.EKF_CNN])
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(50):
        window_len = int(rng.integers(2, 6))
        params = small_params(seed=trial, variant=variant, window_len=window_len)
        windows = rng.normal(size=(2, window_len, 5))
        d_pred = rng.normal(size=2)
        _, cache = network_forward(params, windows)
        analytic = network_backward(params, cache, d_pred).arrays()
        numeric = _numeric_gradients(params, windows, d_pred, Mode.INFER, None)
        worst = max(worst, _max_relative_error(analytic, numeric))
    assert worst < 1e-4


def test_gradients_with_fixed_dropout_masks():
    params = small_params(seed=9, dropout_rate=0.3)
    windows = np.random.default_rng(10).normal(size=(3, 4, 5))
    d_pred = np.array([1.0, -0.5, 0.25])
    _, cache = network_forward(params, windows, Mode.TRAIN, np.random.default_rng(11))
    analytic = network_backward(params, cache, d_pred).arrays()
    numeric = _numeric_gradients(params, windows, d_pred, Mode.TRAIN, 11)
    assert _max_relative_error(analytic, numeric) < 1e-4


def test_dropout_keeps_expected_output():
    base = small_params(seed=12, dropout_rate=0.25)
    rng = np.random.default_rng(13)
    arrays = base.arrays()
    # silence the first LSTM so only the last dropout mask reaches the linear head
    for name in arrays:
        if name.startswith("lstm1."):
            arrays[name] = np.zeros_like(arrays[name])
    for gate in "ufco":
        arrays[f"lstm2.b_{gate}"] = rng.uniform(0.5, 1.5, size=3)
    params = base.with_arrays(arrays)

    window = rng.normal(size=(4, 5))
    expected, _ = network_forward(params, window, Mode.INFER)
    draws = np.array([network_forward(params, window, Mode.TRAIN, rng)[0] for _ in range(10_000)])
    stderr = draws.std(ddof=1) / np.sqrt(len(draws))
    assert draws.std() > 0.0
    assert abs(draws.mean() - expected) < 3.0 * stderr


def test_forward_backward_bit_identical_for_same_seed():
    windows = np.random.default_rng(14).normal(size=(2, 4, 5))
    results = []
    for _ in range(2):
        params = small_params(seed=15)
        prediction, cache = network_forward(params, windows, Mode.TRAIN, np.random.default_rng(16))
        results.append((prediction, network_backward(params, cache, np.ones(2)).arrays()))
    np.testing.assert_array_equal(results[0][0], results[1][0])
    for name, grad in results[0][1].items():
        np.testing.assert_array_equal(grad, results[1][1][name])


def test_adam_zero_gradient():
    params = small_params()
    updated, _ = adam_update(params, params.zeros_like(), AdamState.zeros(params))
    for name, value in params.arrays().items():
        np.testing.assert_array_equal(updated.arrays()[name], value)

    state = AdamState.zeros(params)
    state.m = {k: np.ones_like(v) for k, v in state.m.items()}
    state.v = {k: np.ones_like(v) for k, v in state.v.items()}
    _, decayed = adam_update(params, params.zeros_like(), state, step=5)
    for name, value in params.arrays().items():
        np.testing.assert_array_equal(decayed.m[name], np.full(value.shape, 0.9))
        np.testing.assert_array_equal(decayed.v[name], np.full(value.shape, 0.999))


def test_adam_first_step():
    params = small_params()
    grads = params.with_arrays({k: np.ones_like(v) for k, v in params.arrays().items()})
    updated, state = adam_update(params, grads, AdamState.zeros(params), lr=0.001)
    assert state.step == 1
    for name, value in params.arrays().items():
        np.testing.assert_allclose(value - updated.arrays()[name], 0.001 / (1.0 + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_converges_to_lr():
    params = small_params()
    grads = params.with_arrays({k: np.full_like(v, 0.3) for k, v in params.arrays().items()})
    state = AdamState.zeros(params)
    for _ in range(300):
        before = params.head.b[0]
        params, state = adam_update(params, grads, state, lr=0.01)
    assert before - params.head.b[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_rejects_bad_inputs():
    params = small_params()
    with pytest.raises(ValidationError):
        adam_update(params, params.zeros_like(), AdamState.zeros(params), step=0)
    other = small_params(variant=Variant.EKF_CNN)
    with pytest.raises(ShapeMismatch):
        adam_update(params, other.zeros_like(), AdamState.zeros(params))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = small_params(seed=20)
    grads = params.with_arrays({k: np.full_like(v, 0.1) for k, v in params.arrays().items()})
    _, state = adam_update(params, grads, AdamState.zeros(params))
    path = save_checkpoint(os.path.join(tmp_path, "models", "m.npz"), params, state, seed=7,
                           extra={"regime": "0.5C"})

    loaded, loaded_state, header = load_checkpoint(path)
    assert loaded.variant is params.variant
    assert loaded.dropout_rate == params.dropout_rate
    assert header["seed"] == 7
    assert header["extra"] == {"regime": "0.5C"}
    assert loaded_state.step == 1
    for name, value in params.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], value)
        np.testing.assert_array_equal(loaded_state.m[name], state.m[name])
        np.testing.assert_array_equal(loaded_state.v[name], state.v[name])
    assert not os.path.exists(f"{path}.tmp")


def test_checkpoint_without_optimizer_state(tmp_path):
    params = small_params(variant=Variant.EKF_CNN)
    _, state, _ = load_checkpoint(save_checkpoint(os.path.join(tmp_path, "m.npz"), params))
    assert state is None


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = os.path.join(tmp_path, "old.npz")
    header = {"format_version": CHECKPOINT_FORMAT_VERSION + 100, "shapes": {}}
    np.savez(path, header=np.array(json.dumps(header)))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
