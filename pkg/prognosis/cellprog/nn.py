"""
From-scratch numpy layers for the capacity predictor: Conv1D, ReLU, max
pooling, LSTM and a linear dense head, with exact analytic gradients,
inverted dropout, Adam and a bit-exact checkpoint container.

Arrays carry a leading batch axis internally ([batch, time, channels]);
single-window calls are the batch-of-one case.
"""
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .config import CHECKPOINT_FORMAT_VERSION
from .errors import CheckpointFormatError, ShapeMismatch, StaleCache, ValidationError

logger = logging.getLogger(__name__)

GATES = ("u", "f", "c", "o")


class Mode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class Variant(str, Enum):
    EKF_CNN = "EkfCnn"
    EKF_CNN_LSTM = "EkfCnnLstm"


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Conv1dLayer:
    w: np.ndarray  # [filters, in_channels, kernel]
    b: np.ndarray  # [filters]

    def __post_init__(self):
        if self.w.ndim != 3 or self.w.shape[0] < 1 or self.w.shape[2] < 1:
            raise ShapeMismatch(f"conv weights must be [filters>=1, channels, kernel>=1], got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ShapeMismatch(f"conv bias {self.b.shape} does not match {self.w.shape[0]} filters")

    @property
    def filters(self) -> int:
        return self.w.shape[0]

    @property
    def kernel(self) -> int:
        return self.w.shape[2]


@dataclass(eq=False)
class LstmLayer:
    w_xu: np.ndarray
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hu: np.ndarray
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    b_u: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        hidden, inputs = self.w_xu.shape
        for gate in GATES:
            if getattr(self, f"w_x{gate}").shape != (hidden, inputs):
                raise ShapeMismatch(f"w_x{gate} must be {(hidden, inputs)}")
            if getattr(self, f"w_h{gate}").shape != (hidden, hidden):
                raise ShapeMismatch(f"w_h{gate} must be {(hidden, hidden)}")
            if getattr(self, f"b_{gate}").shape != (hidden,):
                raise ShapeMismatch(f"b_{gate} must be {(hidden,)}")

    @property
    def hidden_size(self) -> int:
        return self.w_xu.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_xu.shape[1]


@dataclass(eq=False)
class DenseLayer:
    w: np.ndarray  # [outputs, inputs]
    b: np.ndarray  # [outputs]

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeMismatch(f"dense weights {self.w.shape} and bias {self.b.shape} are inconsistent")


@dataclass(eq=False)
class NetworkParams:
    """conv -> ReLU -> pool -> [LSTM -> ReLU -> dropout] x2 -> dense head.

    The EkfCnn variant has no LSTM layers and flattens the pooled
    features into the head.
    """
    conv: Conv1dLayer
    head: DenseLayer
    lstm1: Optional[LstmLayer] = None
    lstm2: Optional[LstmLayer] = None
    dropout_rate: float = 0.0
    pool_window: int = 1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.pool_window < 1:
            raise ValidationError("pool_window must be >= 1")
        if (self.lstm1 is None) != (self.lstm2 is None):
            raise ValidationError("Both LSTM layers must be present or both absent")
        if self.lstm1 is not None:
            if self.lstm1.input_size != self.conv.filters:
                raise ShapeMismatch("lstm1 input size must equal conv filters")
            if self.lstm2.input_size != self.lstm1.hidden_size:
                raise ShapeMismatch("lstm2 input size must equal lstm1 hidden size")
            if self.head.w.shape[1] != self.lstm2.hidden_size:
                raise ShapeMismatch("head input size must equal lstm2 hidden size")
        if self.head.w.shape[0] != 1:
            raise ShapeMismatch("head must produce a single output")

    @property
    def variant(self) -> Variant:
        return Variant.EKF_CNN if self.lstm1 is None else Variant.EKF_CNN_LSTM

    def arrays(self) -> Dict[str, np.ndarray]:
        """Every trainable array keyed by 'layer.name', in a fixed order"""
        out: Dict[str, np.ndarray] = {}
        for layer_name in ("conv", "lstm1", "lstm2", "head"):
            layer = getattr(self, layer_name)
            if layer is None:
                continue
            for f in fields(layer):
                out[f"{layer_name}.{f.name}"] = getattr(layer, f.name)
        return out

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "NetworkParams":
        """A new NetworkParams of the same topology holding ``arrays``"""
        layers = {}
        for layer_name in ("conv", "lstm1", "lstm2", "head"):
            layer = getattr(self, layer_name)
            if layer is None:
                layers[layer_name] = None
                continue
            layers[layer_name] = type(layer)(**{
                f.name: arrays[f"{layer_name}.{f.name}"] for f in fields(layer)
            })
        return NetworkParams(dropout_rate=self.dropout_rate, pool_window=self.pool_window, **layers)

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays({k: np.zeros_like(v) for k, v in self.arrays().items()})

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.arrays().values()))


# ---------------------------------------------------------------------------
# Primitive forward/backward
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None, ...], True
    if x.ndim != ndim:
        raise ShapeMismatch(f"expected {ndim - 1}-D or batched {ndim}-D input, got shape {x.shape}")
    return x, False


def conv1d_forward(layer: Conv1dLayer, x: np.ndarray) -> np.ndarray:
    """Valid cross-correlation; x is [time, channels] or [batch, time, channels]"""
    xb, single = _as_batch(x, 3)
    _, time, channels = xb.shape
    if channels != layer.w.shape[1]:
        raise ShapeMismatch(f"input has {channels} channels, layer expects {layer.w.shape[1]}")
    if time < layer.kernel:
        raise ShapeMismatch(f"time {time} shorter than kernel {layer.kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(xb, layer.kernel, axis=1)  # [B, T', C, K]
    out = np.einsum("btck,fck->btf", windows, layer.w) + layer.b
    return out[0] if single else out


def conv1d_backward(layer: Conv1dLayer, x: np.ndarray, d_out: np.ndarray) -> Tuple[Conv1dLayer, np.ndarray]:
    windows = np.lib.stride_tricks.sliding_window_view(x, layer.kernel, axis=1)
    d_w = np.einsum("btf,btck->fck", d_out, windows)
    d_b = d_out.sum(axis=(0, 1))
    d_x = np.zeros_like(x)
    t_out = d_out.shape[1]
    for k in range(layer.kernel):
        d_x[:, k:k + t_out, :] += d_out @ layer.w[:, :, k]
    return Conv1dLayer(d_w, d_b), d_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad_mask(x: np.ndarray) -> np.ndarray:
    """Derivative of ReLU; the subgradient at exactly 0 is 0"""
    return (np.asarray(x) > 0.0).astype(np.float64)


def max_pool1d(x: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping max pooling along time; a partial tail window is kept"""
    return _max_pool_with_index(x, window)[0]


def _max_pool_with_index(x: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    if window < 1:
        raise ValidationError("pool window must be >= 1")
    xb, single = _as_batch(x, 3)
    batch, time, channels = xb.shape
    if window == 1:
        idx = np.broadcast_to(np.arange(time)[None, :, None], xb.shape)
        return (xb[0] if single else xb), idx
    n_out = -(-time // window)
    padded = np.full((batch, n_out * window, channels), -np.inf)
    padded[:, :time, :] = xb
    blocks = padded.reshape(batch, n_out, window, channels)
    arg = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    idx = arg + (np.arange(n_out) * window)[None, :, None]
    return (out[0] if single else out), idx


def _max_pool_backward(d_out: np.ndarray, idx: np.ndarray, time: int) -> np.ndarray:
    batch, n_out, channels = d_out.shape
    d_x = np.zeros((batch, time, channels))
    b_idx = np.arange(batch)[:, None, None]
    c_idx = np.arange(channels)[None, None, :]
    np.add.at(d_x, (b_idx, idx, c_idx), d_out)
    return d_x


@dataclass
class GateCache:
    psi: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    u: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_step(layer: LstmLayer, psi: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray) -> Tuple[np.ndarray, np.ndarray, GateCache]:
    """One LSTM time step with the standard cell update c = f*c_prev + u*g"""
    single = np.ndim(psi) == 1
    psi, h_prev, c_prev = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (psi, h_prev, c_prev))
    if psi.shape[1] != layer.input_size:
        raise ShapeMismatch(f"input size {psi.shape[1]} != {layer.input_size}")
    if h_prev.shape[1] != layer.hidden_size or c_prev.shape[1] != layer.hidden_size:
        raise ShapeMismatch(f"state size must be {layer.hidden_size}")

    u = sigmoid(psi @ layer.w_xu.T + h_prev @ layer.w_hu.T + layer.b_u)
    f = sigmoid(psi @ layer.w_xf.T + h_prev @ layer.w_hf.T + layer.b_f)
    g = np.tanh(psi @ layer.w_xc.T + h_prev @ layer.w_hc.T + layer.b_c)
    o = sigmoid(psi @ layer.w_xo.T + h_prev @ layer.w_ho.T + layer.b_o)
    c = f * c_prev + u * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = GateCache(psi, h_prev, c_prev, u, f, g, o, c, tanh_c)
    if single:
        return h[0], c[0], cache
    return h, c, cache


def lstm_forward(layer: LstmLayer, x: np.ndarray) -> Tuple[np.ndarray, List[GateCache]]:
    """Run a zero-initialized LSTM over x [batch, time, input]; returns all hidden states"""
    batch, time, _ = x.shape
    h = np.zeros((batch, layer.hidden_size))
    c = np.zeros((batch, layer.hidden_size))
    hs = np.empty((batch, time, layer.hidden_size))
    caches = []
    for t in range(time):
        h, c, cache = lstm_step(layer, x[:, t, :], h, c)
        hs[:, t, :] = h
        caches.append(cache)
    return hs, caches


def lstm_backward(layer: LstmLayer, caches: List[GateCache], d_hs: np.ndarray) -> Tuple[LstmLayer, np.ndarray]:
    """Backpropagation through time given dLoss/dh_t for every step"""
    grads = {f.name: np.zeros_like(getattr(layer, f.name)) for f in fields(layer)}
    batch, time, _ = d_hs.shape
    d_x = np.zeros((batch, time, layer.input_size))
    dh_next = np.zeros((batch, layer.hidden_size))
    dc_next = np.zeros((batch, layer.hidden_size))

    for t in reversed(range(time)):
        cache = caches[t]
        dh = d_hs[:, t, :] + dh_next
        d_o = dh * cache.tanh_c
        dc = dh * cache.o * (1.0 - cache.tanh_c ** 2) + dc_next
        pre = {
            "u": dc * cache.g * cache.u * (1.0 - cache.u),
            "f": dc * cache.c_prev * cache.f * (1.0 - cache.f),
            "c": dc * cache.u * (1.0 - cache.g ** 2),
            "o": d_o * cache.o * (1.0 - cache.o),
        }
        dh_next = np.zeros_like(dh_next)
        for gate, d_a in pre.items():
            grads[f"w_x{gate}"] += d_a.T @ cache.psi
            grads[f"w_h{gate}"] += d_a.T @ cache.h_prev
            grads[f"b_{gate}"] += d_a.sum(axis=0)
            d_x[:, t, :] += d_a @ getattr(layer, f"w_x{gate}")
            dh_next += d_a @ getattr(layer, f"w_h{gate}")
        dc_next = dc * cache.f
    return LstmLayer(**grads), d_x


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Linear transform W x + b (the head has a linear activation)"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.w.shape[1]:
        raise ShapeMismatch(f"dense input size {x.shape[-1]} != {layer.w.shape[1]}")
    return x @ layer.w.T + layer.b


def _dropout_mask(shape: Tuple[int, ...], rate: float, mode: Mode,
                  rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
    if mode is not Mode.TRAIN or rate == 0.0:
        return None
    if rng is None:
        raise ValidationError("Train mode with dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ForwardCache:
    params: NetworkParams
    single: bool
    x: np.ndarray
    conv_out: np.ndarray
    pool_idx: np.ndarray
    pooled: np.ndarray
    lstm1_caches: List[GateCache] = field(default_factory=list)
    lstm1_out: Optional[np.ndarray] = None
    mask1: Optional[np.ndarray] = None
    lstm2_caches: List[GateCache] = field(default_factory=list)
    lstm2_last: Optional[np.ndarray] = None
    mask2: Optional[np.ndarray] = None
    head_in: Optional[np.ndarray] = None


def network_forward(params: NetworkParams, window: np.ndarray, mode: Union[Mode, str] = Mode.INFER,
                    rng: Optional[np.random.Generator] = None) -> Tuple[Union[float, np.ndarray], ForwardCache]:
    """Predict capacity for one window [time, features] or a batch [batch, time, features]"""
    mode = Mode(mode)
    x, single = _as_batch(window, 3)
    if x.shape[2] != params.conv.w.shape[1]:
        raise ShapeMismatch(f"window has {x.shape[2]} features, network expects {params.conv.w.shape[1]}")

    conv_out = conv1d_forward(params.conv, x)
    pooled, pool_idx = _max_pool_with_index(relu(conv_out), params.pool_window)
    cache = ForwardCache(params=params, single=single, x=x, conv_out=conv_out,
                         pool_idx=pool_idx, pooled=pooled)

    if params.lstm1 is None:
        head_in = pooled.reshape(pooled.shape[0], -1)
        if head_in.shape[1] != params.head.w.shape[1]:
            raise ShapeMismatch(
                f"flattened features {head_in.shape[1]} != head input {params.head.w.shape[1]}"
            )
    else:
        hs1, cache.lstm1_caches = lstm_forward(params.lstm1, pooled)
        cache.lstm1_out = hs1
        cache.mask1 = _dropout_mask(hs1.shape, params.dropout_rate, mode, rng)
        layer2_in = relu(hs1) if cache.mask1 is None else relu(hs1) * cache.mask1

        hs2, cache.lstm2_caches = lstm_forward(params.lstm2, layer2_in)
        cache.lstm2_last = hs2[:, -1, :]
        cache.mask2 = _dropout_mask(cache.lstm2_last.shape, params.dropout_rate, mode, rng)
        head_in = relu(cache.lstm2_last)
        if cache.mask2 is not None:
            head_in = head_in * cache.mask2

    cache.head_in = head_in
    prediction = dense_forward(params.head, head_in)[:, 0]
    if single:
        return float(prediction[0]), cache
    return prediction, cache


def network_backward(params: NetworkParams, cache: ForwardCache,
                     d_prediction: Union[float, np.ndarray]) -> NetworkParams:
    """Gradients of sum(d_prediction * prediction) with respect to every parameter"""
    if cache.params is not params:
        raise StaleCache("Cache was produced by a different set of parameters")
    d_pred = np.atleast_1d(np.asarray(d_prediction, dtype=np.float64))
    batch = cache.x.shape[0]
    if d_pred.shape != (batch,):
        raise ShapeMismatch(f"d_prediction shape {d_pred.shape} does not match batch {batch}")

    d_out = d_pred[:, None]
    head_grad = DenseLayer(d_out.T @ cache.head_in, d_out.sum(axis=0))
    d_head_in = d_out @ params.head.w

    lstm1_grad = lstm2_grad = None
    if params.lstm1 is None:
        d_pooled = d_head_in.reshape(cache.pooled.shape)
    else:
        d_last = d_head_in if cache.mask2 is None else d_head_in * cache.mask2
        d_last = d_last * relu_grad_mask(cache.lstm2_last)
        d_hs2 = np.zeros((batch, len(cache.lstm2_caches), params.lstm2.hidden_size))
        d_hs2[:, -1, :] = d_last
        lstm2_grad, d_layer2_in = lstm_backward(params.lstm2, cache.lstm2_caches, d_hs2)

        d_hs1 = d_layer2_in if cache.mask1 is None else d_layer2_in * cache.mask1
        d_hs1 = d_hs1 * relu_grad_mask(cache.lstm1_out)
        lstm1_grad, d_pooled = lstm_backward(params.lstm1, cache.lstm1_caches, d_hs1)

    d_relu = _max_pool_backward(d_pooled, cache.pool_idx, cache.conv_out.shape[1])
    d_conv_out = d_relu * relu_grad_mask(cache.conv_out)
    conv_grad, _ = conv1d_backward(params.conv, cache.x, d_conv_out)

    return NetworkParams(conv=conv_grad, head=head_grad, lstm1=lstm1_grad, lstm2=lstm2_grad,
                         dropout_rate=params.dropout_rate, pool_window=params.pool_window)


# ---------------------------------------------------------------------------
# Initialization and optimizer
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_lstm(rng: np.random.Generator, inputs: int, hidden: int) -> LstmLayer:
    weights = {}
    for gate in GATES:
        weights[f"w_x{gate}"] = _glorot(rng, (hidden, inputs), inputs, hidden)
        weights[f"w_h{gate}"] = _glorot(rng, (hidden, hidden), hidden, hidden)
    for gate in GATES:
        weights[f"b_{gate}"] = np.ones(hidden) if gate == "f" else np.zeros(hidden)
    return LstmLayer(**weights)


def init_params(rng: np.random.Generator, input_features: int = 5, window_len: int = 1,
                conv_filters: int = 64, kernel: int = 1, lstm_units: Tuple[int, int] = (32, 32),
                pool_window: int = 1, dropout_rate: float = 0.2,
                variant: Union[Variant, str] = Variant.EKF_CNN_LSTM) -> NetworkParams:
    """Glorot-uniform weights, zero biases, forget-gate bias +1"""
    variant = Variant(variant)
    if window_len < kernel:
        raise ShapeMismatch(f"window_len {window_len} shorter than kernel {kernel}")
    conv = Conv1dLayer(
        w=_glorot(rng, (conv_filters, input_features, kernel), input_features * kernel, conv_filters * kernel),
        b=np.zeros(conv_filters),
    )
    if variant is Variant.EKF_CNN:
        pooled_time = -(-(window_len - kernel + 1) // pool_window)
        head_inputs = pooled_time * conv_filters
        return NetworkParams(
            conv=conv,
            head=DenseLayer(_glorot(rng, (1, head_inputs), head_inputs, 1), np.zeros(1)),
            dropout_rate=dropout_rate,
            pool_window=pool_window,
        )
    lstm1 = _init_lstm(rng, conv_filters, lstm_units[0])
    lstm2 = _init_lstm(rng, lstm_units[0], lstm_units[1])
    head = DenseLayer(_glorot(rng, (1, lstm_units[1]), lstm_units[1], 1), np.zeros(1))
    return NetworkParams(conv=conv, head=head, lstm1=lstm1, lstm2=lstm2,
                         dropout_rate=dropout_rate, pool_window=pool_window)


@dataclass(eq=False)
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        arrays = params.arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


def adam_update(params: NetworkParams, gradients: NetworkParams, opt_state: AdamState,
                lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                step: Optional[int] = None) -> Tuple[NetworkParams, AdamState]:
    """Adam with bias correction; returns new parameters and moments"""
    step = opt_state.step + 1 if step is None else step
    if step < 1:
        raise ValidationError("Adam step must be >= 1")
    arrays = params.arrays()
    grads = gradients.arrays()
    if arrays.keys() != grads.keys() or arrays.keys() != opt_state.m.keys():
        raise ShapeMismatch("parameters, gradients and optimizer state have different layouts")

    new_arrays, new_m, new_v = {}, {}, {}
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, value in arrays.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeMismatch(f"gradient for {name} is {g.shape}, parameter is {value.shape}")
        m = beta1 * opt_state.m[name] + (1.0 - beta1) * g
        v = beta2 * opt_state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_arrays[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return params.with_arrays(new_arrays), AdamState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: NetworkParams, opt_state: Optional[AdamState] = None,
                    seed: Optional[int] = None, extra: Optional[dict] = None) -> str:
    """Write an .npz checkpoint: JSON header plus flat float64 arrays"""
    arrays = params.arrays()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": params.variant.value,
        "dropout_rate": params.dropout_rate,
        "pool_window": params.pool_window,
        "shapes": {k: list(a.shape) for k, a in arrays.items()},
        "seed": seed,
        "adam_step": opt_state.step if opt_state is not None else None,
        "extra": extra or {},
    }
    payload = {"header": np.array(json.dumps(header, sort_keys=True))}
    for name, a in arrays.items():
        payload[f"param/{name}"] = np.ascontiguousarray(a, dtype=np.float64).ravel()
        if opt_state is not None:
            payload[f"m/{name}"] = opt_state.m[name].ravel()
            payload[f"v/{name}"] = opt_state.v[name].ravel()

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    temp_file = f"{path}.tmp"
    with open(temp_file, "wb") as f:
        np.savez(f, **payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(temp_file, path)
    logger.info(f"Saved {params.variant.value} checkpoint ({params.parameter_count()} parameters) to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[NetworkParams, Optional[AdamState], dict]:
    """Inverse of save_checkpoint; returns params, optimizer state and the header"""
    with np.load(path, allow_pickle=False) as archive:
        try:
            header = json.loads(str(archive["header"]))
        except KeyError as e:
            raise CheckpointFormatError(f"{path}: missing header") from e
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointFormatError(
                f"{path}: format version {header.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
            )
        shapes = header["shapes"]
        arrays = {k: archive[f"param/{k}"].reshape(shape) for k, shape in shapes.items()}
        opt_state = None
        if header.get("adam_step") is not None:
            opt_state = AdamState(
                m={k: archive[f"m/{k}"].reshape(shape) for k, shape in shapes.items()},
                v={k: archive[f"v/{k}"].reshape(shape) for k, shape in shapes.items()},
                step=int(header["adam_step"]),
            )

    def layer(cls, prefix):
        names = [f.name for f in fields(cls)]
        if f"{prefix}.{names[0]}" not in arrays:
            return None
        return cls(**{n: arrays[f"{prefix}.{n}"] for n in names})

    params = NetworkParams(
        conv=layer(Conv1dLayer, "conv"),
        head=layer(DenseLayer, "head"),
        lstm1=layer(LstmLayer, "lstm1"),
        lstm2=layer(LstmLayer, "lstm2"),
        dropout_rate=float(header["dropout_rate"]),
        pool_window=int(header["pool_window"]),
    )
    if params.variant.value != header["variant"]:
        raise CheckpointFormatError(f"{path}: variant mismatch")
    return params, opt_state, header
