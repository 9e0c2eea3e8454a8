"""
Capacity-model training pipeline: feature rows, min-max normalization,
chronological 70/30 split, windowing, the minibatch Adam loop, error
metrics and the hyperparameter grid.
"""
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field
from itertools import groupby
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import (
    DEFAULT_SEED,
    GRID_BATCH_SIZES,
    GRID_EPOCHS,
    GRID_LEARNING_RATES,
    TRAIN_ROW_STRIDE,
)
from .core import CycleRecord, Step
from .errors import EmptyInput, EmptyTrainSet, LengthMismatch, TooFewCycles, ValidationError
from .ingest import Dataset
from .nn import (
    AdamState,
    Mode,
    NetworkParams,
    Variant,
    adam_update,
    init_params,
    network_backward,
    network_forward,
)
from .utils.seeding import child_rng

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("cycle", "time", "current", "voltage", "prior_capacity")
PRIOR_CAPACITY = FEATURE_NAMES.index("prior_capacity")
POOLED_REGIME = "pooled"

Records = Union[Dataset, Sequence[CycleRecord]]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    batch_size: int = Field(GRID_BATCH_SIZES[0], gt=0)
    epochs: int = Field(GRID_EPOCHS[0], ge=0)
    learning_rate: float = Field(GRID_LEARNING_RATES[0], gt=0)
    window_len: int = Field(1, ge=1)
    seed: int = DEFAULT_SEED
    model_variant: Variant = Variant.EKF_CNN_LSTM
    per_c_rate: bool = True
    conv_filters: int = Field(64, gt=0)
    kernel: int = Field(1, gt=0)
    lstm_units: int = Field(32, gt=0)
    pool_window: int = Field(1, gt=0)
    dropout_rate: float = Field(0.2, ge=0.0, lt=1.0)
    row_stride: int = Field(TRAIN_ROW_STRIDE, gt=0)
    eval_mode: Literal["teacher_forced", "autoregressive"] = "teacher_forced"

    @property
    def key(self) -> str:
        return f"bs{self.batch_size}-ep{self.epochs}-lr{self.learning_rate:g}-{self.model_variant.value}"


@dataclass(frozen=True, eq=False)
class NormalizerStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        if np.any(self.maximum < self.minimum):
            raise ValidationError("Normalizer max must be >= min for every feature")

    def to_dict(self) -> dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizerStats":
        return cls(np.asarray(data["minimum"], dtype=np.float64), np.asarray(data["maximum"], dtype=np.float64))


@dataclass
class FeatureRows:
    """Model inputs in record order; ``segment`` numbers contiguous (cell, cycle, step) runs"""
    features: np.ndarray  # [n, 5]
    target: np.ndarray  # [n]
    segment: np.ndarray  # [n]
    cell_id: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.target)


@dataclass
class TrainReport:
    regime: str
    config: dict
    train_loss: List[float]
    test_loss: List[float]
    mse: float
    mae: float
    rmse: float
    n_train: int
    n_test: int
    out_of_range_test_values: int
    feature_stats: NormalizerStats
    target_stats: NormalizerStats
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        data = asdict(self)
        data["feature_stats"] = self.feature_stats.to_dict()
        data["target_stats"] = self.target_stats.to_dict()
        if not include_timing:
            data.pop("wall_clock_s")
        return data


@dataclass
class EvaluationResult:
    mse: float
    mae: float
    rmse: float
    predictions: np.ndarray
    truth: np.ndarray


@dataclass
class GridResult:
    config: TrainConfig
    test_mse: float
    reports: Dict[str, TrainReport]


def _as_records(dataset: Records) -> List[CycleRecord]:
    return dataset.records() if isinstance(dataset, Dataset) else list(dataset)


# ---------------------------------------------------------------------------
# Features, normalization, split, windows
# ---------------------------------------------------------------------------

def build_feature_rows(records: Records, row_stride: int = 1) -> FeatureRows:
    """(cycle, step-elapsed time, current, voltage, prior capacity) -> capacity.

    Rest rows are excluded. Each charge/discharge segment is subsampled by
    ``row_stride`` (first row kept) before the prior-capacity column is
    formed, so the prior is always the previous kept row of the same step.
    """
    if row_stride < 1:
        raise ValidationError("row_stride must be >= 1")
    features, target, segment, cells = [], [], [], []
    seg_no = 0
    for (cell_id, cycle, step), group in groupby(_as_records(records), key=lambda r: (r.cell_id, r.cycle, r.step)):
        if step is Step.REST:
            continue
        rows = list(group)[::row_stride]
        t0 = rows[0].time_s
        prior = 0.0
        for r in rows:
            features.append((float(cycle), r.time_s - t0, r.current_a, r.voltage_v, prior))
            target.append(r.capacity_ah)
            segment.append(seg_no)
            cells.append(cell_id)
            prior = r.capacity_ah
        seg_no += 1
    return FeatureRows(
        features=np.asarray(features, dtype=np.float64).reshape(-1, len(FEATURE_NAMES)),
        target=np.asarray(target, dtype=np.float64),
        segment=np.asarray(segment, dtype=np.int64),
        cell_id=cells,
    )


def minmax_fit(train_rows: np.ndarray) -> NormalizerStats:
    rows = np.asarray(train_rows, dtype=np.float64)
    if rows.size == 0:
        raise EmptyTrainSet("Cannot fit normalizer on an empty training partition")
    if rows.ndim == 1:
        rows = rows[:, None]
    return NormalizerStats(rows.min(axis=0), rows.max(axis=0))


def minmax_apply(stats: NormalizerStats, rows: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant training feature maps to 0.0. No clamping."""
    rows = np.asarray(rows, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = (rows.reshape(-1, len(span)) - stats.minimum) / safe
    scaled[:, span == 0] = 0.0
    return scaled.reshape(rows.shape)


def minmax_invert(stats: NormalizerStats, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    span = stats.maximum - stats.minimum
    return (rows.reshape(-1, len(span)) * span + stats.minimum).reshape(rows.shape)


def split_70_30(dataset: Records) -> Tuple[List[CycleRecord], List[CycleRecord]]:
    """Chronological split per cell: the first ceil(0.7 n) cycles train, the rest test.

    At least one cycle is always held out, so three cycles split 2/1.
    """
    records = _as_records(dataset)
    cycles_by_cell: Dict[str, Set[int]] = {}
    for r in records:
        cycles_by_cell.setdefault(r.cell_id, set()).add(r.cycle)

    last_train: Dict[str, int] = {}
    for cell_id, cycle_set in cycles_by_cell.items():
        cycles = sorted(cycle_set)
        n = len(cycles)
        if n < 2:
            raise TooFewCycles(f"Cell {cell_id} has {n} cycle(s); at least 2 are needed to split")
        n_train = min((7 * n + 9) // 10, n - 1)
        last_train[cell_id] = cycles[n_train - 1]

    train = [r for r in records if r.cycle <= last_train[r.cell_id]]
    test = [r for r in records if r.cycle > last_train[r.cell_id]]
    return train, test


def make_windows(features: np.ndarray, target: np.ndarray, window_len: int) -> List[Tuple[np.ndarray, float]]:
    """Stride-1 windows; each target is the capacity at the window's last row"""
    if window_len < 1:
        raise ValidationError("window_len must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return [
        (features[end - window_len + 1:end + 1], float(target[end]))
        for end in range(window_len - 1, len(target))
    ]


def window_arrays(features: np.ndarray, target: np.ndarray, segment: np.ndarray,
                  window_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked windows [m, window_len, 5] and targets [m]; windows never span two segments"""
    xs, ys = [], []
    n_features = features.shape[1]
    for seg in np.unique(segment):
        idx = np.flatnonzero(segment == seg)
        if len(idx) < window_len:
            continue
        seg_x = features[idx]
        views = np.lib.stride_tricks.sliding_window_view(seg_x, (window_len, n_features))[:, 0]
        xs.append(views)
        ys.append(target[idx][window_len - 1:])
    if not xs:
        return np.empty((0, window_len, n_features)), np.empty(0)
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise LengthMismatch(f"Prediction length {pred.size} != truth length {truth.size}")
    if pred.size == 0:
        raise EmptyInput("Metrics need at least one value")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    return float(np.sqrt(mse(pred, truth)))


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def _predict(params: NetworkParams, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    if len(x) == 0:
        return np.empty(0)
    out = [network_forward(params, x[i:i + batch_size], Mode.INFER)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _autoregressive_predict(params: NetworkParams, rows: FeatureRows, feature_stats: NormalizerStats,
                            target_stats: NormalizerStats, window_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Roll each segment forward, feeding predictions back as the prior capacity.

    The prior at a segment's first row keeps its measured value (zero for
    a fresh step); every later prior is the previous prediction. All
    segments advance together, one row position per network call.
    """
    scaled = minmax_apply(feature_stats, rows.features)
    segments = [np.flatnonzero(rows.segment == seg) for seg in np.unique(rows.segment)]
    segments = [idx for idx in segments if len(idx) >= window_len]
    windows_x = [scaled[idx].copy() for idx in segments]
    preds = [np.full(len(idx), np.nan) for idx in segments]

    longest = max((len(idx) for idx in segments), default=0)
    for pos in range(window_len - 1, longest):
        active = [k for k, idx in enumerate(segments) if len(idx) > pos]
        batch = np.stack([windows_x[k][pos - window_len + 1:pos + 1] for k in active])
        out = network_forward(params, batch, Mode.INFER)[0]
        for k, y_scaled in zip(active, out):
            preds[k][pos] = y_scaled
            if pos + 1 < len(segments[k]):
                capacity = minmax_invert(target_stats, np.array([y_scaled]))[0]
                prior = (capacity - feature_stats.minimum[PRIOR_CAPACITY])
                span = feature_stats.maximum[PRIOR_CAPACITY] - feature_stats.minimum[PRIOR_CAPACITY]
                windows_x[k][pos + 1, PRIOR_CAPACITY] = prior / span if span > 0 else 0.0

    target_scaled = minmax_apply(target_stats, rows.target)
    pred_out, truth_out = [], []
    for idx, p in zip(segments, preds):
        pred_out.append(p[window_len - 1:])
        truth_out.append(target_scaled[idx][window_len - 1:])
    if not pred_out:
        return np.empty(0), np.empty(0)
    return np.concatenate(pred_out), np.concatenate(truth_out)


def evaluate_model(params: NetworkParams, feature_stats: NormalizerStats, target_stats: NormalizerStats,
                   rows: FeatureRows, window_len: int = 1, mode: str = "teacher_forced") -> EvaluationResult:
    """Normalized-scale MSE/MAE/RMSE over every window of ``rows``"""
    if mode == "autoregressive":
        pred, truth = _autoregressive_predict(params, rows, feature_stats, target_stats, window_len)
    elif mode == "teacher_forced":
        x, truth = window_arrays(minmax_apply(feature_stats, rows.features),
                                 minmax_apply(target_stats, rows.target), rows.segment, window_len)
        pred = _predict(params, x)
    else:
        raise ValidationError(f"Unknown evaluation mode: {mode}")
    return EvaluationResult(mse(pred, truth), mae(pred, truth), rmse(pred, truth), pred, truth)


def train_model(dataset: Records, config: TrainConfig, regime: str = POOLED_REGIME,
                test_dataset: Optional[Records] = None) -> Tuple[NetworkParams, TrainReport]:
    """Fit one network with minibatch Adam on MSE loss.

    Without ``test_dataset`` the records are split 70/30 chronologically.
    The returned params are the final-epoch weights.
    """
    started = time.monotonic()
    if test_dataset is None:
        train_records, test_records = split_70_30(dataset)
    else:
        train_records, test_records = _as_records(dataset), _as_records(test_dataset)

    train_rows = build_feature_rows(train_records, config.row_stride)
    test_rows = build_feature_rows(test_records, config.row_stride)
    if len(train_rows) == 0:
        raise EmptyTrainSet(f"No charge/discharge rows in the training partition of {regime}")

    feature_stats = minmax_fit(train_rows.features)
    target_stats = minmax_fit(train_rows.target)
    x_train, y_train = window_arrays(minmax_apply(feature_stats, train_rows.features),
                                     minmax_apply(target_stats, train_rows.target),
                                     train_rows.segment, config.window_len)
    if len(y_train) == 0:
        raise EmptyTrainSet(f"No training windows of length {config.window_len} in {regime}")

    test_scaled = minmax_apply(feature_stats, test_rows.features)
    out_of_range = int(np.count_nonzero((test_scaled < 0.0) | (test_scaled > 1.0)))
    if out_of_range:
        logger.info(f"{regime}: {out_of_range} normalized test values fall outside [0, 1]")
    x_test, y_test = window_arrays(test_scaled, minmax_apply(target_stats, test_rows.target),
                                   test_rows.segment, config.window_len)

    params = init_params(
        child_rng(config.seed, "train", regime, "init"),
        input_features=len(FEATURE_NAMES),
        window_len=config.window_len,
        conv_filters=config.conv_filters,
        kernel=config.kernel,
        lstm_units=(config.lstm_units, config.lstm_units),
        pool_window=config.pool_window,
        dropout_rate=config.dropout_rate,
        variant=config.model_variant,
    )
    opt_state = AdamState.zeros(params)
    shuffle_rng = child_rng(config.seed, "train", regime, "shuffle")
    dropout_rng = child_rng(config.seed, "train", regime, "dropout")

    train_trace: List[float] = []
    test_trace: List[float] = []
    n = len(y_train)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            pred, cache = network_forward(params, x_train[batch], Mode.TRAIN, dropout_rng)
            err = pred - y_train[batch]
            total += float(np.sum(err ** 2))
            grads = network_backward(params, cache, 2.0 * err / len(batch))
            params, opt_state = adam_update(params, grads, opt_state, lr=config.learning_rate)
        train_trace.append(total / n)
        test_trace.append(mse(_predict(params, x_test), y_test) if len(y_test) else float("nan"))
        if (epoch + 1) % 10 == 0 or epoch == 0:
            logger.debug(f"{regime} epoch {epoch + 1}/{config.epochs}: "
                         f"train {train_trace[-1]:.3e} test {test_trace[-1]:.3e}")

    if len(test_rows):
        final = evaluate_model(params, feature_stats, target_stats, test_rows, config.window_len, config.eval_mode)
        scores = (final.mse, final.mae, final.rmse)
    else:
        logger.warning(f"{regime}: empty test partition, metrics are NaN")
        scores = (float("nan"),) * 3

    report = TrainReport(
        regime=regime,
        config=config.model_dump(mode="json"),
        train_loss=train_trace,
        test_loss=test_trace,
        mse=scores[0],
        mae=scores[1],
        rmse=scores[2],
        n_train=int(n),
        n_test=int(len(y_test)),
        out_of_range_test_values=out_of_range,
        feature_stats=feature_stats,
        target_stats=target_stats,
        wall_clock_s=time.monotonic() - started,
    )
    logger.info(f"Trained {config.model_variant.value} on {regime}: test MSE {report.mse:.3e} "
                f"({report.n_train} train / {report.n_test} test windows, {report.wall_clock_s:.1f}s)")
    return params, report


def split_regimes(dataset: Records, per_c_rate: bool = True) -> Dict[str, List[CycleRecord]]:
    """One record list per cell (each synthetic cell is one C-rate regime), or a single pooled list"""
    records = _as_records(dataset)
    if not per_c_rate:
        return {POOLED_REGIME: records}
    regimes: Dict[str, List[CycleRecord]] = {}
    for r in records:
        regimes.setdefault(r.cell_id, []).append(r)
    return dict(sorted(regimes.items()))


def train_per_regime(dataset: Records, config: TrainConfig) -> Dict[str, Tuple[NetworkParams, TrainReport]]:
    return {
        regime: train_model(records, config, regime=regime)
        for regime, records in split_regimes(dataset, config.per_c_rate).items()
    }


def compare_variants(dataset: Records,
                     config: TrainConfig) -> Dict[str, Dict[str, Tuple[NetworkParams, TrainReport]]]:
    """Train EkfCnn and EkfCnnLstm with identical data, seed and hyperparameters"""
    return {
        variant.value: train_per_regime(dataset, config.model_copy(update={"model_variant": variant}))
        for variant in Variant
    }


def grid_configs(base: TrainConfig,
                 batch_sizes: Iterable[int] = GRID_BATCH_SIZES,
                 epochs: Iterable[int] = GRID_EPOCHS,
                 learning_rates: Iterable[float] = GRID_LEARNING_RATES) -> List[TrainConfig]:
    configs = [
        base.model_copy(update={"batch_size": b, "epochs": e, "learning_rate": lr})
        for b, e, lr in itertools.product(batch_sizes, epochs, learning_rates)
    ]
    if not configs:
        raise ValidationError("Hyperparameter grid is empty")
    return configs


def grid_result(config: TrainConfig, results: Dict[str, Tuple[NetworkParams, TrainReport]]) -> GridResult:
    """Score a grid point by the mean final test MSE over its regimes"""
    reports = {regime: report for regime, (_, report) in results.items()}
    return GridResult(config, float(np.mean([r.mse for r in reports.values()])), reports)


def rank_results(results: Iterable[GridResult]) -> List[GridResult]:
    return sorted(results, key=lambda g: (np.nan_to_num(g.test_mse, nan=np.inf), g.config.key))


def grid_search(dataset: Records, configs: Sequence[TrainConfig]) -> List[GridResult]:
    """Train every configuration and rank ascending by final test MSE"""
    if not configs:
        raise ValidationError("Hyperparameter grid is empty")
    results = []
    for i, config in enumerate(configs, start=1):
        logger.info(f"Grid run {i}/{len(configs)}: {config.key}")
        results.append(grid_result(config, train_per_regime(dataset, config)))
    return rank_results(results)
