"""
Extended Kalman Filter (predict/update) and the scalar random-walk
specialization used to denoise cycler current and voltage columns.
"""
import logging
from dataclasses import dataclass, replace
from itertools import groupby
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import CycleRecord
from .errors import DimensionMismatch, SingularInnovation, ValidationError

logger = logging.getLogger(__name__)

# Floor for the data-driven measurement variance of a perfectly flat signal
MIN_MEASUREMENT_VARIANCE = 1e-12

TransitionFn = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]
ObservationFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EkfModel:
    """
    Nonlinear state-space model for the filter.

    @param f: state transition x_k = f(x_{k-1}, u_{k-1})
    @param h: observation z_k = h(x_k)
    @param jac_f: Jacobian of f with respect to the state
    @param jac_h: Jacobian of h with respect to the state
    @param q: process noise covariance
    @param r: measurement noise covariance (must be invertible)
    """
    f: TransitionFn
    h: ObservationFn
    jac_f: TransitionFn
    jac_h: ObservationFn
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        r = np.atleast_2d(np.asarray(self.r, dtype=np.float64))
        if q.shape[0] != q.shape[1] or r.shape[0] != r.shape[1]:
            raise DimensionMismatch("q and r must be square")
        if not np.allclose(q, q.T) or not np.allclose(r, r.T):
            raise ValidationError("q and r must be symmetric")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @classmethod
    def linear(cls, a: np.ndarray, h: np.ndarray, q: np.ndarray, r: np.ndarray,
               b: Optional[np.ndarray] = None) -> "EkfModel":
        """Model with f(x, u) = A x + B u and h(x) = H x"""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        hm = np.atleast_2d(np.asarray(h, dtype=np.float64))
        bm = None if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))

        def f(x, u):
            out = a @ x
            if bm is not None and u is not None:
                out = out + bm @ np.atleast_1d(u)
            return out

        return cls(
            f=f,
            h=lambda x: hm @ x,
            jac_f=lambda x, u: a,
            jac_h=lambda x: hm,
            q=q,
            r=r,
        )

    @classmethod
    def random_walk(cls, q_scalar: float, r_scalar: float) -> "EkfModel":
        """Scalar f(x) = x, h(x) = x; the control input is ignored"""
        one = np.eye(1)
        return cls(
            f=lambda x, u: x,
            h=lambda x: x,
            jac_f=lambda x, u: one,
            jac_h=lambda x: one,
            q=np.array([[q_scalar]]),
            r=np.array([[r_scalar]]),
        )


@dataclass(frozen=True, eq=False)
class EkfState:
    x_hat: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x_hat, dtype=np.float64))
        p = np.atleast_2d(np.asarray(self.p, dtype=np.float64))
        if x.ndim != 1 or p.shape != (x.size, x.size):
            raise DimensionMismatch(f"state of size {x.size} with covariance {p.shape}")
        object.__setattr__(self, "x_hat", x)
        object.__setattr__(self, "p", p)


def ekf_predict(state: EkfState, model: EkfModel, control: Optional[np.ndarray] = None) -> EkfState:
    """x <- f(x, u); P <- F P F^T + Q, with F taken at the previous estimate"""
    n = state.x_hat.size
    if model.q.shape != (n, n):
        raise DimensionMismatch(f"q is {model.q.shape}, state has size {n}")
    jac = np.atleast_2d(model.jac_f(state.x_hat, control))
    if jac.shape != (n, n):
        raise DimensionMismatch(f"jac_f is {jac.shape}, expected {(n, n)}")
    x_pred = np.atleast_1d(model.f(state.x_hat, control))
    if x_pred.shape != (n,):
        raise DimensionMismatch(f"f returned shape {x_pred.shape}, expected {(n,)}")
    p_pred = jac @ state.p @ jac.T + model.q
    return EkfState(x_pred, p_pred)


def ekf_update(state: EkfState, model: EkfModel, z: np.ndarray) -> Tuple[EkfState, np.ndarray]:
    """Measurement update; returns the corrected state and the residual z - h(x)"""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    n, m = state.x_hat.size, z.size
    if model.r.shape != (m, m):
        raise DimensionMismatch(f"r is {model.r.shape}, measurement has size {m}")
    # H is evaluated at the predicted state
    jac = np.atleast_2d(model.jac_h(state.x_hat))
    if jac.shape != (m, n):
        raise DimensionMismatch(f"jac_h is {jac.shape}, expected {(m, n)}")

    residual = z - np.atleast_1d(model.h(state.x_hat))
    innovation = jac @ state.p @ jac.T + model.r
    try:
        gain = state.p @ jac.T @ np.linalg.inv(innovation)
    except np.linalg.LinAlgError as e:
        raise SingularInnovation(f"Innovation covariance not invertible: {str(e)}") from e
    if not np.all(np.isfinite(gain)):
        raise SingularInnovation("Innovation covariance not invertible")

    x_new = state.x_hat + gain @ residual
    p_new = (np.eye(n) - gain @ jac) @ state.p
    p_new = (p_new + p_new.T) / 2.0
    return EkfState(x_new, p_new), residual


def default_noise(samples: Sequence[float]) -> Tuple[float, float]:
    """Data-driven (q, r): r is half the sample variance of the first differences, q = r / 100"""
    diffs = np.diff(np.asarray(samples, dtype=np.float64))
    r = float(np.var(diffs, ddof=1) / 2.0) if diffs.size >= 2 else 0.0
    r = max(r, MIN_MEASUREMENT_VARIANCE)
    return r / 100.0, r


def denoise_signal(samples: Sequence[float], q_scalar: Optional[float] = None,
                   r_scalar: Optional[float] = None) -> List[float]:
    """Filter a sequence with the scalar random-walk EKF.

    The filter starts from the first measurement with P0 = r, and every
    later sample goes through one predict/update pair. Missing noise
    parameters come from default_noise.
    """
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("Cannot denoise an empty signal")
    default_q, default_r = default_noise(values)
    q = default_q if q_scalar is None else float(q_scalar)
    r = default_r if r_scalar is None else float(r_scalar)
    if q < 0:
        raise ValidationError("q_scalar must be non-negative")
    if r <= 0:
        raise ValidationError("r_scalar must be positive")

    model = EkfModel.random_walk(q, r)
    state = EkfState(values[:1], [[r]])
    filtered = [float(values[0])]
    for z in values[1:]:
        state, _ = ekf_update(ekf_predict(state, model), model, z)
        filtered.append(float(state.x_hat[0]))
    return filtered


def denoise_records(records: Sequence[CycleRecord], q_scalar: Optional[float] = None,
                    r_scalar: Optional[float] = None) -> Tuple[List[CycleRecord], List[float], List[float]]:
    """Denoise current and voltage per contiguous (cell, cycle, step) segment.

    Returns the filtered records and the raw current and voltage columns
    in record order.
    """
    filtered: List[CycleRecord] = []
    raw_current: List[float] = []
    raw_voltage: List[float] = []
    for _, group in groupby(records, key=lambda r: (r.cell_id, r.cycle, r.step)):
        rows = list(group)
        current = [r.current_a for r in rows]
        voltage = [r.voltage_v for r in rows]
        current_hat = denoise_signal(current, q_scalar, r_scalar)
        voltage_hat = denoise_signal(voltage, q_scalar, r_scalar)
        filtered.extend(
            replace(r, current_a=i, voltage_v=v) for r, i, v in zip(rows, current_hat, voltage_hat)
        )
        raw_current.extend(current)
        raw_voltage.extend(voltage)
    logger.info(f"Denoised {len(filtered)} records")
    return filtered, raw_current, raw_voltage
