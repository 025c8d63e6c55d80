"""Constant-velocity Kalman filter over box state (cx, cy, s, r, vcx, vcy, vs).

``s`` is box area and ``r = w / h`` the aspect ratio, which carries no
velocity term.  Noise levels are expressed relative to the box size so one
configuration works for near and far objects; time is in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import BBox

NDIM = 7
_H = np.zeros((4, NDIM))
_H[0, 0] = _H[1, 1] = _H[2, 2] = _H[3, 3] = 1.0


class KalmanNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KalmanConfig:
    # initial standard deviations (position/velocity relative to box height,
    # area terms relative to area, ratio relative to ratio)
    init_pos: float = 0.05
    init_area: float = 0.05
    init_ratio: float = 0.05
    init_vel: float = 1.0
    init_area_vel: float = 0.5
    # measurement noise, with an absolute floor in pixels for the centre
    meas_pos: float = 0.01
    meas_pos_floor: float = 1.0
    meas_area: float = 0.04
    meas_ratio: float = 0.04
    # process noise spectral densities (per second)
    proc_pos: float = 0.01
    proc_vel: float = 0.3
    proc_area: float = 0.01
    proc_area_vel: float = 0.05
    proc_ratio: float = 0.02
    s_min: float = 1.0
    jitter: float = 1e-6


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def bbox(self) -> BBox:
        return state_to_bbox(self.mean)


def bbox_to_z(b: BBox) -> np.ndarray:
    return np.array([b.cx, b.cy, b.area, b.w / b.h])


def state_to_bbox(mean: np.ndarray) -> BBox:
    s = max(float(mean[2]), 1e-9)
    r = max(float(mean[3]), 1e-9)
    w = math.sqrt(s * r)
    h = s / w
    return BBox.from_center(float(mean[0]), float(mean[1]), w, h)


def _height(s: float, r: float) -> float:
    return math.sqrt(max(s, 1e-9) / max(r, 1e-9))


def kalman_init(b: BBox, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    z = bbox_to_z(b)
    mean = np.concatenate([z, np.zeros(3)])
    h, s, r = b.h, z[2], z[3]
    std = np.array(
        [
            cfg.init_pos * h,
            cfg.init_pos * h,
            cfg.init_area * s,
            cfg.init_ratio * r,
            cfg.init_vel * h,
            cfg.init_vel * h,
            cfg.init_area_vel * s,
        ]
    )
    return KalmanState(mean, np.diag(std**2))


def _transition(dt: float) -> np.ndarray:
    f = np.eye(NDIM)
    f[0, 4] = f[1, 5] = f[2, 6] = dt
    return f


def kalman_predict(st: KalmanState, dt: float, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    f = _transition(dt)
    mean = f @ st.mean
    if mean[2] < cfg.s_min:
        mean[2] = cfg.s_min
    s, r = float(mean[2]), float(mean[3])
    h = _height(s, r)
    q = np.array(
        [
            cfg.proc_pos * h,
            cfg.proc_pos * h,
            cfg.proc_area * s,
            cfg.proc_ratio * r,
            cfg.proc_vel * h,
            cfg.proc_vel * h,
            cfg.proc_area_vel * s,
        ]
    )
    cov = f @ st.covariance @ f.T + np.diag(q**2) * dt
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean, cov)


def measurement_noise(b: BBox, cfg: KalmanConfig = KalmanConfig()) -> np.ndarray:
    pos = max(cfg.meas_pos * b.h, cfg.meas_pos_floor)
    std = np.array([pos, pos, cfg.meas_area * b.area, cfg.meas_ratio * b.w / b.h])
    return np.diag(std**2)


def kalman_update(
    st: KalmanState, z: BBox, cfg: KalmanConfig = KalmanConfig(), noise: np.ndarray | None = None
) -> KalmanState:
    """Correct ``st`` with measured box ``z`` (Joseph-form covariance update)."""
    r_mat = measurement_noise(z, cfg) if noise is None else noise
    p = st.covariance
    innov = bbox_to_z(z) - _H @ st.mean
    s_mat = _H @ p @ _H.T + r_mat + cfg.jitter * np.eye(4)
    try:
        gain = np.linalg.solve(s_mat, _H @ p).T
    except np.linalg.LinAlgError as exc:
        raise KalmanNumericalError("singular innovation covariance") from exc
    if not np.all(np.isfinite(gain)):
        raise KalmanNumericalError("non-finite Kalman gain")
    mean = st.mean + gain @ innov
    mean[2] = max(mean[2], cfg.s_min)
    mean[3] = max(mean[3], 1e-6)
    ikh = np.eye(NDIM) - gain @ _H
    cov = ikh @ p @ ikh.T + gain @ r_mat @ gain.T
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean, cov)
