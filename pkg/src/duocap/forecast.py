"""Constant-velocity Kalman forecasting of 3D keypoints.

One filter per keypoint with state ``[x, y, z, vx, vy, vz]``; the position is
observed directly. Process noise follows the white-acceleration model, so the
block structure of Q is ``[[dt^4/4, dt^3/2], [dt^3/2, dt^2]] * sigma_a^2`` per
axis. A tracked subject owns 17 such filters plus a rolling history of the
last 10 posterior keypoint sets, which is what the tracking loop uses to
(re)initialize velocities by least squares.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

HISTORY_LENGTH = 10


class ForecastError(ValueError):
    """Bad filter input (insufficient history, shape mismatch)."""


@dataclass(frozen=True)
class FilterTuning:
    """Noise model for the keypoint filters (meters, seconds).

    ``velocity_half_life`` (frames) weights the initialization line fit
    toward recent history, which matters when a subject decelerates into
    contact. ``miss_velocity_decay`` shrinks a keypoint's velocity each frame
    its measurement is missing, so coasting predictions do not run away.
    """

    sigma_accel: float = 10.0
    sigma_meas: float = 0.02
    init_pos_var: float = 1e-4
    init_vel_var: float = 0.25
    velocity_half_life: float = 0.5
    miss_velocity_decay: float = 0.6


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(6)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    return f


def process_noise(dt: float, sigma_accel: float) -> np.ndarray:
    q = np.zeros((6, 6))
    a = dt**4 / 4.0
    b = dt**3 / 2.0
    c = dt**2
    for ax in range(3):
        q[ax, ax] = a
        q[ax, ax + 3] = b
        q[ax + 3, ax] = b
        q[ax + 3, ax + 3] = c
    return q * sigma_accel**2


class KeypointFilter:
    """Kalman filter over one keypoint's position + velocity."""

    def __init__(self, position, velocity, dt: float, tuning: FilterTuning = FilterTuning()):
        position = np.asarray(position, dtype=np.float64)
        velocity = np.asarray(velocity, dtype=np.float64)
        if position.shape != (3,) or velocity.shape != (3,):
            raise ForecastError("position and velocity must be 3-vectors")
        if dt <= 0:
            raise ForecastError("dt must be positive")
        self.state = np.concatenate([position, velocity])
        self.covariance = np.diag(
            [tuning.init_pos_var] * 3 + [tuning.init_vel_var] * 3
        )
        self.dt = float(dt)
        self.tuning = tuning
        self._f = transition_matrix(self.dt)
        self._q = process_noise(self.dt, tuning.sigma_accel)
        self._r = np.eye(3) * tuning.sigma_meas**2

    @property
    def position(self) -> np.ndarray:
        return self.state[:3].copy()

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:].copy()

    def predict(self) -> np.ndarray:
        """Advance one step; returns the predicted position."""
        self.state = self._f @ self.state
        self.covariance = self._f @ self.covariance @ self._f.T + self._q
        self.covariance = 0.5 * (self.covariance + self.covariance.T)
        return self.state[:3].copy()

    def update(self, measurement) -> None:
        """Fuse a position measurement (Joseph-form covariance update)."""
        z = np.asarray(measurement, dtype=np.float64)
        if z.shape != (3,):
            raise ForecastError("measurement must be a 3-vector")
        p = self.covariance
        s = p[:3, :3] + self._r
        gain = np.linalg.solve(s.T, p[:, :3].T).T  # P H^T S^-1
        self.state = self.state + gain @ (z - self.state[:3])
        ikh = np.eye(6)
        ikh[:, :3] -= gain
        p = ikh @ p @ ikh.T + gain @ self._r @ gain.T
        self.covariance = 0.5 * (p + p.T)

    def coast(self) -> None:
        """Damp the velocity after a missed measurement, keeping position."""
        self.state[3:] *= self.tuning.miss_velocity_decay


def fit_velocity(
    positions: np.ndarray, dt: float, half_life: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares line fit over a (T, 3) history.

    With ``half_life`` (in frames) the fit is recency-weighted: a sample
    ``h`` frames before the end gets weight ``0.5 ** (h / half_life)``. An
    exact line is recovered exactly under any weighting. Returns
    ``(position_at_last_frame, velocity)``.
    """
    t = positions.shape[0]
    if t < 2:
        raise ForecastError("velocity fit needs at least 2 history frames")
    times = (np.arange(t) - (t - 1)) * dt  # last frame at time 0
    design = np.stack([np.ones(t), times], axis=1)
    target = positions
    if half_life is not None and half_life > 0:
        root_w = np.power(0.5, (t - 1 - np.arange(t)) / (2.0 * half_life))
        design = design * root_w[:, None]
        target = positions * root_w[:, None]
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return coef[0], coef[1]


class TrackedSubject:
    """A subject's bank of keypoint filters plus recent history."""

    def __init__(self, subject_id: int, filters, dt: float):
        self.subject_id = subject_id
        self.filters = list(filters)
        self.dt = float(dt)
        self.history: deque = deque(maxlen=HISTORY_LENGTH)

    @property
    def keypoint_count(self) -> int:
        return len(self.filters)

    def predict(self) -> np.ndarray:
        """One-step-ahead positions for all keypoints, (J, 3)."""
        return np.stack([f.predict() for f in self.filters])

    def update(self, measured, valid) -> None:
        """Fuse per-keypoint measurements; invalid keypoints keep the prior.

        Appends the resulting posterior keypoint set to the history.
        """
        measured = np.asarray(measured, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if measured.shape != (self.keypoint_count, 3) or valid.shape != (self.keypoint_count,):
            raise ForecastError("measurement arrays do not match the filter bank")
        for j, filt in enumerate(self.filters):
            if valid[j]:
                filt.update(measured[j])
            else:
                filt.coast()
        self.history.append(self.positions())

    def positions(self) -> np.ndarray:
        return np.stack([f.position for f in self.filters])


def init_from_history(
    positions,
    dt: float,
    subject_id: int = 0,
    tuning: FilterTuning = FilterTuning(),
) -> TrackedSubject:
    """Build a tracked subject from a (T, J, 3) keypoint history.

    Velocities come from an independent recency-weighted least-squares line
    fit per keypoint (half-life from the tuning); the filter states start at
    the fitted last-frame positions. Requires ``T >= 2``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ForecastError("history must have shape (T, J, 3)")
    if positions.shape[0] < 2:
        raise ForecastError("history must contain at least 2 frames")
    filters = []
    for j in range(positions.shape[1]):
        pos, vel = fit_velocity(positions[:, j], dt, tuning.velocity_half_life)
        filters.append(KeypointFilter(pos, vel, dt, tuning))
    subject = TrackedSubject(subject_id, filters, dt)
    for t in range(positions.shape[0]):
        subject.history.append(positions[t].copy())
    return subject
