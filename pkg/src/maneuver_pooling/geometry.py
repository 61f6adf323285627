"""Relative frames, polar conversion, heading and radial velocity.

All distances are meters, angles radians. Functions accept python floats
or numpy arrays and broadcast like numpy ufuncs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

FEET_TO_METERS = 0.3048
LANE_DIRECTION = np.pi / 2  # +y, the heading of a lane-aligned vehicle
STATIONARY_EPS = 0.01  # m


@dataclass(frozen=True)
class TrackPoint:
    t: int
    x: float
    y: float
    v: float
    a: float
    lane: int
    heading: float = LANE_DIRECTION


@dataclass
class Track:
    """Time-ordered kinematic record of one vehicle, stored column-wise."""

    vehicle_id: int
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    a: np.ndarray
    lane: np.ndarray
    heading: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64)
        for name in ("x", "y", "v", "a"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.lane = np.asarray(self.lane, dtype=np.int64)
        if self.heading is None:
            self.heading = estimate_headings(self.x, self.y) if len(self) else np.zeros(0)
        else:
            self.heading = np.asarray(self.heading, dtype=np.float64)

    def __len__(self):
        return len(self.frame)

    def point(self, i: int) -> TrackPoint:
        return TrackPoint(
            int(self.frame[i]), float(self.x[i]), float(self.y[i]), float(self.v[i]),
            float(self.a[i]), int(self.lane[i]), float(self.heading[i]),
        )

    def index_of(self, frames) -> np.ndarray:
        """Row indices of ``frames``; -1 where the frame is not recorded."""
        frames = np.asarray(frames, dtype=np.int64)
        idx = np.searchsorted(self.frame, frames)
        idx = np.clip(idx, 0, max(len(self.frame) - 1, 0))
        if len(self.frame) == 0:
            return np.full(frames.shape, -1)
        return np.where(self.frame[idx] == frames, idx, -1)


@dataclass(frozen=True)
class PolarPoint:
    r: float
    phi: float
    v_r: float | None = None


@dataclass(frozen=True)
class RelativeFrame:
    """Stationary frame planted at the ego position and speed at the anchor time."""

    origin_x: float
    origin_y: float
    origin_v: float


def _check_finite(*values):
    for value in values:
        if not np.all(np.isfinite(value)):
            raise InvalidInputError(f"non-finite input: {value!r}")


def to_relative(point, frame: RelativeFrame):
    """Translate ``point`` (a TrackPoint or an ``(x, y)`` pair) into ``frame``."""
    if isinstance(point, TrackPoint):
        x, y = point.x, point.y
    else:
        x, y = point
    _check_finite(x, y, frame.origin_x, frame.origin_y)
    return np.subtract(x, frame.origin_x), np.subtract(y, frame.origin_y)


def _polar_angle(dx, dy):
    phi = np.arctan2(dy, dx)
    # arctan2 returns -pi on the negative x axis when dy is -0.0
    phi = np.where(phi <= -np.pi, np.pi, phi)
    return np.where((dx == 0) & (dy == 0), 0.0, phi)


def cartesian_to_polar(dx, dy) -> PolarPoint:
    r = np.hypot(dx, dy)
    phi = _polar_angle(dx, dy)
    if np.ndim(r) == 0:
        return PolarPoint(float(r), float(phi))
    return PolarPoint(r, phi)


def polar_to_cartesian(p: PolarPoint):
    dx = p.r * np.cos(p.phi)
    dy = p.r * np.sin(p.phi)
    if np.ndim(dx) == 0:
        return float(dx), float(dy)
    return dx, dy


def estimate_headings(x, y, start: float = LANE_DIRECTION) -> np.ndarray:
    """Heading for every row of a track from backward differences.

    Row 0 gets ``start``; rows whose displacement is below
    ``STATIONARY_EPS`` carry the previous heading forward.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("cannot estimate heading of an empty track")
    ddx = np.diff(x)
    ddy = np.diff(y)
    raw = _polar_angle(ddx, ddy)
    moving = np.hypot(ddx, ddy) >= STATIONARY_EPS
    heading = np.empty_like(x)
    heading[0] = start
    # forward-fill the last moving heading over stationary rows
    last = np.where(moving, np.arange(1, x.size), 0)
    np.maximum.accumulate(last, out=last)
    values = np.concatenate(([start], raw))
    heading[1:] = values[last]
    return heading


def estimate_heading(track: Track, j: int) -> float:
    """Heading of ``track`` at row ``j``."""
    if len(track) == 0:
        raise InvalidInputError("cannot estimate heading of an empty track")
    if not 0 <= j < len(track):
        raise InvalidInputError(f"row {j} outside track of length {len(track)}")
    return float(estimate_headings(track.x[: j + 1], track.y[: j + 1])[j])


def radial_velocity(v, theta, phi, frame: RelativeFrame):
    """Speed relative to the frame origin, projected on the ray from the origin."""
    _check_finite(v, theta, phi, frame.origin_v)
    v_rel = np.subtract(v, frame.origin_v)
    out = v_rel * np.cos(np.subtract(theta, phi))
    return float(out) if np.ndim(out) == 0 else out


def polar_features(x, y, v, heading, frame: RelativeFrame) -> np.ndarray:
    """Stack ``(r, phi, v_r)`` for arrays of absolute positions, shape ``(..., 3)``."""
    dx, dy = to_relative((x, y), frame)
    p = cartesian_to_polar(dx, dy)
    v_r = radial_velocity(v, heading, p.phi, frame)
    return np.stack(np.broadcast_arrays(p.r, p.phi, v_r), axis=-1)
