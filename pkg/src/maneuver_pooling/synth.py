"""Synthetic multi-lane highway scenes with maneuvers known by construction.

Lane keeping is constant lateral position; lane changes and merges follow
a quintic lateral profile lasting four seconds. The lane id switches at the
profile midpoint, where the vehicle crosses the lane boundary. Each vehicle
holds one constant longitudinal acceleration for the whole recording.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import FOOT, PipelineConfig
from .dataset import Acceleration, Location, ManeuverLabel, TrackTable
from .errors import ConfigError
from .geometry import Track

KINDS = ("keep", "left", "right", "merge")
ACCEL_CLASSES = ("const", "speed", "slow")
LANE_CHANGE_FRAMES = 40  # 4 s at 10 Hz


@dataclass
class SynthConfig:
    lanes: int = 3
    vehicles: int = 20
    mix: tuple = (1.0, 0.0, 0.0, 0.0)  # keep : left : right : merge
    accel_mix: tuple = (0.6, 0.2, 0.2)  # const : speed : slow
    noise: float = 0.0  # std of position noise, m
    seed: int = 0
    duration: float = 15.0  # s
    native_rate: int = 10
    lane_width: float = 12 * FOOT
    ramp_lane: int = 7
    base_speed: float = 25.0  # m/s
    speed_spread: float = 2.0  # m/s
    accel_range: tuple = (0.5, 1.2)  # |a| for speed/slow vehicles, m/s^2
    gap_range: tuple = (12.0, 30.0)  # longitudinal spacing within a lane, m

    def validate(self):
        if self.lanes < 2:
            raise ConfigError("need at least 2 lanes")
        if self.vehicles < 1:
            raise ConfigError("need at least one vehicle")
        if 1 <= self.ramp_lane <= self.lanes:
            raise ConfigError(f"ramp lane id {self.ramp_lane} collides with main lanes 1..{self.lanes}")
        if len(self.mix) != 4 or len(self.accel_mix) != 3:
            raise ConfigError("mix needs 4 entries (keep:left:right:merge), accel_mix 3 (const:speed:slow)")
        if self.duration * self.native_rate < 2 * LANE_CHANGE_FRAMES:
            raise ConfigError("duration too short for a lane change")
        slow_end = self.base_speed - self.speed_spread - self.accel_range[1] * self.duration
        if slow_end <= 0:
            raise ConfigError("slowing vehicles would stop before the end of the recording")


def allocate_counts(mix, total: int) -> list:
    """Turn a mix into integer counts that sum to ``total``.

    Fractions (sum <= 1) use largest-remainder rounding. Integer counts
    (sum > 1) are taken literally and the first class absorbs the rest.
    """
    mix = [float(m) for m in mix]
    if any(m < 0 or not math.isfinite(m) for m in mix) or sum(mix) <= 0:
        raise ConfigError(f"invalid mix {mix}")
    if sum(mix) > 1 + 1e-9:
        if any(m != int(m) for m in mix):
            raise ConfigError(f"mix {mix} sums above 1 but is not a list of counts")
        counts = [int(m) for m in mix]
        if sum(counts) > total:
            raise ConfigError(f"mix asks for {sum(counts)} vehicles but only {total} exist")
        counts[0] += total - sum(counts)
        return counts
    fractions = [m / sum(mix) for m in mix]
    raw = [f * total for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def _quintic(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def synth_generate(cfg: SynthConfig) -> TrackTable:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    kind_counts = allocate_counts(cfg.mix, cfg.vehicles)
    accel_counts = allocate_counts(cfg.accel_mix, cfg.vehicles)
    kinds = [k for k, n in zip(KINDS, kind_counts) for _ in range(n)]
    accels = [a for a, n in zip(ACCEL_CLASSES, accel_counts) for _ in range(n)]
    accels = [accels[i] for i in rng.permutation(len(accels))]

    n_frames = int(round(cfg.duration * cfg.native_rate)) + 1
    times = np.arange(n_frames) / cfg.native_rate
    ramp_x = (cfg.lanes + 0.5) * cfg.lane_width
    next_y = {}
    tracks, maneuvers = {}, {}
    for vid, (kind, accel_class) in enumerate(zip(kinds, accels), start=1):
        if kind == "keep":
            lane = int(rng.integers(1, cfg.lanes + 1))
        elif kind == "left":
            lane = int(rng.integers(2, cfg.lanes + 1))
        elif kind == "right":
            lane = int(rng.integers(1, cfg.lanes))
        else:
            lane = cfg.ramp_lane
        target = {"keep": lane, "left": lane - 1, "right": lane + 1, "merge": cfg.lanes}[kind]

        y0 = next_y.get(lane, 0.0) + float(rng.uniform(*cfg.gap_range))
        next_y[lane] = y0
        v0 = cfg.base_speed + float(rng.uniform(-cfg.speed_spread, cfg.speed_spread))
        magnitude = float(rng.uniform(*cfg.accel_range))
        a = {"const": 0.0, "speed": magnitude, "slow": -magnitude}[accel_class]

        v = v0 + a * times
        y = y0 + v0 * times + 0.5 * a * times ** 2
        x0 = ramp_x if lane == cfg.ramp_lane else (lane - 0.5) * cfg.lane_width
        x1 = (target - 0.5) * cfg.lane_width
        lanes = np.full(n_frames, lane, dtype=np.int64)
        cross = None
        if kind == "keep":
            x = np.full(n_frames, x0)
        else:
            start = int(rng.integers(30, n_frames - LANE_CHANGE_FRAMES))
            cross = start + LANE_CHANGE_FRAMES // 2
            x = x0 + (x1 - x0) * _quintic((np.arange(n_frames) - start) / LANE_CHANGE_FRAMES)
            lanes[cross:] = target
        if cfg.noise > 0:
            x = x + rng.normal(0.0, cfg.noise, n_frames)
            y = y + rng.normal(0.0, cfg.noise, n_frames)
        tracks[vid] = Track(vid, np.arange(n_frames), x, y, v, np.full(n_frames, a), lanes)
        maneuvers[vid] = {
            "kind": kind,
            "accel": accel_class,
            "from_lane": lane,
            "to_lane": target,
            "cross_frame": cross,
        }
    meta = {"maneuvers": maneuvers, "ramp_lane": cfg.ramp_lane, "lanes": cfg.lanes}
    return TrackTable(tracks, source="synthetic", meta=meta)


def intended_label(table: TrackTable, vehicle_id: int, anchor: int, cfg: PipelineConfig) -> ManeuverLabel:
    """Label implied by the generator's schedule, independent of the lane column."""
    m = table.meta["maneuvers"][vehicle_id]
    cross = m["cross_frame"]
    location = Location.KEEP
    if cross is not None and anchor < cross <= anchor + cfg.future_native:
        location = Location.RIGHT if m["kind"] == "right" else Location.LEFT
    acceleration = {"const": Acceleration.CONST, "speed": Acceleration.SPEED,
                    "slow": Acceleration.SLOW}[m["accel"]]
    on_ramp = m["kind"] == "merge" and (cross is None or anchor < cross)
    eval_class = "merge" if on_ramp else location.name.lower()
    return ManeuverLabel(location, acceleration, eval_class)
