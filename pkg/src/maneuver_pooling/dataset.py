"""Track ingestion, scene segmentation, maneuver labeling, splits and sample files."""
from __future__ import annotations

import enum
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import PipelineConfig
from .errors import DataError, SchemaError
from .geometry import FEET_TO_METERS, RelativeFrame, Track, polar_features

COLUMNS = ("vehicle_id", "frame_id", "local_x", "local_y", "lane_id", "velocity", "acceleration")
NGSIM_ALIASES = {
    "Vehicle_ID": "vehicle_id",
    "Frame_ID": "frame_id",
    "Local_X": "local_x",
    "Local_Y": "local_y",
    "Lane_ID": "lane_id",
    "v_Vel": "velocity",
    "v_Acc": "acceleration",
}


class Location(enum.IntEnum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2


class Acceleration(enum.IntEnum):
    CONST = 0
    SPEED = 1
    SLOW = 2


EVAL_CLASSES = ("keep", "merge", "left", "right")


@dataclass(frozen=True)
class ManeuverLabel:
    location: Location
    acceleration: Acceleration
    eval_class: str

    def __post_init__(self):
        if self.eval_class not in EVAL_CLASSES:
            raise ValueError(f"unknown eval class {self.eval_class!r}")
        if self.eval_class != "merge" and self.eval_class != self.location.name.lower():
            raise ValueError(f"eval class {self.eval_class!r} disagrees with location {self.location.name}")


@dataclass
class TrackTable:
    tracks: dict
    source: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tracks)

    def __getitem__(self, vehicle_id) -> Track:
        return self.tracks[vehicle_id]


@dataclass
class SceneSample:
    """One prediction instance expressed in the ego's relative frame at the anchor.

    Cartesian arrays hold ``(dx, dy)``; polar arrays hold ``(r, phi, v_r)``.
    Neighbor arrays are stacked ``(N, H, k)`` in ascending vehicle id.
    """

    sample_id: str
    vehicle_id: int
    anchor: int
    frame: RelativeFrame
    ego_lane: int
    ego_xy: np.ndarray  # (H, 2)
    ego_polar: np.ndarray | None  # (H, 3)
    neighbor_ids: np.ndarray  # (N,)
    neighbor_lanes: np.ndarray  # (N,)
    neighbor_xy: np.ndarray  # (N, H, 2)
    neighbor_polar: np.ndarray | None  # (N, H, 3)
    future_xy: np.ndarray  # (F, 2)
    future_polar: np.ndarray | None  # (F, 3)
    label: ManeuverLabel
    source: str = "synthetic"

    @property
    def n_neighbors(self):
        return len(self.neighbor_ids)

    @property
    def history_len(self):
        return len(self.ego_xy)

    @property
    def future_len(self):
        return len(self.future_xy)

    @property
    def has_polar(self):
        return self.ego_polar is not None and self.future_polar is not None


# ingestion

def load_tracks(path, units: str = "feet", source: str | None = None) -> TrackTable:
    """Read a per-(vehicle, frame) CSV into a :class:`TrackTable` in meters."""
    if units not in ("feet", "meters"):
        raise SchemaError(f"units must be 'feet' or 'meters', got {units!r}")
    frame = pd.read_csv(path, float_precision="round_trip")
    return tracks_from_frame(frame, units=units, source=source or str(path), line_offset=2)


def tracks_from_frame(df: pd.DataFrame, units: str = "meters", source: str = "table",
                      line_offset: int | None = None) -> TrackTable:
    """Build a table from a dataframe; ``line_offset`` maps row labels to file lines."""
    df = df.rename(columns={k: v for k, v in NGSIM_ALIASES.items() if k in df.columns})
    for col in COLUMNS:
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r}")
    df = df.loc[:, list(COLUMNS)]
    dup = df.duplicated(subset=["vehicle_id", "frame_id"])
    if dup.any():
        label = df.index[dup.to_numpy()][0]
        row = df.loc[label]
        where = f"line {label + line_offset}: " if line_offset is not None else ""
        raise DataError(
            f"{where}duplicate (vehicle, frame) pair: vehicle {int(row.vehicle_id)} frame {int(row.frame_id)}"
        )
    scale = FEET_TO_METERS if units == "feet" else 1.0
    tracks = {}
    for vid, group in df.groupby("vehicle_id", sort=True):
        group = group.sort_values("frame_id", kind="stable")
        frames = group["frame_id"].to_numpy(np.int64)
        if np.any(np.diff(frames) <= 0):
            raise DataError(f"non-monotone frames for vehicle {int(vid)}")
        tracks[int(vid)] = Track(
            vehicle_id=int(vid),
            frame=frames,
            x=group["local_x"].to_numpy(np.float64) * scale,
            y=group["local_y"].to_numpy(np.float64) * scale,
            v=group["velocity"].to_numpy(np.float64) * scale,
            a=group["acceleration"].to_numpy(np.float64) * scale,
            lane=group["lane_id"].to_numpy(np.int64),
        )
    return TrackTable(tracks, source=source)


def tracks_to_frame(table: TrackTable) -> pd.DataFrame:
    parts = []
    for vid in sorted(table.tracks):
        t = table.tracks[vid]
        parts.append(pd.DataFrame({
            "vehicle_id": np.full(len(t), vid, dtype=np.int64),
            "frame_id": t.frame,
            "local_x": t.x,
            "local_y": t.y,
            "lane_id": t.lane,
            "velocity": t.v,
            "acceleration": t.a,
        }))
    if not parts:
        return pd.DataFrame(columns=list(COLUMNS))
    return pd.concat(parts, ignore_index=True)


def write_tracks_csv(table: TrackTable, path):
    tracks_to_frame(table).to_csv(path, index=False, lineterminator="\n")


# labeling

def label_maneuvers(lanes, accelerations, cfg: PipelineConfig) -> ManeuverLabel:
    """Label one anchor from its native-rate future.

    ``lanes`` runs from the anchor frame to the end of the prediction
    horizon; ``accelerations`` covers the future frames after the anchor.
    """
    lanes = np.asarray(lanes)
    if lanes.size < 2 or not np.all(np.isfinite(lanes.astype(np.float64))) or np.any(lanes < 1):
        raise DataError("lane ids missing from the future window")
    start, end = int(lanes[0]), int(lanes[-1])
    if end == start:
        location = Location.KEEP
    elif (end < start) == cfg.lane_ids_increase_rightward:
        location = Location.LEFT
    else:
        location = Location.RIGHT
    mean_acc = float(np.mean(accelerations))
    if mean_acc > cfg.accel_threshold:
        acceleration = Acceleration.SPEED
    elif mean_acc < -cfg.accel_threshold:
        acceleration = Acceleration.SLOW
    else:
        acceleration = Acceleration.CONST
    eval_class = "merge" if start in cfg.ramp_lanes else location.name.lower()
    return ManeuverLabel(location, acceleration, eval_class)


# segmentation

class _FrameIndex:
    """Positions of every vehicle grouped by frame for window queries."""

    def __init__(self, table: TrackTable):
        vids, frames, xs, ys, lanes = [], [], [], [], []
        for vid, t in table.tracks.items():
            vids.append(np.full(len(t), vid, dtype=np.int64))
            frames.append(t.frame)
            xs.append(t.x)
            ys.append(t.y)
            lanes.append(t.lane)
        if not vids:
            self.frames = np.zeros(0, np.int64)
            return
        frames = np.concatenate(frames)
        order = np.lexsort((np.concatenate(vids), frames))
        self.frames = frames[order]
        self.vids = np.concatenate(vids)[order]
        self.x = np.concatenate(xs)[order]
        self.y = np.concatenate(ys)[order]
        self.lane = np.concatenate(lanes)[order]

    def at(self, frame):
        lo = np.searchsorted(self.frames, frame, side="left")
        hi = np.searchsorted(self.frames, frame, side="right")
        return slice(lo, hi)


def _anchors(track: Track, cfg: PipelineConfig):
    if len(track) == 0:
        return np.zeros(0, np.int64)
    hist, fut = cfg.history_native, cfg.future_native
    first = track.frame[0]
    candidates = track.frame[(track.frame - hist >= first) & (track.frame + fut <= track.frame[-1])]
    candidates = candidates[(candidates - first - hist) % cfg.anchor_stride == 0]
    if candidates.size == 0:
        return candidates
    window = candidates[:, None] + np.arange(-hist, fut + 1)[None, :]
    present = (track.index_of(window) >= 0).all(axis=1)
    return candidates[present]


def _vehicle_samples(vid, table, index, cfg, with_polar):
    track = table.tracks[vid]
    ds = cfg.downsample
    hist_off = np.arange(-cfg.history_native, 1, ds)
    fut_off = np.arange(ds, cfg.future_native + 1, ds)
    samples = []
    for t in _anchors(track, cfg):
        t = int(t)
        row = int(track.index_of(t))
        frame = RelativeFrame(float(track.x[row]), float(track.y[row]), float(track.v[row]))

        def features(tr, frames):
            idx = tr.index_of(frames)
            xy = np.stack([tr.x[idx] - frame.origin_x, tr.y[idx] - frame.origin_y], axis=-1)
            polar = None
            if with_polar:
                polar = polar_features(tr.x[idx], tr.y[idx], tr.v[idx], tr.heading[idx], frame)
            return xy, polar

        ego_xy, ego_polar = features(track, t + hist_off)
        fut_xy, fut_polar = features(track, t + fut_off)
        native = track.index_of(np.arange(t, t + cfg.future_native + 1))
        label = label_maneuvers(track.lane[native], track.a[native[1:]], cfg)

        sl = index.at(t)
        cand = index.vids[sl]
        dx = index.x[sl] - frame.origin_x
        dy = index.y[sl] - frame.origin_y
        keep = (cand != vid) & (np.abs(dx) <= cfg.d_lat) & (np.abs(dy) <= cfg.d_lon)
        nb_ids, nb_lanes, nb_xy, nb_polar = [], [], [], []
        for nid, nlane in zip(cand[keep], index.lane[sl][keep]):
            other = table.tracks[int(nid)]
            if np.any(other.index_of(t + hist_off) < 0):
                continue  # neighbors without a full history are dropped
            xy, polar = features(other, t + hist_off)
            nb_ids.append(int(nid))
            nb_lanes.append(int(nlane))
            nb_xy.append(xy)
            nb_polar.append(polar)
        n_hist = len(hist_off)
        samples.append(SceneSample(
            sample_id=f"{vid}:{t}",
            vehicle_id=int(vid),
            anchor=t,
            frame=frame,
            ego_lane=int(track.lane[row]),
            ego_xy=ego_xy,
            ego_polar=ego_polar,
            neighbor_ids=np.asarray(nb_ids, dtype=np.int64),
            neighbor_lanes=np.asarray(nb_lanes, dtype=np.int64),
            neighbor_xy=np.asarray(nb_xy, dtype=np.float64).reshape(len(nb_ids), n_hist, 2),
            neighbor_polar=(np.asarray(nb_polar, dtype=np.float64).reshape(len(nb_ids), n_hist, 3)
                            if with_polar else None),
            future_xy=fut_xy,
            future_polar=fut_polar,
            label=label,
            source=table.source,
        ))
    return samples


def segment_scenes(table: TrackTable, cfg: PipelineConfig, with_polar: bool = True,
                   workers: int = 1) -> list:
    """Cut every eligible (vehicle, anchor) into a :class:`SceneSample`.

    Output is ordered by (vehicle id, anchor frame) regardless of ``workers``.
    """
    index = _FrameIndex(table)
    vids = sorted(table.tracks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda v: _vehicle_samples(v, table, index, cfg, with_polar), vids))
    else:
        chunks = [_vehicle_samples(v, table, index, cfg, with_polar) for v in vids]
    return [s for chunk in chunks for s in chunk]


# splitting

def split_sizes(n: int, ratios) -> tuple:
    n_train = min(n, math.floor(ratios[0] * n + 0.5))
    n_val = min(n - n_train, math.floor(ratios[1] * n + 0.5))
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples, cfg: PipelineConfig):
    """Deterministic shuffled split into train/val/test lists."""
    samples = list(samples)
    n_train, n_val, _ = split_sizes(len(samples), cfg.split_ratios)
    order = np.random.default_rng(cfg.seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def split_manifest(splits, cfg: PipelineConfig) -> dict:
    names = ("train", "val", "test")
    return {
        "version": 1,
        "seed": cfg.seed,
        "ratios": list(cfg.split_ratios),
        "splits": {name: [s.sample_id for s in part] for name, part in zip(names, splits)},
    }


# sample container

SAMPLE_MAGIC = b"MPSS"
SAMPLE_VERSION = 1


def _encode_sample(s: SceneSample, with_polar: bool) -> bytes:
    header = {
        "id": s.sample_id,
        "vehicle": s.vehicle_id,
        "anchor": s.anchor,
        "source": s.source,
        "frame": [s.frame.origin_x, s.frame.origin_y, s.frame.origin_v],
        "ego_lane": s.ego_lane,
        "neighbors": [int(i) for i in s.neighbor_ids],
        "neighbor_lanes": [int(i) for i in s.neighbor_lanes],
        "label": [int(s.label.location), int(s.label.acceleration), s.label.eval_class],
        "H": s.history_len,
        "F": s.future_len,
    }
    arrays = [s.ego_xy, s.neighbor_xy, s.future_xy]
    if with_polar:
        arrays += [s.ego_polar, s.neighbor_polar, s.future_polar]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    raw = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return struct.pack("<II", len(raw), len(payload)) + raw + payload


def write_samples(path, samples, fields=("cartesian", "polar")):
    """Write samples to a length-prefixed binary record file.

    Layout: ``b"MPSS"``, version byte, u32 file-header length, JSON file
    header (``fields``, ``count``), then per record u32 header length, u32
    payload length, compact JSON record header and little-endian float64
    arrays in the order ego, neighbors, future (cartesian first, then
    polar when present).
    """
    samples = list(samples)
    with_polar = "polar" in fields
    if with_polar and not all(s.has_polar for s in samples):
        raise DataError("polar fields requested but some samples lack polar features")
    file_header = json.dumps({"fields": list(fields), "count": len(samples)},
                             separators=(",", ":"), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(SAMPLE_MAGIC)
    buf.write(struct.pack("<BI", SAMPLE_VERSION, len(file_header)))
    buf.write(file_header)
    for s in samples:
        buf.write(_encode_sample(s, with_polar))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_sample_fields(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read(4096)
    return _read_file_header(blob, path)[0]["fields"]


def _read_file_header(blob, path):
    if blob[:4] != SAMPLE_MAGIC:
        raise DataError(f"{path}: not a sample file")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != SAMPLE_VERSION:
        raise DataError(f"{path}: unsupported sample file version {version}")
    return json.loads(blob[9:9 + hlen]), 9 + hlen


def read_samples(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, pos = _read_file_header(blob, path)
    with_polar = "polar" in header["fields"]
    out = []
    for _ in range(header["count"]):
        hlen, plen = struct.unpack_from("<II", blob, pos)
        pos += 8
        h = json.loads(blob[pos:pos + hlen])
        pos += hlen
        values = np.frombuffer(blob, dtype="<f8", count=plen // 8, offset=pos).astype(np.float64)
        pos += plen
        n, hist, fut = len(h["neighbors"]), h["H"], h["F"]
        shapes = [(hist, 2), (n, hist, 2), (fut, 2)]
        if with_polar:
            shapes += [(hist, 3), (n, hist, 3), (fut, 3)]
        arrays, k = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(values[k:k + size].reshape(shape))
            k += size
        if not with_polar:
            arrays += [None, None, None]
        loc, acc, eval_class = h["label"]
        out.append(SceneSample(
            sample_id=h["id"], vehicle_id=h["vehicle"], anchor=h["anchor"],
            frame=RelativeFrame(*h["frame"]), ego_lane=h["ego_lane"],
            ego_xy=arrays[0], ego_polar=arrays[3],
            neighbor_ids=np.asarray(h["neighbors"], dtype=np.int64),
            neighbor_lanes=np.asarray(h["neighbor_lanes"], dtype=np.int64),
            neighbor_xy=arrays[1], neighbor_polar=arrays[4],
            future_xy=arrays[2], future_polar=arrays[5],
            label=ManeuverLabel(Location(loc), Acceleration(acc), eval_class),
            source=h["source"],
        ))
    return out


def class_histogram(samples) -> dict:
    hist = {
        "eval_class": {c: 0 for c in EVAL_CLASSES},
        "location": {m.name.lower(): 0 for m in Location},
        "acceleration": {m.name.lower(): 0 for m in Acceleration},
    }
    for s in samples:
        hist["eval_class"][s.label.eval_class] += 1
        hist["location"][s.label.location.name.lower()] += 1
        hist["acceleration"][s.label.acceleration.name.lower()] += 1
    return hist
