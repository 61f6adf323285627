"""Neighborhood selection, social tensors and the pooling strategies.

Relational pooling (``sgan``, ``polar``, ``polar_vr``) embeds every
neighbor's hidden state together with its position relative to the ego and
max-reduces across neighbors. Grid pooling (``slstm``, ``csp``) places
hidden states on a lane-by-row occupancy grid first.

Floating-point matrix products are not guaranteed to give bitwise equal
rows when the row order changes, so every routine here sorts neighbors by
vehicle id and drops out-of-window vehicles *before* any arithmetic. That
is what makes permutation invariance and locality exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GridConfig, ModelConfig, NeighborhoodConfig
from .errors import ConfigError, ShapeError
from .geometry import RelativeFrame, polar_features
from .nn import Tensor, affine, concat, conv2d, gather_rows, leaky_relu, maxpool2d, padded_max
from .nn import scatter_rows, sumpool2d

RELATIONAL_MODES = {"sgan": "euclidean", "polar": "polar", "polar_vr": "polar_vr"}
GRID_STRATEGIES = ("slstm", "csp")
SLSTM_WINDOW = (4, 3)
SLSTM_STRIDE = (3, 3)
CSP_CONV1 = (3, 3)
CSP_CONV2 = (3, 1)
CSP_POOL = (2, 1)


@dataclass
class PoolingScene:
    """Neighbor states of one scene at the anchor, relative to the ego.

    ``neighbor_polar`` holds ``(r, phi, v_r)`` and may be ``None`` when
    only euclidean pooling is needed.
    """

    ego_lane: int
    neighbor_ids: np.ndarray  # (N,)
    neighbor_lanes: np.ndarray  # (N,)
    neighbor_xy: np.ndarray  # (N, 2)
    neighbor_polar: np.ndarray | None = None  # (N, 3)

    @classmethod
    def from_sample(cls, sample) -> "PoolingScene":
        return cls(
            ego_lane=sample.ego_lane,
            neighbor_ids=np.asarray(sample.neighbor_ids, dtype=np.int64),
            neighbor_lanes=np.asarray(sample.neighbor_lanes, dtype=np.int64),
            neighbor_xy=np.asarray(sample.neighbor_xy, dtype=np.float64)[:, -1, :].reshape(-1, 2),
            neighbor_polar=(None if sample.neighbor_polar is None
                            else np.asarray(sample.neighbor_polar)[:, -1, :].reshape(-1, 3)),
        )

    @classmethod
    def from_states(cls, ego, neighbors) -> "PoolingScene":
        """Build from absolute states ``(vehicle_id, x, y, v, heading, lane)``."""
        _, ex, ey, ev, _, elane = ego
        frame = RelativeFrame(float(ex), float(ey), float(ev))
        rows = np.asarray([n[1:5] for n in neighbors], dtype=np.float64).reshape(-1, 4)
        return cls(
            ego_lane=int(elane),
            neighbor_ids=np.asarray([n[0] for n in neighbors], dtype=np.int64),
            neighbor_lanes=np.asarray([n[5] for n in neighbors], dtype=np.int64),
            neighbor_xy=np.stack([rows[:, 0] - frame.origin_x, rows[:, 1] - frame.origin_y], axis=-1),
            neighbor_polar=polar_features(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], frame),
        )

    def __len__(self):
        return len(self.neighbor_ids)


# neighborhood and grid geometry

def canonical_order(ids) -> np.ndarray:
    """Positions that sort ``ids`` ascending (stable)."""
    return np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")


def select_neighbors(scene: PoolingScene, cfg: NeighborhoodConfig) -> np.ndarray:
    """Indices of neighbors inside the closed window, ordered by vehicle id."""
    xy = np.asarray(scene.neighbor_xy, dtype=np.float64).reshape(-1, 2)
    inside = (np.abs(xy[:, 0]) <= cfg.d_lat) & (np.abs(xy[:, 1]) <= cfg.d_lon)
    order = canonical_order(scene.neighbor_ids)
    return order[inside[order]]


def _grid_rows(dy, g: GridConfig):
    # half-way points go to the row further ahead
    return np.floor(np.asarray(dy, dtype=np.float64) / g.row_pitch + 0.5).astype(np.int64) + g.center[0]


def grid_cell_of(dx, dy, ego_lane, nb_lane, g: GridConfig):
    """``(row, col)`` of a vehicle on the ego's grid, or ``None`` off the grid.

    Columns are lane offsets (left, same, right); rows step ``row_pitch``
    along the road with the ego on the center row. ``dx`` is unused because
    lane membership already fixes the column.
    """
    col = int(nb_lane) - int(ego_lane) + g.center[1]
    row = int(_grid_rows(dy, g))
    if not (0 <= col < g.cols and 0 <= row < g.rows):
        return None
    return row, col


def assign_cells(scene: PoolingScene, g: GridConfig, candidates=None):
    """Resolve which neighbor occupies each grid cell.

    Returns ``(neighbor_index, row, col)`` arrays, one entry per occupied
    cell. The center cell belongs to the ego. When several neighbors share
    a cell, the one nearest the cell center wins and ties go to the lower
    vehicle id.
    """
    idx = canonical_order(scene.neighbor_ids) if candidates is None else np.asarray(candidates)
    xy = np.asarray(scene.neighbor_xy, dtype=np.float64).reshape(-1, 2)[idx]
    lanes = np.asarray(scene.neighbor_lanes, dtype=np.int64)[idx]
    ids = np.asarray(scene.neighbor_ids, dtype=np.int64)[idx]
    cols = lanes - int(scene.ego_lane) + g.center[1]
    rows = _grid_rows(xy[:, 1], g)
    ok = (cols >= 0) & (cols < g.cols) & (rows >= 0) & (rows < g.rows)
    ok &= ~((rows == g.center[0]) & (cols == g.center[1]))
    if not ok.any():
        empty = np.zeros(0, np.int64)
        return empty, empty, empty
    idx, xy, ids, rows, cols = idx[ok], xy[ok], ids[ok], rows[ok], cols[ok]
    # lateral center of a column is one lane width per offset; only the
    # longitudinal distance separates vehicles that share a lane
    dist = np.abs(xy[:, 1] - (rows - g.center[0]) * g.row_pitch)
    order = np.lexsort((ids, dist, cols, rows))
    cell = rows[order] * g.cols + cols[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    win = order[first]
    return idx[win], rows[win], cols[win]


def build_social_tensor(scene: PoolingScene, hidden: Tensor, ego_hidden: Tensor, g: GridConfig) -> Tensor:
    """Grid ``(rows, cols, Hd)`` holding the ego at the center and neighbors in their cells."""
    if hidden.ndim != 2 or hidden.shape[0] != len(scene):
        raise ShapeError(f"hidden states {hidden.shape} do not match {len(scene)} neighbors")
    hd = ego_hidden.shape[-1]
    if hidden.shape[1] != hd:
        raise ShapeError(f"neighbor hidden width {hidden.shape[1]} != ego hidden width {hd}")
    nb, rows, cols = assign_cells(scene, g)
    stacked = concat([ego_hidden.reshape(1, hd), hidden], axis=0)
    src = np.concatenate([[0], nb + 1])
    cells = np.concatenate([[g.center[0] * g.cols + g.center[1]], rows * g.cols + cols])
    grid = scatter_rows(gather_rows(stacked, src), cells, g.rows * g.cols)
    return grid.reshape(g.rows, g.cols, hd)


# parameters

def pooling_width(cfg: ModelConfig) -> int:
    g = cfg.grid
    if cfg.pooling == "slstm":
        (kh, kw), (sh, sw) = SLSTM_WINDOW, SLSTM_STRIDE
        if kh > g.rows or kw > g.cols:
            raise ConfigError(f"grid {g.rows}x{g.cols} is smaller than the sum-pool window {SLSTM_WINDOW}")
        return cfg.slstm_embed * ((g.rows - kh) // sh + 1) * ((g.cols - kw) // sw + 1)
    if cfg.pooling == "csp":
        h = g.rows - CSP_CONV1[0] + 1 - CSP_CONV2[0] + 1
        w = g.cols - CSP_CONV1[1] + 1 - CSP_CONV2[1] + 1
        if h < CSP_POOL[0] or w < CSP_POOL[1]:
            raise ConfigError(f"grid {g.rows}x{g.cols} is too small for the convolutional stack")
        return cfg.csp_channels * (h // CSP_POOL[0]) * (w // CSP_POOL[1])
    return cfg.mlp_width


def relative_width(mode: str) -> int:
    return {"euclidean": 2, "polar": 2, "polar_vr": 3}[mode]


def init_pooling_params(store, cfg: ModelConfig):
    hd = cfg.enc_hidden
    if cfg.pooling == "slstm":
        store.linear("pool.embed", hd, cfg.slstm_embed)
    elif cfg.pooling == "csp":
        store.linear("pool.embed", hd, cfg.csp_embed)
        c, e = cfg.csp_channels, cfg.csp_embed
        store.uniform("pool.conv1.weight", (c, e) + CSP_CONV1, e * CSP_CONV1[0] * CSP_CONV1[1])
        store.uniform("pool.conv1.bias", (c,), e * CSP_CONV1[0] * CSP_CONV1[1])
        store.uniform("pool.conv2.weight", (c, c) + CSP_CONV2, c * CSP_CONV2[0] * CSP_CONV2[1])
        store.uniform("pool.conv2.bias", (c,), c * CSP_CONV2[0] * CSP_CONV2[1])
    else:
        mode = RELATIONAL_MODES[cfg.pooling]
        store.linear("pool.mlp", hd + relative_width(mode), cfg.mlp_width)
    return store


# grid pooling

def _embed_cells(st: Tensor, params, prefix="pool.embed"):
    w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    if st.shape[-1] != w.shape[1]:
        raise ShapeError(f"social tensor width {st.shape[-1]} does not match embedding {w.shape}")
    lead = st.shape[:-1]
    flat = affine(w, b, st.reshape(-1, st.shape[-1]))
    return flat.reshape(*lead, w.shape[0])


def _channels_first(x: Tensor) -> Tensor:
    # (..., rows, cols, C) -> (N, C, rows, cols)
    batched = x.reshape((-1,) + x.shape[-3:])
    return batched.transpose(0, 3, 1, 2)


def pool_slstm(st: Tensor, params) -> Tensor:
    """Per-cell affine embedding then sum-pooling with a (4, 3) window, flattened.

    Accepts ``(rows, cols, Hd)`` or a batch ``(B, rows, cols, Hd)``.
    """
    single = st.ndim == 3
    emb = _channels_first(_embed_cells(st, params))
    pooled = sumpool2d(emb, SLSTM_WINDOW, SLSTM_STRIDE)
    out = pooled.reshape(pooled.shape[0], -1)
    return out.reshape(-1) if single else out


def pool_csp(st: Tensor, params, slope: float = 0.1) -> Tensor:
    single = st.ndim == 3
    x = _channels_first(_embed_cells(st, params))
    x = leaky_relu(conv2d(params["pool.conv1.weight"], x, params["pool.conv1.bias"]), slope)
    x = leaky_relu(conv2d(params["pool.conv2.weight"], x, params["pool.conv2.bias"]), slope)
    x = maxpool2d(x, CSP_POOL)
    out = x.reshape(x.shape[0], -1)
    return out.reshape(-1) if single else out


# relational pooling

def relative_features(xy, polar, mode: str, cfg: ModelConfig) -> np.ndarray:
    """Scaled relative-position features fed next to each neighbor's hidden state."""
    if mode == "euclidean":
        return np.asarray(xy, dtype=np.float64).reshape(-1, 2) / cfg.position_scale
    if polar is None:
        raise ShapeError(f"{mode} pooling needs polar features")
    polar = np.asarray(polar, dtype=np.float64).reshape(-1, 3)
    feats = [polar[:, :1] / cfg.position_scale, polar[:, 1:2]]
    if mode == "polar_vr":
        feats.append(polar[:, 2:3] / cfg.velocity_scale)
    return np.concatenate(feats, axis=1)


def relational_core(hidden: Tensor, rel: np.ndarray, groups: np.ndarray, params, slope: float = 0.1) -> Tensor:
    """Embed each ``hidden ⊕ rel`` row and max-reduce rows grouped by ``groups``.

    ``groups`` is ``(B, K)`` row ids padded with -1; an empty group pools to zeros.
    """
    w, b = params["pool.mlp.weight"], params["pool.mlp.bias"]
    if hidden.shape[0] != len(rel):
        raise ShapeError(f"{hidden.shape[0]} hidden states but {len(rel)} relative features")
    if hidden.shape[0] == 0:
        return Tensor(np.zeros((len(groups), w.shape[0]), dtype=w.dtype))
    x = concat([hidden, Tensor(rel, dtype=hidden.dtype)], axis=1)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"relational input width {x.shape[1]} does not match weight {w.shape}")
    return padded_max(leaky_relu(affine(w, b, x), slope), groups)


def pool_relational(scene: PoolingScene, hidden: Tensor, params, mode: str, cfg: ModelConfig) -> Tensor:
    """Pooling vector of one scene: embed each in-window neighbor, then elementwise max.

    ``hidden`` rows follow the order of ``scene.neighbor_ids``.
    """
    if mode not in ("euclidean", "polar", "polar_vr"):
        raise ConfigError(f"unknown relational mode {mode!r}")
    if hidden.ndim != 2 or hidden.shape[0] != len(scene):
        raise ShapeError(f"hidden states {hidden.shape} do not match {len(scene)} neighbors")
    keep = select_neighbors(scene, cfg.neighborhood)
    polar = None if scene.neighbor_polar is None else np.asarray(scene.neighbor_polar)[keep]
    rel = relative_features(np.asarray(scene.neighbor_xy)[keep], polar, mode, cfg)
    groups = np.arange(len(keep), dtype=np.int64).reshape(1, -1)
    out = relational_core(gather_rows(hidden, keep), rel, groups, params, cfg.leaky_slope)
    return out.reshape(-1)


__all__ = [
    "GRID_STRATEGIES", "PoolingScene", "RELATIONAL_MODES", "assign_cells", "build_social_tensor",
    "canonical_order", "grid_cell_of", "init_pooling_params", "pool_csp", "pool_relational",
    "pool_slstm", "pooling_width", "relational_core", "relative_features", "relative_width",
    "select_neighbors",
]
