"""Encoder, pooling, maneuver heads and the maneuver-conditioned mixture decoder.

Every vehicle of a batch (egos first, then each scene's in-window neighbors
in ascending id order) runs through one shared encoder. The decoder sees a
fixed context at every step: ego hidden state, pooling vector and, when
the maneuver module is on, one-hot location and acceleration classes.

Network inputs and outputs are divided by ``position_scale`` and
``velocity_scale``; everything this module returns is in meters, radians
and m/s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import DataError, ShapeError
from .geometry import LANE_DIRECTION, PolarPoint, polar_to_cartesian
from .nn import (
    ParamStore, Tensor, affine, clip, concat, cumsum, gather_rows, leaky_relu, lstm_sequence, scatter_rows,
    tanh,
)
from .nn.layers import LstmParams
from .pooling import (
    GRID_STRATEGIES, RELATIONAL_MODES, PoolingScene, assign_cells, init_pooling_params, pool_csp,
    pool_slstm, pooling_width, relational_core, relative_features, relative_width, select_neighbors,
)

N_LOC = 3
N_ACC = 3
MANEUVER_PAIRS = tuple((p, q) for p in range(N_LOC) for q in range(N_ACC))
OUTPUT_WIDTH = {"bivariate": 5, "trivariate": 6}
# keep exp() and 1 - rho^2 representable for any raw output
LOG_SIGMA_LIMIT = 10.0
RHO_LIMIT = 1.0 - 1e-6


@dataclass
class ManeuverPosterior:
    p_loc: np.ndarray  # (3,)
    p_acc: np.ndarray  # (3,)
    log_p_loc: np.ndarray | None = None  # exact log-probabilities when known
    log_p_acc: np.ndarray | None = None

    @classmethod
    def from_logits(cls, loc_logits, acc_logits) -> "ManeuverPosterior":
        out = []
        for z in (loc_logits, acc_logits):
            z = np.asarray(z, dtype=np.float64)
            shifted = z - z.max()
            log_p = shifted - np.log(np.exp(shifted).sum())
            out.append((np.exp(log_p), log_p))
        return cls(out[0][0], out[1][0], out[0][1], out[1][1])

    def log_probs(self):
        lp = self.log_p_loc if self.log_p_loc is not None else np.log(self.p_loc)
        la = self.log_p_acc if self.log_p_acc is not None else np.log(self.p_acc)
        return lp, la

    def joint(self) -> np.ndarray:
        """(3, 3) table of p_loc[p] * p_acc[q]."""
        return np.outer(self.p_loc, self.p_acc)

    def map_pair(self):
        return int(np.argmax(self.p_loc)), int(np.argmax(self.p_acc))


@dataclass
class GaussianSeq:
    """Per-step Gaussian parameters over the prediction horizon.

    Bivariate: ``mu``/``sigma`` are ``(F, 2)`` in meters with correlation
    ``rho`` ``(F,)``. Trivariate: ``(F, 3)`` over ``(r, phi, v_r)`` with a
    diagonal covariance and ``rho`` unset.
    """

    kind: str
    mu: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray | None = None

    def __len__(self):
        return len(self.mu)

    def mean_xy(self) -> np.ndarray:
        """Means as Cartesian ``(F, 2)`` positions."""
        if self.kind == "bivariate":
            return np.asarray(self.mu[:, :2])
        return np.stack(polar_to_cartesian(PolarPoint(self.mu[:, 0], self.mu[:, 1])), axis=-1)


@dataclass
class PredictionOutput:
    modes: list  # [(maneuver pair or None, weight, GaussianSeq)]
    posterior: ManeuverPosterior | None

    def map_mode(self):
        return max(self.modes, key=lambda m: m[1])


# batching

@dataclass
class Prepared:
    """Numeric arrays of one sample, ready to be stacked into a batch."""

    sample_id: str
    history: np.ndarray  # (1 + N, H, k) scaled encoder input, ego first
    rel: np.ndarray  # (N, k_rel) scaled relative features at the anchor
    cell_src: np.ndarray  # vehicle rows (0 = ego) occupying grid cells
    cell_pos: np.ndarray  # matching flat cell positions
    target: np.ndarray  # (F, k) regression target in output units
    future_xy: np.ndarray  # (F, 2)
    loc: int
    acc: int
    eval_class: str


@dataclass
class Batch:
    size: int
    ids: list
    enc_in: np.ndarray  # (H, V, k)
    nb_rows: np.ndarray  # (M,) encoder rows of neighbors
    rel: np.ndarray  # (M, k_rel)
    groups: np.ndarray  # (B, K) rows into nb_rows, padded with -1
    cell_src: np.ndarray  # (C,) encoder rows placed on grids
    cell_pos: np.ndarray  # (C,) flat position in a (B * rows * cols) grid stack
    target: np.ndarray  # (F, B, k)
    future_xy: np.ndarray  # (B, F, 2)
    loc: np.ndarray  # (B,)
    acc: np.ndarray  # (B,)
    eval_classes: list = field(default_factory=list)


def input_features(xy, polar, pooling: str, cfg: ModelConfig) -> np.ndarray:
    """Per-frame encoder input: ``(dx, dy)`` for euclidean strategies, polar otherwise."""
    if pooling in ("polar", "polar_vr"):
        if polar is None:
            raise DataError(f"{pooling} pooling needs polar features in the sample file")
        polar = np.asarray(polar, dtype=np.float64)
        feats = [polar[..., :1] / cfg.position_scale, polar[..., 1:2]]
        if pooling == "polar_vr":
            feats.append(polar[..., 2:3] / cfg.velocity_scale)
        return np.concatenate(feats, axis=-1)
    return np.asarray(xy, dtype=np.float64) / cfg.position_scale


def prepare(sample, cfg: ModelConfig) -> Prepared:
    H, F = cfg.history_frames, cfg.future_frames
    if sample.history_len != H or sample.future_len != F:
        raise ShapeError(f"sample {sample.sample_id}: history/future lengths {sample.history_len}/"
                         f"{sample.future_len} do not match the model's {H}/{F}")
    scene = PoolingScene.from_sample(sample)
    keep = select_neighbors(scene, cfg.neighborhood)
    polar_hist = None if sample.neighbor_polar is None else sample.neighbor_polar[keep]
    ego = input_features(sample.ego_xy, sample.ego_polar, cfg.pooling, cfg)
    nbs = input_features(sample.neighbor_xy[keep], polar_hist, cfg.pooling, cfg)
    history = np.concatenate([ego[None], nbs.reshape(len(keep), H, ego.shape[-1])], axis=0)

    rel = np.zeros((len(keep), 0))
    cell_src = cell_pos = np.zeros(0, np.int64)
    if cfg.pooling in GRID_STRATEGIES:
        g = cfg.grid
        nb, rows, cols = assign_cells(scene, g, candidates=keep)
        # neighbors enter the batch in `keep` order; map back to those rows
        rank = np.empty(len(scene), np.int64)
        rank[keep] = np.arange(len(keep))
        cell_src = np.concatenate([[0], rank[nb] + 1]).astype(np.int64)
        cell_pos = np.concatenate([[g.center[0] * g.cols + g.center[1]], rows * g.cols + cols]).astype(np.int64)
    else:
        rel = relative_features(scene.neighbor_xy[keep],
                                None if scene.neighbor_polar is None else scene.neighbor_polar[keep],
                                RELATIONAL_MODES[cfg.pooling], cfg)

    if cfg.parameterization == "trivariate":
        if sample.future_polar is None:
            raise DataError(f"sample {sample.sample_id}: trivariate output needs polar futures")
        target = np.asarray(sample.future_polar, dtype=np.float64)
    else:
        target = np.asarray(sample.future_xy, dtype=np.float64)
    return Prepared(sample.sample_id, history, rel, cell_src, cell_pos, target,
                    np.asarray(sample.future_xy, dtype=np.float64), int(sample.label.location),
                    int(sample.label.acceleration), sample.label.eval_class)


def collate(items, cfg: ModelConfig) -> Batch:
    items = list(items)
    B = len(items)
    if B == 0:
        raise ShapeError("cannot build an empty batch")
    counts = [len(p.history) - 1 for p in items]
    offsets = B + np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    egos = np.stack([p.history[0] for p in items])
    nbs = [p.history[1:] for p in items]
    vehicles = np.concatenate([egos] + nbs, axis=0)  # (V, H, k)
    enc_in = np.ascontiguousarray(vehicles.transpose(1, 0, 2))

    k = max(counts) if counts else 0
    groups = np.full((B, k), -1, np.int64)
    nb_rows, start = [], 0
    for b, (n, off) in enumerate(zip(counts, offsets)):
        groups[b, :n] = np.arange(start, start + n)
        nb_rows.append(np.arange(off, off + n))
        start += n
    nb_rows = np.concatenate(nb_rows).astype(np.int64) if nb_rows else np.zeros(0, np.int64)
    rel = np.concatenate([p.rel for p in items], axis=0)

    n_cells = cfg.grid_rows * cfg.grid_cols
    cell_src, cell_pos = [], []
    for b, (p, off) in enumerate(zip(items, offsets)):
        # row 0 of a prepared sample is its ego, rows >= 1 its neighbors
        cell_src.append(np.where(p.cell_src == 0, b, off + p.cell_src - 1))
        cell_pos.append(b * n_cells + p.cell_pos)
    return Batch(
        size=B,
        ids=[p.sample_id for p in items],
        enc_in=enc_in,
        nb_rows=nb_rows,
        rel=rel,
        groups=groups,
        cell_src=np.concatenate(cell_src).astype(np.int64),
        cell_pos=np.concatenate(cell_pos).astype(np.int64),
        target=np.ascontiguousarray(np.stack([p.target for p in items], axis=1)),
        future_xy=np.stack([p.future_xy for p in items]),
        loc=np.array([p.loc for p in items], np.int64),
        acc=np.array([p.acc for p in items], np.int64),
        eval_classes=[p.eval_class for p in items],
    )


def make_batch(samples, cfg: ModelConfig) -> Batch:
    return collate([prepare(s, cfg) for s in samples], cfg)


def one_hot(index, n, dtype):
    out = np.zeros((len(index), n), dtype=dtype)
    out[np.arange(len(index)), index] = 1.0
    return out


# the network

class ManeuverModel:
    """Parameters plus configuration of one pooling strategy."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = ParamStore(np.random.default_rng(seed), np.float64)
        p = self.params
        k_in = self.input_width
        p.linear("enc.embed", k_in, cfg.embed_width)
        p.lstm("enc.lstm", cfg.embed_width, cfg.enc_hidden)
        init_pooling_params(p, cfg)
        ctx = self.context_width
        if cfg.maneuvers:
            p.linear("head.loc", ctx, N_LOC)
            p.linear("head.acc", ctx, N_ACC)
            ctx += N_LOC + N_ACC
        p.lstm("dec.lstm", ctx, cfg.dec_hidden)
        p.linear("dec.out", cfg.dec_hidden, OUTPUT_WIDTH[cfg.parameterization])
        if np.dtype(dtype) != np.float64:
            self.params = self.params.astype(dtype)

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def input_width(self) -> int:
        return {"polar": 2, "polar_vr": 3}.get(self.cfg.pooling, 2)

    @property
    def context_width(self) -> int:
        return self.cfg.enc_hidden + pooling_width(self.cfg)

    def parameters(self):
        return list(self.params.values())

    def astype(self, dtype):
        other = ManeuverModel.__new__(ManeuverModel)
        other.cfg = self.cfg
        other.params = self.params.astype(dtype)
        return other

    def _tensor(self, array):
        return Tensor(np.asarray(array), dtype=self.dtype)

    # stages

    def encode(self, batch: Batch):
        """Final encoder hidden state of every vehicle, shape ``(V, Hd)``."""
        p, cfg = self.params, self.cfg
        H, V, k = batch.enc_in.shape
        if k != self.input_width:
            raise ShapeError(f"encoder input width {k} != {self.input_width}")
        x = self._tensor(batch.enc_in.reshape(H * V, k))
        emb = leaky_relu(affine(p["enc.embed.weight"], p["enc.embed.bias"], x), cfg.leaky_slope)
        hs = lstm_sequence(LstmParams.lookup(p, "enc.lstm"), emb.reshape(H, V, cfg.embed_width))
        return hs[H - 1]

    def pool(self, batch: Batch, hidden: Tensor) -> Tensor:
        cfg, p = self.cfg, self.params
        if cfg.pooling in GRID_STRATEGIES:
            g = cfg.grid
            placed = scatter_rows(gather_rows(hidden, batch.cell_src), batch.cell_pos,
                                  batch.size * g.rows * g.cols)
            grid = placed.reshape(batch.size, g.rows, g.cols, cfg.enc_hidden)
            if cfg.pooling == "slstm":
                return pool_slstm(grid, p)
            return pool_csp(grid, p, cfg.leaky_slope)
        return relational_core(gather_rows(hidden, batch.nb_rows), batch.rel, batch.groups, p,
                               cfg.leaky_slope)

    def context(self, batch: Batch) -> Tensor:
        hidden = self.encode(batch)
        ego = hidden[:batch.size]
        return concat([ego, self.pool(batch, hidden)], axis=1)

    def maneuver_logits(self, ctx: Tensor):
        p = self.params
        if ctx.shape[1] != p["head.loc.weight"].shape[1]:
            raise ShapeError(f"context width {ctx.shape[1]} does not match maneuver heads")
        return (affine(p["head.loc.weight"], p["head.loc.bias"], ctx),
                affine(p["head.acc.weight"], p["head.acc.bias"], ctx))

    def decode_raw(self, ctx: Tensor, loc=None, acc=None) -> Tensor:
        """Unsquashed output head, ``(F, N, 5|6)`` in scaled units."""
        cfg, p = self.cfg, self.params
        if cfg.maneuvers:
            onehots = self._tensor(np.concatenate([one_hot(loc, N_LOC, self.dtype),
                                                   one_hot(acc, N_ACC, self.dtype)], axis=1))
            ctx = concat([ctx, onehots], axis=1)
        dec = LstmParams.lookup(p, "dec.lstm")
        if ctx.shape[1] != dec.input_size:
            raise ShapeError(f"decoder context width {ctx.shape[1]} != {dec.input_size}")
        F, n = cfg.future_frames, ctx.shape[0]
        hs = lstm_sequence(dec, ctx, steps=F)
        out = affine(p["dec.out.weight"], p["dec.out.bias"], hs.reshape(F * n, cfg.dec_hidden))
        return out.reshape(F, n, out.shape[1])

    def output_scale(self) -> np.ndarray:
        """Per-step unit of the raw outputs, shape ``(F, d)``.

        The ``horizon`` layout scales the longitudinal or radial coordinate by
        the distance a typical vehicle has covered at that step, so raw outputs
        stay near one across the whole horizon. Lateral offsets use
        ``lateral_scale`` meters, and the angle is measured around the lane
        direction in units spanning ``lateral_scale`` meters sideways.
        """
        cfg = self.cfg
        F = cfg.future_frames
        if cfg.parameterization == "bivariate":
            scale = np.tile([cfg.position_scale, cfg.position_scale], (F, 1))
            along = 1
        else:
            scale = np.tile([cfg.position_scale, 1.0, cfg.velocity_scale], (F, 1))
            along = 0
        if cfg.output_layout == "horizon":
            scale[:, along] = cfg.step_length * np.arange(1, F + 1)
            if along == 0:
                scale[:, 1] = cfg.lateral_scale / scale[:, 0]
            else:
                scale[:, 0] = cfg.lateral_scale
        return scale

    def output_offset(self) -> np.ndarray:
        """Value of each output mean at a zero raw output, shape ``(d,)``."""
        if self.cfg.parameterization == "trivariate" and self.cfg.output_layout == "horizon":
            return np.array([0.0, LANE_DIRECTION, 0.0])
        return np.zeros(2 if self.cfg.parameterization == "bivariate" else 3)

    def squash(self, raw: Tensor):
        """Map raw outputs to ``(mu, log_sigma, rho)`` tensors in physical units."""
        scale = self.output_scale()[:, None, :]
        d = scale.shape[-1]
        mu = raw[..., :d] * self._tensor(scale)
        offset = self.output_offset()
        if offset.any():
            mu = mu + self._tensor(offset)
        if self.cfg.output_layout == "increments":
            # positions accumulate over the horizon; angle and radial speed stay direct
            if d == 2:
                mu = cumsum(mu, axis=0)
            else:
                mu = concat([cumsum(mu[..., :1], axis=0), mu[..., 1:]], axis=-1)
        log_sigma = clip(raw[..., d:2 * d], -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT) + self._tensor(np.log(scale))
        rho = clip(tanh(raw[..., 2 * d]), -RHO_LIMIT, RHO_LIMIT) if d == 2 else None
        return mu, log_sigma, rho

    def gaussians(self, raw: Tensor) -> list:
        """One :class:`GaussianSeq` per column of ``raw``."""
        mu, log_sigma, rho = self.squash(raw)
        kind = self.cfg.parameterization
        sigma = np.exp(log_sigma.data.astype(np.float64))
        return [GaussianSeq(kind, mu.data[:, i].astype(np.float64), sigma[:, i],
                            None if rho is None else rho.data[:, i].astype(np.float64))
                for i in range(raw.shape[1])]

    # inference

    def posteriors(self, ctx: Tensor) -> list:
        loc_logits, acc_logits = self.maneuver_logits(ctx)
        return [ManeuverPosterior.from_logits(a, b) for a, b in zip(loc_logits.data, acc_logits.data)]

    def predict_batch(self, batch: Batch, mode: str = "map") -> list:
        if mode not in ("full", "map"):
            raise ValueError(f"unknown predict mode {mode!r}")
        ctx = self.context(batch)
        B = batch.size
        if not self.cfg.maneuvers:
            seqs = self.gaussians(self.decode_raw(ctx))
            return [PredictionOutput([(None, 1.0, g)], None) for g in seqs]
        posts = self.posteriors(ctx)
        if mode == "map":
            pairs = [post.map_pair() for post in posts]
            seqs = self.gaussians(self.decode_raw(ctx, [q[0] for q in pairs], [q[1] for q in pairs]))
            return [PredictionOutput([(pairs[b], 1.0, seqs[b])], posts[b]) for b in range(B)]
        rows = np.repeat(np.arange(B), len(MANEUVER_PAIRS))
        locs = np.tile([q[0] for q in MANEUVER_PAIRS], B)
        accs = np.tile([q[1] for q in MANEUVER_PAIRS], B)
        seqs = self.gaussians(self.decode_raw(gather_rows(ctx, rows), locs, accs))
        out = []
        for b in range(B):
            joint = posts[b].joint()
            modes = [(pair, float(joint[pair]), seqs[b * len(MANEUVER_PAIRS) + j])
                     for j, pair in enumerate(MANEUVER_PAIRS)]
            out.append(PredictionOutput(modes, posts[b]))
        return out

    def predict_means(self, batch: Batch) -> np.ndarray:
        """MAP-mode mean trajectories in Cartesian meters, ``(B, F, 2)``."""
        return np.stack([p.map_mode()[2].mean_xy() for p in self.predict_batch(batch, "map")])


# spec-level entry points working on single samples

def encode(sample, model: ManeuverModel):
    """``(ego hidden, neighbor hiddens)`` of one sample (in-window neighbors, ascending id)."""
    batch = make_batch([sample], model.cfg)
    hidden = model.encode(batch).data
    return hidden[0], hidden[1:]


def recognize_maneuvers(ctx, model: ManeuverModel) -> ManeuverPosterior:
    ctx = np.atleast_2d(np.asarray(ctx))
    return model.posteriors(model._tensor(ctx))[0]


def decode(ctx, model: ManeuverModel, loc=None, acc=None) -> GaussianSeq:
    ctx = np.atleast_2d(np.asarray(ctx))
    locs = None if loc is None else [int(loc)]
    accs = None if acc is None else [int(acc)]
    return model.gaussians(model.decode_raw(model._tensor(ctx), locs, accs))[0]


def predict(sample, model: ManeuverModel, mode: str = "full") -> PredictionOutput:
    return model.predict_batch(make_batch([sample], model.cfg), mode)[0]


__all__ = [
    "Batch", "GaussianSeq", "MANEUVER_PAIRS", "ManeuverModel", "ManeuverPosterior",
    "PredictionOutput", "Prepared", "collate", "decode", "encode", "input_features",
    "make_batch", "one_hot", "predict", "prepare", "recognize_maneuvers", "relative_width",
]
