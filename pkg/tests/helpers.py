"""Scene builders shared by the test modules."""
import numpy as np
import pandas as pd

from maneuver_pooling.config import PipelineConfig
from maneuver_pooling.dataset import segment_scenes, tracks_from_frame
from maneuver_pooling.synth import SynthConfig, synth_generate

SMALL = dict(embed_width=3, enc_hidden=4, dec_hidden=5, mlp_width=6, slstm_embed=3, csp_embed=3,
             csp_channels=2)


def track_frame(vid, x, y0, v, lane, a=0.0, n=81, lateral=0.0):
    t = np.arange(n) / 10.0
    return pd.DataFrame({
        "vehicle_id": vid, "frame_id": np.arange(n),
        "local_x": x + lateral * t, "local_y": y0 + v * t + 0.5 * a * t * t,
        "lane_id": lane, "velocity": v + a * t, "acceleration": a,
    })


def toy_scene():
    """Ego in lane 2 with one neighbor ahead-left and one behind in its own lane."""
    df = pd.concat([
        track_frame(1, 5.5, 100.0, 24.0, 2, a=0.4, lateral=0.05),
        track_frame(2, 1.8, 112.0, 26.0, 1),
        track_frame(3, 5.4, 84.0, 23.0, 2, a=-0.3),
    ])
    samples = segment_scenes(tracks_from_frame(df), PipelineConfig())
    sample = [s for s in samples if s.vehicle_id == 1][0]
    assert sample.n_neighbors == 2
    return sample


def synthetic_samples(vehicles=24, seed=0, stride=5, mix=(0.25, 0.25, 0.25, 0.25)):
    table = synth_generate(SynthConfig(vehicles=vehicles, mix=mix, accel_mix=(1 / 3, 1 / 3, 1 / 3), seed=seed))
    return segment_scenes(table, PipelineConfig(anchor_stride=stride))


def balanced_subset(samples, n):
    """Round-robin over (location, acceleration) classes, ``n`` samples total."""
    by = {}
    for s in samples:
        by.setdefault((int(s.label.location), int(s.label.acceleration)), []).append(s)
    keys = sorted(by)
    out, i = [], 0
    while len(out) < n and any(i < len(by[k]) for k in keys):
        for k in keys:
            if i < len(by[k]) and len(out) < n:
                out.append(by[k][i])
        i += 1
    return out


def determined(sample, tol=1e-9) -> bool:
    """True when the ego future follows from its history and label.

    Lateral motion that starts inside the prediction horizon is invisible in
    the history, so such samples are left out of overfitting fixtures.
    """
    fut_lateral = np.ptp(sample.future_xy[:, 0]) > tol
    moving_now = abs(sample.ego_xy[-1, 0] - sample.ego_xy[-2, 0]) > tol
    return moving_now or not fut_lateral


def overfit_fixture(n=64, seed=0):
    """``n`` separable synthetic scenes balanced over maneuver classes."""
    pool = [s for s in synthetic_samples(vehicles=48, seed=seed) if determined(s)]
    return balanced_subset(pool, n)
