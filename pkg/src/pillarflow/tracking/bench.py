"""Stationary objects seen from a moving ego: track velocity error with and without a flow prior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datagen import SceneConfig, synth_sequence
from ..errors import EmptySweep
from ..metrics import track_velocity_error
from .tracker import TrackerConfig, frames_from_sequence, run_cluster_tracker


@dataclass(frozen=True)
class StationaryBench:
    n_frames: int = 8
    ego_speed: float = 5.0
    ego_yaw_rate: float = 0.0
    n_static: tuple = (3, 5)
    parked_fraction: float = 1.0


def sequence_flows(seq, params, net_cfg, seed=0):
    """Network flow for every frame after the first (None for the first frame)."""
    from ..flownet import forward
    out = [None]
    for k in range(1, len(seq.sweeps)):
        try:
            out.append(forward(seq.sweeps[k - 1], seq.sweeps[k], seq.pose_prev_to_curr(k), params, net_cfg,
                               seed=seed + k))
        except EmptySweep:
            out.append(None)
    return out


def stationary_run(seed, params, net_cfg, bench: StationaryBench | None = None,
                   tracker_cfg: TrackerConfig | None = None):
    """Mean world-frame track velocity error (m/s) over all track rows, without and with the prior."""
    bench = bench or StationaryBench()
    tcfg = tracker_cfg or TrackerConfig(grid=net_cfg.grid)
    scene = SceneConfig(grid=net_cfg.grid, seed=seed, n_static=bench.n_static, parked_fraction=bench.parked_fraction,
                        ego_speed=bench.ego_speed, ego_yaw_rate=bench.ego_yaw_rate)
    seq = synth_sequence(scene, bench.n_frames, movers=False)
    frames = frames_from_sequence(seq)
    anns = {t: seq.annotations_world(k) for k, t in enumerate(seq.times)}
    flows = sequence_flows(seq, params, net_cfg, seed)
    out = {}
    for name, fl in (("no_prior", None), ("flow_prior", flows)):
        res = run_cluster_tracker(frames, fl, tcfg, seed=seed)
        rows = [r for r in res.rows if r.assoc_cluster_id >= 0]
        rep = track_velocity_error(rows, anns, res.footprints, tcfg.grid, poses=res.poses)
        errs = [rep.mean[c] * rep.counts[c] for c in rep.counts if c in ("static", "observed_stationary")
                and rep.counts[c]]
        n = sum(rep.counts[c] for c in ("static", "observed_stationary"))
        out[name] = sum(errs) / n if n else float("nan")
    return out


def stationary_benchmark(seeds, params, net_cfg, bench: StationaryBench | None = None):
    runs = [stationary_run(s, params, net_cfg, bench) for s in seeds]
    return {k: float(np.mean([r[k] for r in runs])) for k in ("no_prior", "flow_prior")}, runs
