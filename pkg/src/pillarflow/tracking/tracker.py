"""Class-agnostic cluster tracker: height band -> occupancy -> connected components ->
Mahalanobis association -> fixed-lag smoothing, optionally with per-cluster
velocity priors drawn from a flow grid."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..cluster import Cluster, cluster_connected_components, occupancy
from ..errors import Degenerate, NoValidCells, TooFewPoints
from ..grid import FlowGrid, GridSpec
from ..lidar import PointCloud, RigidTransform2_5D, crop_roi, fit_ground_plane_ransac, height_band_filter
from ..metrics import TrackRow
from .kalman import POS, VEL, TrackState, process_noise, symmetrize_psd, transition
from .smoother import SmootherWindow, fixed_lag_smooth

COV_FLOOR = 1e-4


def aggregate_cluster_velocity(flow: FlowGrid, cluster: Cluster, n_samples: int = 64, seed: int = 0):
    """Mean and covariance of flow vectors sampled with replacement from the cluster's valid cells."""
    r, c = cluster.cells[:, 0], cluster.cells[:, 1]
    ok = flow.valid[r, c]
    if not np.any(ok):
        raise NoValidCells("cluster has no valid flow cells")
    v = flow.values[r[ok], c[ok]]
    rng = np.random.default_rng(seed)
    s = v[rng.integers(0, len(v), n_samples)]
    mean = s.mean(axis=0)
    cov = np.cov(s, rowvar=False, bias=False) if n_samples > 1 else np.zeros((2, 2))
    return mean, cov + np.eye(2) * COV_FLOOR


def associate(pred_means, pred_covs, positions, pos_cov, gate: float = 3.0, hungarian: bool = False):
    """Nearest-first assignment on Mahalanobis distance of predicted track positions.

    pred_means (T, 2), pred_covs (T, 2, 2), positions (K, 2); pos_cov is the
    measurement covariance added to every innovation. Returns (pairs, new) where
    pairs is a list of (track_index, cluster_index) and new lists unassigned clusters.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    T, K = len(pred_means), len(positions)
    D = np.full((T, K), np.inf)
    for i in range(T):
        S = np.asarray(pred_covs[i]) + pos_cov
        Si = np.linalg.inv(S)
        d = np.asarray(positions) - pred_means[i]
        D[i] = np.sqrt(np.einsum("ki,ij,kj->k", d, Si, d))
    pairs = []
    if T and K:
        if hungarian:
            cost = np.where(D <= gate, D, 1e12)
            for i, j in zip(*linear_sum_assignment(cost)):
                if D[i, j] <= gate:
                    pairs.append((int(i), int(j)))
        else:
            used_t, used_c = set(), set()
            for flat in np.argsort(D, axis=None, kind="stable"):
                i, j = divmod(int(flat), K)
                if D[i, j] > gate:
                    break
                if i in used_t or j in used_c:
                    continue
                pairs.append((i, j))
                used_t.add(i)
                used_c.add(j)
    taken = {j for _, j in pairs}
    return sorted(pairs), [j for j in range(K) if j not in taken]


@dataclass(frozen=True)
class TrackerConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(-8.0, 8.0, -8.0, 8.0, 0.25))
    gate: float = 3.0
    max_misses: int = 3
    lag: int = 5
    q: float = 1.0
    motion_weight: float = 1.0
    pos_sigma: float = 0.3          # cluster-centroid noise, metres
    vel_noise: float = 0.25         # R_d per axis, m/s
    n_samples: int = 64
    band_low: float = 0.3
    band_high: float = 2.0
    min_points: int = 3
    hungarian: bool = False
    init_vel_var: float = 25.0
    init_acc_var: float = 4.0


@dataclass
class Track:
    track_id: int
    window: SmootherWindow
    state: TrackState
    misses: int = 0


@dataclass
class Frame:
    cloud: PointCloud                       # sweep in its own ego frame
    world_from_ego: RigidTransform2_5D
    t: float


@dataclass
class TrackerOutput:
    rows: list                  # TrackRow per live track per frame, world frame
    footprints: dict            # (t, cluster_id) -> set of (row, col) in that frame's grid
    poses: dict                 # t -> world_from_ego


def terrain_grid(cloud: PointCloud, grid: GridSpec, seed: int = 0):
    """Height of a RANSAC ground plane at every cell center (zero when no plane is found)."""
    try:
        plane = fit_ground_plane_ransac(cloud, seed=seed)
    except (Degenerate, TooFewPoints):
        return np.zeros(grid.shape)
    n, d = plane.normal, plane.offset
    if n[2] < 0.9:      # not a ground-like plane
        return np.zeros(grid.shape)
    xc, yc = grid.cell_centers()
    return (d - n[0] * xc - n[1] * yc) / n[2]


def frame_clusters(cloud: PointCloud, cfg: TrackerConfig, seed: int = 0):
    g = cfg.grid
    roi = crop_roi(cloud, g)
    if len(roi) == 0:
        return []
    band = height_band_filter(roi, terrain_grid(roi, g, seed), cfg.band_low, cfg.band_high, g)
    clusters = cluster_connected_components(occupancy(band, g), None, band, g)
    return [c for c in clusters if len(c.points) >= cfg.min_points]


def _predict(state: TrackState, t, q):
    dt = t - state.t
    if dt <= 0:
        return state.mean.copy(), state.cov.copy()
    F = transition(dt)
    return F @ state.mean, symmetrize_psd(F @ state.cov @ F.T + process_noise(dt, q))


def run_cluster_tracker(frames, flows=None, cfg: TrackerConfig | None = None, seed: int = 0) -> TrackerOutput:
    """Track clusters through ``frames``. ``flows`` (one FlowGrid or None per frame,
    in that frame's ego axes) adds a velocity prior to each associated cluster."""
    cfg = cfg or TrackerConfig()
    if flows is not None and len(flows) != len(frames):
        raise ValueError("flows must be time-aligned with frames")
    pos_cov = np.eye(2) * cfg.pos_sigma ** 2
    R_d = np.eye(2) * cfg.vel_noise ** 2
    tracks: list[Track] = []
    ids = itertools.count(1)
    rows, footprints, poses = [], {}, {}
    for k, fr in enumerate(frames):
        t = fr.t
        poses[t] = fr.world_from_ego
        clusters = frame_clusters(fr.cloud, cfg, seed=seed + k)
        for c in clusters:
            footprints[(t, c.cluster_id)] = c.cell_set
        world_xy = np.array([fr.world_from_ego.apply(np.r_[c.centroid, 0.0])[:2] for c in clusters]).reshape(-1, 2)
        preds = [_predict(tr.state, t, cfg.q) for tr in tracks]
        pairs, new = associate(np.array([m[POS] for m, _ in preds]).reshape(-1, 2),
                               [P[np.ix_(POS, POS)] for _, P in preds], world_xy, pos_cov,
                               cfg.gate, cfg.hungarian)
        flow = flows[k] if flows is not None else None

        def velocity_prior(c, j):
            if flow is None:
                return None, None
            try:
                m, cov = aggregate_cluster_velocity(flow, c, cfg.n_samples, seed=hash((seed, k, j)) & 0x7FFFFFFF)
            except NoValidCells:
                return None, None
            rot = fr.world_from_ego
            Rm = rot.rotation_matrix()[:2, :2]
            return rot.rotate_vectors(m), Rm @ cov @ Rm.T + R_d

        assoc = {}
        for i, j in pairs:
            tr = tracks[i]
            v, vc = velocity_prior(clusters[j], j)
            tr.window.add(t, world_xy[j], pos_cov, v, vc)
            sm = fixed_lag_smooth(tr.window)
            mean, cov = sm.last
            tr.state = TrackState(mean, cov, tr.track_id, t, tr.state.age + 1, 0)
            tr.misses = 0
            assoc[i] = clusters[j].cluster_id
        survivors = []
        for i, tr in enumerate(tracks):
            if i not in assoc:
                tr.misses += 1
                mean, cov = preds[i]
                tr.state = TrackState(mean, cov, tr.track_id, max(t, tr.state.t), tr.state.age, tr.misses)
                if tr.misses >= cfg.max_misses:
                    continue
            survivors.append((tr, assoc.get(i, -1)))
        for j in new:
            w = SmootherWindow(cfg.lag, cfg.q, cfg.motion_weight)
            v, vc = velocity_prior(clusters[j], j)
            w.add(t, world_xy[j], pos_cov, v, vc)
            mean, cov = fixed_lag_smooth(w).last
            tr = Track(next(ids), w, TrackState(mean, cov, 0, t))
            tr.state.track_id = tr.track_id
            survivors.append((tr, clusters[j].cluster_id))
        tracks = [tr for tr, _ in survivors]
        for tr, cid in survivors:
            m = tr.state.mean
            rows.append(TrackRow(t, tr.track_id, m[0], m[1], m[2], m[3], m[4], m[5], cid))
    return TrackerOutput(rows, footprints, poses)


def frames_from_sequence(seq) -> list[Frame]:
    return [Frame(s, p, t) for s, p, t in zip(seq.sweeps, seq.world_from_ego, seq.times)]


TRACK_FIELDS = ["t", "track_id", "x", "y", "vx", "vy", "ax", "ay", "assoc_cluster_id"]


def write_track_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACK_FIELDS)
        for r in rows:
            w.writerow([repr(float(r.t)), r.track_id] + [repr(float(v)) for v in (r.x, r.y, r.vx, r.vy, r.ax, r.ay)]
                       + [r.assoc_cluster_id])


def read_track_log(path) -> list[TrackRow]:
    out = []
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != TRACK_FIELDS:
            raise ValueError(f"unexpected track log header {rd.fieldnames}")
        for rec in rd:
            out.append(TrackRow(float(rec["t"]), int(rec["track_id"]), float(rec["x"]), float(rec["y"]),
                                float(rec["vx"]), float(rec["vy"]), float(rec["ax"]), float(rec["ay"]),
                                int(rec["assoc_cluster_id"])))
    return out
