"""SVD point-to-point ICP and the per-cluster flow baseline built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..cluster import Cluster, clusters_from_cloud
from ..errors import TooFewPoints
from ..grid import FlowGrid, GridSpec
from ..lidar import PointCloud, RigidTransform2_5D, preprocess_pair


@dataclass
class IcpResult:
    transform: RigidTransform2_5D
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)   # trimmed RMS residual per iteration


def fit_rigid_2_5d(src, dst, weights=None) -> RigidTransform2_5D:
    """Least-squares yaw + 3-D translation taking src (n, 3) onto dst (n, 3).

    Rotation is about z only, so the xy part is a 2-D Kabsch problem and z
    is a plain mean offset.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = (src[:, :2] - cs[:2]) * w[:, None]
    b = dst[:, :2] - cd[:2]
    M = a.T @ b
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    yaw = math.atan2(R[1, 0], R[0, 0])
    t = cd[:2] - R @ cs[:2]
    return RigidTransform2_5D(yaw, (t[0], t[1], cd[2] - cs[2]))


def icp_point_to_point(src: PointCloud, dst: PointCloud, max_iters: int = 100, tol: float = 1e-12,
                       trim: float = 0.95, init: RigidTransform2_5D | None = None) -> IcpResult:
    """Align src onto dst. Each iteration matches every transformed source point to its
    nearest destination point, keeps the closest ``trim`` fraction of pairs (a fixed
    count, so the trimmed residual can only go down) and re-solves the alignment.

    Stops once the residual improves by less than ``tol``; hitting ``max_iters``
    first leaves ``converged`` False. ``history`` holds the residual of every accepted
    iterate and never increases.
    """
    if len(src) < 3 or len(dst) < 3:
        raise TooFewPoints("ICP needs at least 3 points in each cloud")
    p = src.xyz
    q = dst.xyz
    tree = cKDTree(q)
    if init is None:
        d = q.mean(axis=0) - p.mean(axis=0)
        init = RigidTransform2_5D(0.0, tuple(d))
    k = max(3, int(math.ceil(trim * len(p))))
    T = init
    best, best_r = T, math.inf
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        moved = T.apply(p)
        dist, idx = tree.query(moved)
        keep = np.argsort(dist, kind="stable")[:k]
        r = math.sqrt(np.mean(dist[keep] ** 2))
        if r > best_r:
            # only round-off can raise the trimmed residual; keep the previous iterate
            converged = True
            break
        history.append(r)
        best, best_r = T, r
        if len(history) > 1 and history[-2] - r < tol:
            converged = True
            break
        if r == 0.0:
            converged = True
            break
        T = fit_rigid_2_5d(p[keep], q[idx[keep]])
    return IcpResult(best, best_r, it, converged, history)


def match_clusters(centroids_prev, centroids_curr, gate: float = 3.0):
    """Mutual nearest centroids within ``gate`` metres; returns (prev_index, curr_index) pairs."""
    a = np.asarray(centroids_prev, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(centroids_curr, dtype=np.float64).reshape(-1, 2)
    if not len(a) or not len(b):
        return []
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    best_b = d.argmin(axis=1)
    best_a = d.argmin(axis=0)
    return [(i, int(j)) for i, j in enumerate(best_b) if best_a[j] == i and d[i, j] <= gate]


def icp_cluster_flow(clusters_prev, clusters_curr, dt: float, grid: GridSpec | None = None,
                     gate: float = 3.0, max_iters: int = 100, tol: float = 1e-12) -> FlowGrid:
    """Flow on the cells of matched current clusters; every other cell is invalid.

    With T the ICP transform from a previous cluster onto its current match,
    a current cell at c came from T^-1(c), so its flow is (c - T^-1(c)) / dt.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    grid = grid or GridSpec()
    values = np.zeros(grid.shape + (2,))
    valid = np.zeros(grid.shape, dtype=bool)
    pairs = match_clusters([c.centroid for c in clusters_prev], [c.centroid for c in clusters_curr], gate)
    for i, j in pairs:
        a, b = clusters_prev[i], clusters_curr[j]
        if len(a.points) < 3 or len(b.points) < 3:
            continue
        T = icp_point_to_point(a.points, b.points, max_iters=max_iters, tol=tol).transform
        r, c = b.cells[:, 0], b.cells[:, 1]
        x, y = grid.cell_center(r, c)
        cur = np.stack([x, y, np.zeros_like(x)], axis=1)
        src = T.inverse().apply(cur)
        values[r, c] = (cur[:, :2] - src[:, :2]) / dt
        valid[r, c] = True
    return FlowGrid(values, valid, dt, grid)


def icp_flow_for_pair(sweep_prev: PointCloud, sweep_curr: PointCloud, pose_prev_to_curr,
                      grid: GridSpec, dt: float | None = None, gate: float = 3.0,
                      ground_removal: bool = True, seed: int = 0) -> FlowGrid:
    """Whole baseline on one sweep pair: align, strip ground, cluster both sweeps, ICP per match."""
    if dt is None:
        dt = sweep_curr.timestamp - sweep_prev.timestamp
    prev, curr = preprocess_pair(sweep_prev, sweep_curr, pose_prev_to_curr, grid,
                                 ground_removal=ground_removal, seed=seed)
    return icp_cluster_flow(clusters_from_cloud(prev, grid), clusters_from_cloud(curr, grid), dt,
                            grid, gate)


def icp_flow_for_sample(sample, grid: GridSpec, gate: float = 3.0, seed: int = 0) -> FlowGrid:
    return icp_flow_for_pair(sample.sweep_prev, sample.sweep_curr, sample.ego_pose, grid,
                             sample.dt, gate, seed=seed)
