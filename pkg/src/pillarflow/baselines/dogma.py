"""A simplified dynamic occupancy grid map: one occupancy scalar per cell and a
particle population carrying cell velocities.

Particles live in metric grid coordinates. Each carries a relative weight
(reset to 1 at resampling, so weights sum to the particle count) and an equal
share of the total occupancy mass, which is how occupancy is transported by
the prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..cluster import Cluster
from ..errors import EmptyCluster
from ..grid import FlowGrid, GridSpec
from ..lidar import RigidTransform2_5D

COV_FLOOR = 1e-4


@dataclass(frozen=True)
class DogmaConfig:
    particles_per_cell: float = 4.0   # budget averaged over the whole grid
    process_noise: float = 0.5        # m/s per sqrt(s)
    persistence: float = 0.99
    birth: float = 0.02
    p_hit: float = 0.9                # P(measured occupied | occupied)
    p_false: float = 0.1              # P(measured occupied | free)
    birth_speed_sigma: float = 4.0    # m/s, velocity spread of new-born particles
    static_birth_fraction: float = 0.3   # share of births drawn at zero velocity

    def __post_init__(self):
        if not 0 < self.persistence <= 1 or not 0 <= self.birth < 1:
            raise ValueError("persistence must be in (0, 1] and birth in [0, 1)")
        if not 0 < self.p_false < self.p_hit < 1:
            raise ValueError("need 0 < p_false < p_hit < 1")
        if self.particles_per_cell <= 0 or self.process_noise < 0:
            raise ValueError("particle budget must be positive and noise non-negative")


@dataclass
class DogmaGrid:
    grid: GridSpec
    occupancy: np.ndarray      # (H, W) in [0, 1]
    pos: np.ndarray            # (N, 2) metres
    vel: np.ndarray            # (N, 2) m/s
    weight: np.ndarray         # (N,)
    mass: np.ndarray           # (N,) occupancy carried per particle
    vel_mean: np.ndarray       # (H, W, 2)
    vel_cov: np.ndarray        # (H, W, 2, 2)
    steps: int = 0

    @classmethod
    def empty(cls, grid: GridSpec, cfg: DogmaConfig | None = None):
        cfg = cfg or DogmaConfig()
        H, W = grid.shape
        cov = np.zeros((H, W, 2, 2))
        cov[..., 0, 0] = cov[..., 1, 1] = cfg.birth_speed_sigma ** 2
        return cls(grid, np.zeros((H, W)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros(0), np.zeros((H, W, 2)), cov)

    @property
    def n_particles(self):
        return self.pos.shape[0]

    def copy(self):
        return replace(self, occupancy=self.occupancy.copy(), pos=self.pos.copy(), vel=self.vel.copy(),
                       weight=self.weight.copy(), mass=self.mass.copy(),
                       vel_mean=self.vel_mean.copy(), vel_cov=self.vel_cov.copy())

    def to_flow(self, dt: float = 0.1, min_occupancy: float = 0.5) -> FlowGrid:
        """Per-cell velocity means as a FlowGrid; cells below ``min_occupancy`` are invalid."""
        return FlowGrid(self.vel_mean.copy(), self.occupancy >= min_occupancy, dt, self.grid)


def _cells(grid, pos):
    r, c, inside = grid.cell_index(pos[:, 0], pos[:, 1])
    lin = np.where(inside, r * grid.W + c, -1)
    return lin, inside


def _bayes(prior, z, p_hit, p_false):
    hit = np.where(z, p_hit, 1.0 - p_hit)
    false = np.where(z, p_false, 1.0 - p_false)
    num = hit * prior
    return num / (num + false * (1.0 - prior))


def _cell_stats(grid, lin, w, vel, floor_sigma):
    n = grid.H * grid.W
    ok = lin >= 0
    lin, w, vel = lin[ok], w[ok], vel[ok]
    sw = np.bincount(lin, w, n)
    mean = np.zeros((n, 2))
    cov = np.zeros((n, 2, 2))
    has = sw > 0
    for a in range(2):
        mean[:, a] = np.bincount(lin, w * vel[:, a], n)
    mean[has] /= sw[has, None]
    d = vel - mean[lin]
    for a in range(2):
        for b in range(2):
            cov[:, a, b] = np.bincount(lin, w * d[:, a] * d[:, b], n)
    cov[has] /= sw[has, None, None]
    cov[:, 0, 0] += COV_FLOOR
    cov[:, 1, 1] += COV_FLOOR
    cov[~has] = np.eye(2) * floor_sigma ** 2
    return mean.reshape(grid.H, grid.W, 2), cov.reshape(grid.H, grid.W, 2, 2)


def dogma_step(state: DogmaGrid, measurement, dt: float, cfg: DogmaConfig | None = None,
               seed: int = 0, pose_prev_to_curr: RigidTransform2_5D | None = None) -> DogmaGrid:
    """One predict / update / resample cycle against a binary H x W measurement.

    ``pose_prev_to_curr`` moves the particle population into the new ego frame
    before prediction when the grid is ego-centred.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    cfg = cfg or DogmaConfig()
    grid = state.grid
    z = np.asarray(measurement, dtype=bool)
    if z.shape != grid.shape:
        raise ValueError(f"measurement {z.shape} does not match grid {grid.shape}")
    rng = np.random.default_rng([seed, state.steps])
    H, W = grid.shape
    n_cells = H * W

    pos, vel = state.pos.copy(), state.vel.copy()
    if pose_prev_to_curr is not None and len(pos):
        xyz = np.c_[pos, np.zeros(len(pos))]
        pos = pose_prev_to_curr.apply(xyz)[:, :2]
        vel = pose_prev_to_curr.rotate_vectors(vel)

    # predict: constant velocity plus white velocity noise
    pos = pos + vel * dt
    vel = vel + rng.standard_normal(vel.shape) * cfg.process_noise * np.sqrt(dt)
    mass = state.mass * cfg.persistence
    lin, inside = _cells(grid, pos)
    pos, vel, weight, mass, lin = pos[inside], vel[inside], state.weight[inside], mass[inside], lin[inside]
    m_pred = np.minimum(np.bincount(lin, mass, n_cells), 1.0)

    # update occupancy
    zf = z.ravel()
    prior = m_pred + cfg.birth * (1.0 - m_pred)
    post = _bayes(prior, zf, cfg.p_hit, cfg.p_false)
    born_share = np.where(prior > 0, cfg.birth * (1.0 - m_pred) / prior, 1.0)

    # reweight persistent particles by the measurement in their cell
    weight = weight * np.where(zf[lin], cfg.p_hit, 1.0 - cfg.p_hit)

    # resampling mass: persistent particles share (1 - born) of their cell's posterior
    # in proportion to weight; the born part goes to new particles
    wsum = np.bincount(lin, weight, n_cells)
    cell_has = wsum > 0
    pmass = np.zeros(len(lin))
    if len(lin):
        pmass = weight / np.where(cell_has[lin], wsum[lin], 1.0) * post[lin] * (1.0 - born_share[lin])
    bmass = post * np.where(cell_has, born_share, 1.0) * zf   # births only where measured occupied
    total = pmass.sum() + bmass.sum()
    N = int(round(cfg.particles_per_cell * n_cells))
    if total <= 0:
        new_pos, new_vel = np.zeros((0, 2)), np.zeros((0, 2))
    else:
        probs = np.concatenate([pmass, bmass]) / total
        draw = np.sort(rng.choice(probs.size, size=N, p=probs))
        old = draw[draw < len(lin)]
        bcell = draw[draw >= len(lin)] - len(lin)
        br, bc = bcell // W, bcell % W
        bx, by = grid.cell_center(br, bc)
        jitter = rng.uniform(-0.5, 0.5, (bcell.size, 2)) * grid.resolution
        bpos = np.stack([bx, by], axis=1) + jitter
        bvel = rng.standard_normal((bcell.size, 2)) * cfg.birth_speed_sigma
        if cfg.static_birth_fraction > 0:
            bvel[rng.random(bcell.size) < cfg.static_birth_fraction] = 0.0
        new_pos = np.concatenate([pos[old], bpos])
        new_vel = np.concatenate([vel[old], bvel])
    n_new = new_pos.shape[0]
    new_w = np.ones(n_new)
    new_mass = np.full(n_new, total / n_new if n_new else 0.0)
    occ = post.reshape(H, W)
    new_lin, _ = _cells(grid, new_pos)
    vm, vc = _cell_stats(grid, new_lin, new_w, new_vel, cfg.birth_speed_sigma)
    return DogmaGrid(grid, occ, new_pos, new_vel, new_w, new_mass, vm, vc, state.steps + 1)


def dogma_cluster_velocity(state: DogmaGrid, cluster: Cluster):
    """Occupancy-weighted mean of cell velocity means over the cluster, and the same
    weighting applied to the per-cell covariances."""
    r, c = cluster.cells[:, 0], cluster.cells[:, 1]
    w = state.occupancy[r, c]
    sw = w.sum()
    if not sw > 0:
        raise EmptyCluster("cluster cells carry no occupancy")
    mean = (w[:, None] * state.vel_mean[r, c]).sum(axis=0) / sw
    cov = (w[:, None, None] * state.vel_cov[r, c]).sum(axis=0) / sw
    cov = 0.5 * (cov + cov.T) + np.eye(2) * COV_FLOOR
    return mean, cov
