"""Pillar voxelization, the point-set feature network and scatter to a BeV pseudo-image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff.ops import BatchNorm, Dense, LeakyReLU, ScatterCells, SegmentMax
from .diff.tape import Tape
from .errors import InvalidShape
from .grid import GridSpec
from .lidar import PointCloud

N_DESCRIPTORS = 9


@dataclass
class PillarBatch:
    """descriptors (9, P, N); pillar_cells (P, 2) as (row, col); point_counts (P,)."""

    descriptors: np.ndarray
    pillar_cells: np.ndarray
    point_counts: np.ndarray

    @property
    def n_pillars(self):
        return self.pillar_cells.shape[0]

    @property
    def max_points(self):
        return self.descriptors.shape[2]

    def point_rows(self):
        """(M, 9) real-point descriptors plus pillar id and slot of each row."""
        P, N = self.n_pillars, self.max_points
        slot = np.arange(N)[None, :]
        mask = slot < self.point_counts[:, None]
        pillar, slot = np.nonzero(mask)
        return self.descriptors[:, pillar, slot].T, pillar, slot


@dataclass
class PfnParams:
    weight: np.ndarray        # (9, C)
    bias: np.ndarray          # (C,)
    scale: np.ndarray         # (C,)
    shift: np.ndarray         # (C,)
    running_mean: np.ndarray  # (C,)
    running_var: np.ndarray   # (C,)

    @property
    def channels(self):
        return self.weight.shape[1]

    @classmethod
    def init(cls, channels=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((N_DESCRIPTORS, channels)) * np.sqrt(2.0 / N_DESCRIPTORS)
        return cls(w.astype(dtype), np.zeros(channels, dtype), np.ones(channels, dtype),
                   np.zeros(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class PseudoImage:
    data: np.ndarray  # (C, H, W)
    grid: GridSpec


def _reservoir(rng, n, k):
    """Algorithm R: k indices drawn uniformly without replacement from range(n)."""
    res = list(range(k))
    for i in range(k, n):
        j = int(rng.integers(0, i + 1))
        if j < k:
            res[j] = i
    return np.sort(np.array(res, dtype=np.int64))


def voxelize(cloud: PointCloud, grid: GridSpec, max_pillars: int = 12000, max_points: int = 32,
             seed: int = 0) -> PillarBatch:
    if max_pillars < 1 or max_points < 1:
        raise ValueError("max_pillars and max_points must be >= 1")
    pts = cloud.points
    rows, cols, inside = grid.cell_index(pts[:, 0], pts[:, 1])
    pts, rows, cols = pts[inside], rows[inside], cols[inside]
    if pts.shape[0] == 0:
        return PillarBatch(np.zeros((N_DESCRIPTORS, 0, max_points)), np.zeros((0, 2), np.int64),
                           np.zeros(0, np.int64))
    rng = np.random.default_rng(seed)
    lin = rows * grid.W + cols
    order = np.argsort(lin, kind="stable")
    pts, lin = pts[order], lin[order]
    cells, start, counts = np.unique(lin, return_index=True, return_counts=True)

    # pillar-level mean over every point in the pillar
    sums = np.add.reduceat(pts[:, :3], start, axis=0)
    means = sums / counts[:, None]

    keep_pillars = np.arange(cells.size)
    if cells.size > max_pillars:
        keep_pillars = np.sort(rng.choice(cells.size, size=max_pillars, replace=False))
    P = keep_pillars.size
    cells, start, counts, means = cells[keep_pillars], start[keep_pillars], counts[keep_pillars], means[keep_pillars]

    # point selection: all points of small pillars, reservoir sample of large ones
    sel_pillar = []
    sel_index = []
    small = counts <= max_points
    if np.any(small):
        c = counts[small]
        pid = np.repeat(np.nonzero(small)[0], c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        sel_pillar.append(pid)
        sel_index.append(np.repeat(start[small], c) + offs)
    for p in np.nonzero(~small)[0]:
        picks = _reservoir(rng, int(counts[p]), max_points)
        sel_pillar.append(np.full(max_points, p))
        sel_index.append(start[p] + picks)
    pid = np.concatenate(sel_pillar)
    src = np.concatenate(sel_index)
    order = np.lexsort((src, pid))
    pid, src = pid[order], src[order]
    n_kept = np.minimum(counts, max_points)
    slot = np.arange(pid.size) - np.repeat(np.cumsum(n_kept) - n_kept, n_kept)

    rows_p, cols_p = cells // grid.W, cells % grid.W
    xp, yp = grid.cell_center(rows_p, cols_p)
    p = pts[src]
    desc = np.zeros((N_DESCRIPTORS, P, max_points))
    feats = np.empty((pid.size, N_DESCRIPTORS))
    feats[:, :4] = p
    feats[:, 4:7] = p[:, :3] - means[pid]
    feats[:, 7] = p[:, 0] - xp[pid]
    feats[:, 8] = p[:, 1] - yp[pid]
    desc[:, pid, slot] = feats.T
    return PillarBatch(desc, np.stack([rows_p, cols_p], axis=1).astype(np.int64), n_kept.astype(np.int64))


def pfn_embed(tape: Tape, point_feats, pillar, slot, n_pillars, n_slots, w, b, scale, shift,
              running_mean, running_var, training=False):
    """Tape-level PFN: dense -> batch norm -> ReLU -> per-pillar max. Returns (P, C)."""
    h = tape.apply(Dense, point_feats, w, b)
    h = tape.apply(BatchNorm, h, scale, shift, running_mean, running_var, training=training)
    h = tape.apply(LeakyReLU, h, slope=0.0)
    return tape.apply(SegmentMax, h, pillar=pillar, slot=slot, n_pillars=n_pillars, n_slots=n_slots)


def pfn_forward(batch: PillarBatch, params: PfnParams) -> np.ndarray:
    """Inference-mode pillar embeddings, shape (C, P)."""
    if batch.descriptors.shape[0] != params.weight.shape[0]:
        raise InvalidShape(f"descriptor size {batch.descriptors.shape[0]} does not match "
                           f"PFN input size {params.weight.shape[0]}")
    C = params.channels
    if batch.n_pillars == 0:
        return np.zeros((C, 0), dtype=params.weight.dtype)
    feats, pillar, slot = batch.point_rows()
    feats = feats.astype(params.weight.dtype)
    out = pfn_embed(Tape(record=False), feats, pillar, slot, batch.n_pillars, batch.max_points,
                    params.weight, params.bias, params.scale, params.shift,
                    params.running_mean, params.running_var)
    return out.value.T


def scatter(embeddings, batch: PillarBatch, grid: GridSpec) -> PseudoImage:
    embeddings = np.asarray(embeddings)
    if embeddings.shape[1] != batch.n_pillars:
        raise InvalidShape(f"{embeddings.shape[1]} embeddings for {batch.n_pillars} pillars")
    r, c = batch.pillar_cells[:, 0], batch.pillar_cells[:, 1]
    img = ScatterCells.forward(embeddings.T, image=np.zeros_like(r), rows=r, cols=c,
                               n_images=1, H=grid.H, W=grid.W)[0]
    return PseudoImage(img[0], grid)


def gather(image: PseudoImage, batch: PillarBatch) -> np.ndarray:
    """Inverse of scatter: (C, P) columns read back from the pillar cells."""
    return image.data[:, batch.pillar_cells[:, 0], batch.pillar_cells[:, 1]]


def encode(cloud: PointCloud, grid: GridSpec, params: PfnParams, max_pillars=12000, max_points=32,
           seed=0) -> PseudoImage:
    batch = voxelize(cloud, grid, max_pillars, max_points, seed)
    return scatter(pfn_forward(batch, params), batch, grid)
