"""Occupancy grids and connected-component clusters of BeV cells."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidShape
from .grid import GridSpec
from .lidar import PointCloud

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(eq=False)
class Cluster:
    """Member cells (k, 2) as (row, col), the member points and the xy centroid."""

    cells: np.ndarray
    points: PointCloud = field(default_factory=PointCloud)
    centroid: np.ndarray | None = None
    cluster_id: int = -1

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        if self.cells.shape[0] == 0:
            raise ValueError("a cluster needs at least one cell")
        if self.centroid is None:
            if len(self.points):
                self.centroid = self.points.xyz[:, :2].mean(axis=0)
            else:
                raise ValueError("centroid needed when the cluster has no points")
        self.centroid = np.asarray(self.centroid, dtype=np.float64)

    @property
    def cell_set(self) -> set:
        return set(map(tuple, self.cells.tolist()))

    def __len__(self):
        return self.cells.shape[0]


def occupancy(cloud: PointCloud, grid: GridSpec) -> np.ndarray:
    """Boolean H x W grid, True where at least one point falls."""
    occ = np.zeros(grid.shape, dtype=bool)
    r, c, inside = grid.cell_index(cloud.points[:, 0], cloud.points[:, 1])
    occ[r[inside], c[inside]] = True
    return occ


def label_components(occupancy, detector_mask=None):
    """8-connected labels; with a mask, cells on either side of its boundary never share a label.

    Returns (labels, n) with labels 0 for empty cells and 1..n otherwise.
    """
    occ = np.asarray(occupancy, dtype=bool)
    if detector_mask is None:
        return ndimage.label(occ, structure=EIGHT)
    mask = np.asarray(detector_mask, dtype=bool)
    if mask.shape != occ.shape:
        raise InvalidShape(f"mask {mask.shape} vs occupancy {occ.shape}")
    labels = np.zeros(occ.shape, dtype=np.int32)
    n = 0
    for part in (occ & ~mask, occ & mask):
        lab, k = ndimage.label(part, structure=EIGHT)
        labels[lab > 0] = lab[lab > 0] + n
        n += k
    return labels, n


def cluster_connected_components(occupancy, detector_mask=None, cloud: PointCloud | None = None,
                                 grid: GridSpec | None = None) -> list[Cluster]:
    """Clusters ordered by label. With a cloud and grid, points are attached to their
    cluster and the centroid is the point mean; otherwise the cell-center mean."""
    labels, n = label_components(occupancy, detector_mask)
    if n == 0:
        return []
    grid = grid or GridSpec()
    rr, cc = np.nonzero(labels)
    lab = labels[rr, cc]
    order = np.argsort(lab, kind="stable")
    rr, cc, lab = rr[order], cc[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    if cloud is not None:
        pr, pc, inside = grid.cell_index(cloud.points[:, 0], cloud.points[:, 1])
        plab = np.zeros(len(cloud), dtype=np.int64)
        plab[inside] = labels[pr[inside], pc[inside]]
    out = []
    for k in range(n):
        cells = np.stack([rr[bounds[k]:bounds[k + 1]], cc[bounds[k]:bounds[k + 1]]], axis=1)
        if cloud is not None and np.any(plab == k + 1):
            pts = cloud.subset(plab == k + 1)
            out.append(Cluster(cells, pts, cluster_id=k))
        else:
            xc, yc = grid.cell_center(cells[:, 0], cells[:, 1])
            out.append(Cluster(cells, PointCloud(), np.array([xc.mean(), yc.mean()]), cluster_id=k))
    return out


def clusters_from_cloud(cloud: PointCloud, grid: GridSpec, detector_mask=None) -> list[Cluster]:
    return cluster_connected_components(occupancy(cloud, grid), detector_mask, cloud, grid)
