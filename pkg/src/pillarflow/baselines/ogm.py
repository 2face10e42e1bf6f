"""Binary occupancy input for the one-channel network variant."""
from __future__ import annotations

import numpy as np

from ..cluster import occupancy
from ..grid import GridSpec
from ..lidar import PointCloud
from ..pillars import PseudoImage


def binarize_ogm(cloud: PointCloud, grid: GridSpec) -> PseudoImage:
    """1 x H x W image: 1 where at least one ROI point falls in the cell."""
    return PseudoImage(occupancy(cloud, grid).astype(np.float32)[None], grid)
