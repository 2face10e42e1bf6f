"""Point clouds, 2.5-D rigid transforms, ground handling and ROI cropping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import Degenerate, TooFewPoints
from .grid import GridSpec


class Point(NamedTuple):
    x: float
    y: float
    z: float
    r: float = 0.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Timestamped (n, 4) array of x, y, z, reflectance in a named frame."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    timestamp: float = 0.0
    frame_id: str = "lidar"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (n, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if pts.shape[0] and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("reflectance must lie in [0, 1]")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if not self.frame_id or any(c.isspace() for c in self.frame_id):
            raise ValueError("frame_id must be a non-empty token without whitespace")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points, timestamp=0.0, frame_id="lidar"):
        return cls(np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4),
                   timestamp, frame_id)

    def __len__(self):
        return self.points.shape[0]

    def __iter__(self):
        return (Point(*row) for row in self.points.tolist())

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (self.timestamp == other.timestamp and self.frame_id == other.frame_id
                and np.array_equal(self.points, other.points))

    @property
    def xyz(self):
        return self.points[:, :3]

    def subset(self, mask):
        return replace(self, points=self.points[mask])

    def with_points(self, points):
        return replace(self, points=points)


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class RigidTransform2_5D:
    """Rotation by ``yaw`` about z followed by a 3-D translation."""

    yaw: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3 or not all(math.isfinite(v) for v in t):
            raise ValueError("translation must be three finite numbers")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    def rotation_matrix(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        tx, ty, tz = self.translation
        out = np.empty_like(xyz)
        out[..., 0] = c * xyz[..., 0] - s * xyz[..., 1] + tx
        out[..., 1] = s * xyz[..., 0] + c * xyz[..., 1] + ty
        out[..., 2] = xyz[..., 2] + tz
        return out

    def rotate_vectors(self, v):
        """Rotate 2-D (or 3-D) vectors without translating them."""
        v = np.asarray(v, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = v.copy()
        out[..., 0] = c * v[..., 0] - s * v[..., 1]
        out[..., 1] = s * v[..., 0] + c * v[..., 1]
        return out

    def compose(self, other: "RigidTransform2_5D") -> "RigidTransform2_5D":
        """self after other: compose(a, b).apply(p) == a.apply(b.apply(p))."""
        t = self.apply(np.array(other.translation))
        return RigidTransform2_5D(self.yaw + other.yaw, tuple(t))

    def inverse(self) -> "RigidTransform2_5D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        tx, ty, tz = self.translation
        return RigidTransform2_5D(-self.yaw, (-(c * tx + s * ty), -(-s * tx + c * ty), -tz))


def compose(a: RigidTransform2_5D, b: RigidTransform2_5D) -> RigidTransform2_5D:
    return a.compose(b)


def inverse(t: RigidTransform2_5D) -> RigidTransform2_5D:
    return t.inverse()


@dataclass(frozen=True)
class GroundPlane:
    """Plane n . p = offset with unit normal oriented toward +z."""

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be nonzero")
        n = n / norm
        offset = float(self.offset) / norm
        if n[2] < 0:
            n, offset = -n, -offset
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", offset)

    def signed_distance(self, xyz):
        return np.asarray(xyz, dtype=np.float64) @ np.asarray(self.normal) - self.offset


def transform_cloud(cloud: PointCloud, pose: RigidTransform2_5D, frame_id: str | None = None,
                    timestamp: float | None = None) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, :3] = pose.apply(cloud.points[:, :3])
    return PointCloud(pts,
                      cloud.timestamp if timestamp is None else timestamp,
                      cloud.frame_id if frame_id is None else frame_id)


def _plane_through(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    return n, norm


def fit_ground_plane_ransac(cloud: PointCloud, iterations: int = 100, inlier_dist: float = 0.2,
                            seed: int = 0) -> GroundPlane:
    """RANSAC plane over 3-point hypotheses, refit to the best inlier set by total least squares."""
    xyz = cloud.xyz
    n = xyz.shape[0]
    if n < 3:
        raise TooFewPoints(f"need at least 3 points for a plane, got {n}")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_mask = None
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal, norm = _plane_through(xyz[i], xyz[j], xyz[k])
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs(xyz @ normal - normal @ xyz[i])
        mask = dist < inlier_dist
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        raise Degenerate("every sampled triple was collinear")
    inliers = xyz[best_mask]
    centroid = inliers.mean(axis=0)
    _, s, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    if inliers.shape[0] < 3 or s[1] < 1e-12:
        raise Degenerate("inlier set is collinear")
    normal = vt[-1]
    return GroundPlane(tuple(normal), float(normal @ centroid))


def remove_ground(cloud: PointCloud, plane: GroundPlane, dist: float = 0.2) -> PointCloud:
    if not dist > 0:
        raise ValueError("dist must be positive")
    return cloud.subset(plane.signed_distance(cloud.xyz) > dist)


def crop_roi(cloud: PointCloud, grid: GridSpec) -> PointCloud:
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    keep = (x > grid.x_min) & (x < grid.x_max) & (y > grid.y_min) & (y < grid.y_max)
    return cloud.subset(keep)


def height_band_filter(cloud: PointCloud, terrain_height, band_low: float = 0.3,
                       band_high: float = 2.0, grid: GridSpec | None = None) -> PointCloud:
    """Keep points whose height above their cell's terrain lies in [band_low, band_high]."""
    if grid is None:
        grid = GridSpec()
    if not band_low < band_high:
        raise ValueError("band_low must be below band_high")
    terrain = np.asarray(terrain_height, dtype=np.float64)
    if terrain.shape != grid.shape:
        raise ValueError(f"terrain grid {terrain.shape} does not match {grid.shape}")
    rows, cols, inside = grid.cell_index(cloud.points[:, 0], cloud.points[:, 1])
    keep = np.zeros(len(cloud), dtype=bool)
    h = cloud.points[inside, 2] - terrain[rows[inside], cols[inside]]
    keep[inside] = (h >= band_low) & (h <= band_high)
    return cloud.subset(keep)


def preprocess_pair(prev: PointCloud, curr: PointCloud, pose_prev_to_curr: RigidTransform2_5D,
                    grid: GridSpec, ground_removal: bool = True, align_first: bool = True,
                    ransac_iterations: int = 100, ransac_inlier_dist: float = 0.2,
                    ground_dist: float = 0.2, seed: int = 0):
    """Align the previous sweep into the current frame, drop ground points, crop to the ROI."""

    def strip(c, s):
        if not ground_removal or len(c) < 3:
            return c
        try:
            plane = fit_ground_plane_ransac(c, ransac_iterations, ransac_inlier_dist, seed=s)
        except Degenerate:
            return c
        return remove_ground(c, plane, ground_dist)

    if align_first:
        prev = transform_cloud(prev, pose_prev_to_curr, frame_id=curr.frame_id)
        prev, curr = strip(prev, seed), strip(curr, seed + 1)
    else:
        prev, curr = strip(prev, seed), strip(curr, seed + 1)
        prev = transform_cloud(prev, pose_prev_to_curr, frame_id=curr.frame_id)
    return crop_roi(prev, grid), crop_roi(curr, grid)
