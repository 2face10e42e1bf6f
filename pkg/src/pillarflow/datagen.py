"""Ground-truth flow rasterization, the synthetic LIDAR scene generator, augmentation and sample I/O."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import FlowGrid, GridSpec
from .io import (decode_flow, decode_pcbin, encode_flow, encode_pcbin, read_pose_csv,
                 write_pose_csv)
from .lidar import PointCloud, RigidTransform2_5D, transform_cloud

ANN_FIELDS = ["track_id", "t", "x", "y", "z", "yaw", "l", "w", "h"]
MOVABLE = ("car", "pedestrian", "cyclist")


@dataclass(frozen=True)
class ObjectAnnotation:
    track_id: int
    t: float
    x: float
    y: float
    z: float
    yaw: float
    l: float
    w: float
    h: float
    label: str = ""

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError("box sizes must be positive")

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    def transformed(self, pose: RigidTransform2_5D) -> "ObjectAnnotation":
        x, y, z = pose.apply(self.center)
        return replace(self, x=float(x), y=float(y), z=float(z), yaw=self.yaw + pose.yaw)

    def contains_xy(self, px, py):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(px) - self.x
        dy = np.asarray(py) - self.y
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= self.l / 2) & (np.abs(ly) <= self.w / 2)

    def contains(self, xyz):
        xyz = np.asarray(xyz)
        inz = np.abs(xyz[..., 2] - self.z) <= self.h / 2
        return self.contains_xy(xyz[..., 0], xyz[..., 1]) & inz


@dataclass(eq=False)
class FramePairSample:
    sweep_prev: PointCloud
    sweep_curr: PointCloud
    ego_pose: RigidTransform2_5D          # maps previous-frame points into the current frame
    ann_prev: list                        # annotations at t_prev, in the current frame
    ann_curr: list                        # annotations at t_curr, in the current frame
    gt: FlowGrid

    @property
    def dt(self):
        return self.sweep_curr.timestamp - self.sweep_prev.timestamp

    def __eq__(self, other):
        if not isinstance(other, FramePairSample):
            return NotImplemented
        return (self.sweep_prev == other.sweep_prev and self.sweep_curr == other.sweep_curr
                and self.ego_pose == other.ego_pose and self.ann_prev == other.ann_prev
                and self.ann_curr == other.ann_curr and self.gt == other.gt)


@dataclass(frozen=True)
class SceneConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(-8.0, 8.0, -8.0, 8.0, 0.25))
    dt: float = 0.1
    n_moving: tuple = (2, 4)
    n_static: tuple = (1, 3)
    speed_range: tuple = (1.0, 10.0)
    pedestrian_fraction: float = 0.25
    parked_fraction: float = 0.5      # share of static objects that are movable-class (parked cars)
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    noise_sigma: float = 0.02
    point_density: float = 30.0       # points per square meter of visible surface
    n_ground: int = 6000
    sensor_height: float = 1.8
    clearance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ValueError("speed range must be non-negative and ordered")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


# ------------------------------------------------------------------ ground truth

def rasterize_gt_flow(ann_prev, ann_curr, grid: GridSpec, dt: float, yaw_aware: bool = False) -> FlowGrid:
    """Paint each track's difference-quotient velocity onto its current-frame footprint."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    H, W = grid.shape
    values = np.zeros((H, W, 2))
    prev = {a.track_id: a for a in ann_prev}
    cx, cy = grid.cell_centers()
    for a in sorted(ann_curr, key=lambda a: a.track_id):
        p = prev.get(a.track_id)
        if p is None:
            continue
        r0, c0, r1, c1 = _footprint_cells(a, grid)
        if r0 >= r1 or c0 >= c1:
            continue
        sx, sy = cx[r0:r1, c0:c1], cy[r0:r1, c0:c1]
        inside = a.contains_xy(sx, sy)
        if yaw_aware:
            # velocity of each footprint point under the box's rigid motion prev -> curr
            motion = RigidTransform2_5D(a.yaw - p.yaw, (0.0, 0.0, 0.0))
            rel = np.stack([sx - a.x, sy - a.y], axis=-1)
            back = motion.inverse().rotate_vectors(rel) + np.array([p.x, p.y])
            vel = (np.stack([sx, sy], axis=-1) - back) / dt
        else:
            vel = np.broadcast_to(np.array([a.x - p.x, a.y - p.y]) / dt, sx.shape + (2,))
        block = values[r0:r1, c0:c1]
        block[inside] = vel[inside]
    return FlowGrid(values, np.ones((H, W), dtype=bool), dt=dt, grid=grid)


def _footprint_cells(a: ObjectAnnotation, grid: GridSpec):
    rad = 0.5 * math.hypot(a.l, a.w)
    c0 = max(int(math.floor((a.x - rad - grid.x_min) / grid.resolution)), 0)
    c1 = min(int(math.floor((a.x + rad - grid.x_min) / grid.resolution)) + 1, grid.W)
    r0 = max(int(math.floor((a.y - rad - grid.y_min) / grid.resolution)), 0)
    r1 = min(int(math.floor((a.y + rad - grid.y_min) / grid.resolution)) + 1, grid.H)
    return r0, c0, r1, c1


def _storable(flow: FlowGrid) -> FlowGrid:
    """Round values to float32 so FLOW v1 files round-trip exactly."""
    return FlowGrid(flow.values.astype(np.float32), flow.valid, dt=flow.dt, grid=flow.grid)


def footprint_mask(ann, grid: GridSpec):
    cx, cy = grid.cell_centers()
    return ann.contains_xy(cx, cy)


# ------------------------------------------------------------------ synthetic scenes

@dataclass
class SceneObject:
    track_id: int
    label: str
    l: float
    w: float
    h: float
    x0: float          # world position at t = 0
    y0: float
    yaw: float
    speed: float
    reflectance: float

    def pose_at(self, t):
        return (self.x0 + self.speed * math.cos(self.yaw) * t,
                self.y0 + self.speed * math.sin(self.yaw) * t)

    def annotation(self, t, pose_ego_from_world: RigidTransform2_5D) -> ObjectAnnotation:
        x, y = self.pose_at(t)
        a = ObjectAnnotation(self.track_id, t, x, y, self.h / 2, self.yaw, self.l, self.w, self.h, self.label)
        return a.transformed(pose_ego_from_world)

    @property
    def movable(self):
        return self.label in MOVABLE


@dataclass
class SynthSequence:
    """Consecutive sweeps of one scene. Sweeps are in their own ego frames."""

    sweeps: list
    world_from_ego: list
    objects: list
    times: list
    grid: GridSpec

    def annotations_world(self, k):
        ident = RigidTransform2_5D()
        return [o.annotation(self.times[k], ident) for o in self.objects]

    def annotations_in_frame(self, k, frame):
        ego_from_world = self.world_from_ego[frame].inverse()
        return [o.annotation(self.times[k], ego_from_world) for o in self.objects]

    def pose_prev_to_curr(self, k):
        return self.world_from_ego[k].inverse().compose(self.world_from_ego[k - 1])

    def pair(self, k) -> FramePairSample:
        """Sample built from sweeps k-1 and k."""
        ann_prev = self.annotations_in_frame(k - 1, k)
        ann_curr = self.annotations_in_frame(k, k)
        dt = self.times[k] - self.times[k - 1]
        gt = _storable(rasterize_gt_flow(ann_prev, ann_curr, self.grid, dt))
        return FramePairSample(self.sweeps[k - 1], self.sweeps[k], self.pose_prev_to_curr(k),
                               ann_prev, ann_curr, gt)


_SIZES = {
    "car": ((3.6, 4.8), (1.6, 2.0), (1.4, 1.8)),
    "pedestrian": ((0.5, 0.8), (0.5, 0.8), (1.5, 1.9)),
    "cyclist": ((1.6, 1.9), (0.6, 0.8), (1.5, 1.8)),
    "static": ((0.4, 3.0), (0.4, 1.5), (1.0, 2.5)),
}


def _sample_object(rng, tid, label, cfg: SceneConfig, speed):
    (l0, l1), (w0, w1), (h0, h1) = _SIZES[label]
    l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
    if label == "pedestrian":
        speed = min(speed, 2.0)
    return SceneObject(tid, label, l, w, h, 0.0, 0.0, rng.uniform(-math.pi, math.pi), speed,
                       rng.uniform(0.1, 0.9))


def _place(rng, obj: SceneObject, placed, cfg: SceneConfig, ego_track, times, tries=200):
    g = cfg.grid
    margin = 0.5 * math.hypot(obj.l, obj.w) + 0.3
    span = obj.speed * (times[-1] - times[0])
    for _ in range(tries):
        # start so that the trajectory midpoint lies inside the ROI
        mx = rng.uniform(g.x_min + margin, g.x_max - margin)
        my = rng.uniform(g.y_min + margin, g.y_max - margin)
        obj.x0 = mx - 0.5 * span * math.cos(obj.yaw)
        obj.y0 = my - 0.5 * span * math.sin(obj.yaw)
        ok = True
        for t, (ex, ey) in zip(times, ego_track):
            x, y = obj.pose_at(t)
            if math.hypot(x - ex, y - ey) < margin + 1.5:
                ok = False
                break
            for o in placed:
                ox, oy = o.pose_at(t)
                need = margin + 0.5 * math.hypot(o.l, o.w) + cfg.clearance
                if math.hypot(x - ox, y - oy) < need:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return True
    return False


def _box_points(rng, obj: SceneObject, t, ego_from_world: RigidTransform2_5D, cfg: SceneConfig):
    """Points on the box faces visible from the sensor, in the ego frame."""
    x, y = obj.pose_at(t)
    a = ObjectAnnotation(obj.track_id, t, x, y, obj.h / 2, obj.yaw, obj.l, obj.w, obj.h).transformed(ego_from_world)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    ax_l = np.array([c, s, 0.0])
    ax_w = np.array([-s, c, 0.0])
    ax_h = np.array([0.0, 0.0, 1.0])
    center = a.center
    sensor = np.array([0.0, 0.0, cfg.sensor_height])
    faces = [
        (ax_l, a.l / 2, ax_w, a.w, ax_h, a.h),
        (-ax_l, a.l / 2, ax_w, a.w, ax_h, a.h),
        (ax_w, a.w / 2, ax_l, a.l, ax_h, a.h),
        (-ax_w, a.w / 2, ax_l, a.l, ax_h, a.h),
        (ax_h, a.h / 2, ax_l, a.l, ax_w, a.w),
    ]
    chunks = []
    for normal, off, u, lu, v, lv in faces:
        fc = center + normal * off
        if normal @ (sensor - fc) <= 0:
            continue
        n = int(rng.poisson(cfg.point_density * lu * lv))
        if n == 0:
            continue
        su = rng.uniform(-0.5, 0.5, n)[:, None] * lu
        sv = rng.uniform(-0.5, 0.5, n)[:, None] * lv
        chunks.append(fc + su * u + sv * v)
    if not chunks:
        return np.zeros((0, 4))
    xyz = np.concatenate(chunks)
    xyz = xyz + rng.normal(0.0, cfg.noise_sigma, xyz.shape)
    r = np.clip(obj.reflectance + rng.normal(0.0, 0.03, len(xyz)), 0.0, 1.0)
    return np.column_stack([xyz, r])


def synth_sequence(cfg: SceneConfig, n_frames: int = 2, movers: bool = True) -> SynthSequence:
    """Render ``n_frames`` consecutive sweeps of one randomly drawn scene; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    times = [k * cfg.dt for k in range(n_frames)]
    poses = []
    ex = ey = eyaw = 0.0
    ego_track = []
    for k in range(n_frames):
        poses.append(RigidTransform2_5D(eyaw, (ex, ey, 0.0)))
        ego_track.append((ex, ey))
        ex += cfg.ego_speed * math.cos(eyaw) * cfg.dt
        ey += cfg.ego_speed * math.sin(eyaw) * cfg.dt
        eyaw += cfg.ego_yaw_rate * cfg.dt

    objects = []
    tid = 1
    n_static = int(rng.integers(cfg.n_static[0], cfg.n_static[1] + 1))
    n_moving = int(rng.integers(cfg.n_moving[0], cfg.n_moving[1] + 1)) if movers else 0
    for _ in range(n_moving):
        label = "pedestrian" if rng.random() < cfg.pedestrian_fraction else ("cyclist" if rng.random() < 0.15 else "car")
        obj = _sample_object(rng, tid, label, cfg, rng.uniform(*cfg.speed_range))
        if _place(rng, obj, objects, cfg, ego_track, times):
            objects.append(obj)
            tid += 1
    for _ in range(n_static):
        label = "car" if rng.random() < cfg.parked_fraction else "static"
        obj = _sample_object(rng, tid, label, cfg, 0.0)
        if _place(rng, obj, objects, cfg, ego_track, times):
            objects.append(obj)
            tid += 1

    g = cfg.grid
    sweeps = []
    for k, t in enumerate(times):
        ego_from_world = poses[k].inverse()
        chunks = [_box_points(rng, o, t, ego_from_world, cfg) for o in objects]
        pad = 2.0
        gx = rng.uniform(g.x_min - pad, g.x_max + pad, cfg.n_ground)
        gy = rng.uniform(g.y_min - pad, g.y_max + pad, cfg.n_ground)
        gz = rng.normal(0.0, cfg.noise_sigma, cfg.n_ground)
        gr = rng.uniform(0.0, 0.3, cfg.n_ground)
        chunks.append(np.column_stack([gx, gy, gz, gr]))
        pts = np.concatenate(chunks).astype(np.float32).astype(np.float64)
        sweeps.append(PointCloud(pts, t, "ego"))
    return SynthSequence(sweeps, poses, objects, times, g)


def synth_scene(cfg: SceneConfig) -> FramePairSample:
    return synth_sequence(cfg, 2).pair(1)


# ------------------------------------------------------------------ augmentation

def _scale_points(cloud: PointCloud, boxes, factors):
    pts = cloud.points.copy()
    for a, s in zip(boxes, factors):
        if s == 1.0:
            continue
        inside = a.contains(pts[:, :3])
        pts[inside, :3] += (s - 1.0) * (pts[inside, :3] - a.center)
    return cloud.with_points(pts)


def augment(sample: FramePairSample, seed: int = 0, rotation_range: float = math.pi,
            scale_range: tuple = (0.95, 1.05), rotation: float | None = None,
            scales: dict | None = None) -> FramePairSample:
    """Ego-centric yaw rotation of the whole pair plus independent per-box scaling.

    ``rotation`` and ``scales`` (track_id -> factor) override the random draws.
    """
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-rotation_range, rotation_range) if rotation is None else rotation
    track_ids = sorted({a.track_id for a in sample.ann_prev} | {a.track_id for a in sample.ann_curr})
    draws = {tid: float(rng.uniform(*scale_range)) for tid in track_ids}
    if scales is not None:
        draws.update(scales)

    # box scaling in each sweep's own frame
    to_prev = sample.ego_pose.inverse()
    prev_boxes = [a.transformed(to_prev) for a in sample.ann_prev]
    prev = _scale_points(sample.sweep_prev, prev_boxes, [draws[a.track_id] for a in sample.ann_prev])
    curr = _scale_points(sample.sweep_curr, sample.ann_curr, [draws[a.track_id] for a in sample.ann_curr])

    def grow(a):
        s = draws[a.track_id]
        return a if s == 1.0 else replace(a, l=a.l * s, w=a.w * s, h=a.h * s)

    ann_prev = [grow(a) for a in sample.ann_prev]
    ann_curr = [grow(a) for a in sample.ann_curr]

    if theta != 0.0:
        rot = RigidTransform2_5D(theta)
        prev = transform_cloud(prev, rot)
        curr = transform_cloud(curr, rot)
        pose = rot.compose(sample.ego_pose).compose(rot.inverse())
        ann_prev = [a.transformed(rot) for a in ann_prev]
        ann_curr = [a.transformed(rot) for a in ann_curr]
    else:
        pose = sample.ego_pose
    grid = sample.gt.grid or GridSpec()
    gt = _storable(rasterize_gt_flow(ann_prev, ann_curr, grid, sample.gt.dt))
    return FramePairSample(prev, curr, pose, ann_prev, ann_curr, gt)


# ------------------------------------------------------------------ sample I/O

def _encode_annotations(prev, curr) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    labels = any(a.label for a in list(prev) + list(curr))
    wr.writerow(ANN_FIELDS + (["label"] if labels else []))
    for a in list(prev) + list(curr):
        row = [a.track_id, repr(a.t), repr(a.x), repr(a.y), repr(a.z), repr(a.yaw), repr(a.l),
               repr(a.w), repr(a.h)]
        wr.writerow(row + ([a.label] if labels else []))
    return buf.getvalue()


def parse_annotations(text: str) -> list[ObjectAnnotation]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty annotation table", section="annotations", offset=0) from None
    if header[:9] != ANN_FIELDS:
        raise FormatError("annotation header must be " + ",".join(ANN_FIELDS), section="annotations", offset=0)
    out = []
    offset = len(text.split("\n", 1)[0]) + 1
    for row in reader:
        try:
            if len(row) < 9:
                raise ValueError("short row")
            out.append(ObjectAnnotation(int(row[0]), *(float(v) for v in row[1:9]),
                                        label=row[9] if len(row) > 9 else ""))
        except (IndexError, ValueError):
            raise FormatError("malformed annotation row", section="annotations", offset=offset) from None
        offset += len(",".join(row)) + 1
    return out


def read_annotations(path) -> list[ObjectAnnotation]:
    return parse_annotations(Path(path).read_text())


def write_annotations(path, anns):
    Path(path).write_text(_encode_annotations(anns, []))


def write_sample(path, sample: FramePairSample):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    (d / "prev.pcbin").write_bytes(encode_pcbin(sample.sweep_prev))
    (d / "curr.pcbin").write_bytes(encode_pcbin(sample.sweep_curr))
    write_pose_csv(d / "ego.csv", sample.ego_pose)
    (d / "ann.csv").write_text(_encode_annotations(sample.ann_prev, sample.ann_curr))
    (d / "gt.flow").write_bytes(encode_flow(sample.gt))


def read_sample(path, grid: GridSpec | None = None) -> FramePairSample:
    d = Path(path)
    files = {}
    for name in ("prev.pcbin", "curr.pcbin", "ego.csv", "ann.csv", "gt.flow"):
        try:
            files[name] = (d / name).read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read {d / name}: {exc.strerror}") from exc
    try:
        prev = decode_pcbin(files["prev.pcbin"])
    except FormatError as exc:
        raise FormatError(f"prev.pcbin: {exc}", section=f"prev.pcbin/{exc.section}", offset=exc.offset) from None
    try:
        curr = decode_pcbin(files["curr.pcbin"])
    except FormatError as exc:
        raise FormatError(f"curr.pcbin: {exc}", section=f"curr.pcbin/{exc.section}", offset=exc.offset) from None
    pose = read_pose_csv(d / "ego.csv")
    anns = parse_annotations(files["ann.csv"].decode("utf-8"))
    try:
        gt = decode_flow(files["gt.flow"], grid)
    except FormatError as exc:
        raise FormatError(f"gt.flow: {exc}", section=f"gt.flow/{exc.section}", offset=exc.offset) from None
    ann_prev = [a for a in anns if a.t == prev.timestamp]
    ann_curr = [a for a in anns if a.t == curr.timestamp]
    return FramePairSample(prev, curr, pose, ann_prev, ann_curr, gt)


def load_split(manifest, split, grid: GridSpec | None = None) -> list[FramePairSample]:
    from .io import read_manifest
    return [read_sample(p, grid) for p in read_manifest(manifest, split)]


def estimate_velocity_noise(preds, gts, masks=None) -> np.ndarray:
    """Sample covariance (2x2) of predicted-minus-true velocity over masked valid cells.

    Used to set the velocity measurement noise from a training split.
    """
    res = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        m = p.valid & g.valid
        if masks is not None:
            m = m & masks[i]
        res.append((p.values - g.values)[m])
    r = np.concatenate(res) if res else np.zeros((0, 2))
    if r.shape[0] < 2:
        raise ValueError("need at least two residuals to estimate a covariance")
    return np.cov(r, rowvar=False)
