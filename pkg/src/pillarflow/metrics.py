"""Flow RMSE / AAE and track velocity error statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidShape
from .grid import FlowGrid, GridSpec

AAE_MIN_SPEED = 0.1
CATEGORIES = ("static", "pedestrian_cyclist", "observed_stationary", "slow", "fast")


@dataclass
class FlowMetrics:
    rmse_dynamic: float | None
    rmse_static: float | None
    rmse_average: float | None
    aae: float | None
    n_dynamic: int = 0
    n_static: int = 0
    n_aae: int = 0

    def as_dict(self):
        return asdict(self)


def dynamic_mask_from_gt(gt: FlowGrid):
    """Annotated moving footprints: cells where the ground truth is nonzero."""
    return gt.valid & np.any(gt.values != 0, axis=-1)


def _eval_mask(pred: FlowGrid, gt: FlowGrid):
    if pred.shape != gt.shape:
        raise InvalidShape(f"prediction grid {pred.shape} vs ground truth {gt.shape}")
    return pred.valid & gt.valid


def _angles(a, b):
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = (a * b).sum(axis=-1)
    return np.abs(np.arctan2(cross, dot))


def flow_sums(pred: FlowGrid, gt: FlowGrid, dynamic_mask) -> dict:
    """Squared-error and angle sums per category; pooled across samples by addition."""
    dynamic_mask = np.asarray(dynamic_mask, dtype=bool)
    if dynamic_mask.shape != gt.shape:
        raise InvalidShape("dynamic mask shape mismatch")
    m = _eval_mask(pred, gt)
    err = ((pred.values - gt.values) ** 2).sum(axis=-1)
    dyn = m & dynamic_mask
    sta = m & ~dynamic_mask
    both = m & (pred.speed() > AAE_MIN_SPEED) & (gt.speed() > AAE_MIN_SPEED)
    ang = _angles(pred.values[both], gt.values[both])
    return {"se_dynamic": float(err[dyn].sum()), "n_dynamic": int(dyn.sum()),
            "se_static": float(err[sta].sum()), "n_static": int(sta.sum()),
            "angle": float(ang.sum()), "n_aae": int(both.sum())}


def _finish(s) -> FlowMetrics:
    def root(se, n):
        return math.sqrt(se / n) if n else None
    n_all = s["n_dynamic"] + s["n_static"]
    return FlowMetrics(
        rmse_dynamic=root(s["se_dynamic"], s["n_dynamic"]),
        rmse_static=root(s["se_static"], s["n_static"]),
        rmse_average=root(s["se_dynamic"] + s["se_static"], n_all),
        aae=(s["angle"] / s["n_aae"]) if s["n_aae"] else None,
        n_dynamic=s["n_dynamic"], n_static=s["n_static"], n_aae=s["n_aae"])


def flow_rmse_aae(pred: FlowGrid, gt: FlowGrid, dynamic_mask) -> FlowMetrics:
    """RMSE over cells valid in both grids, split by the dynamic mask; AAE over
    cells where both speeds exceed 0.1 m/s. Empty categories come back as None."""
    return _finish(flow_sums(pred, gt, dynamic_mask))


def pooled_flow_metrics(preds, gts, dyn_masks) -> dict:
    total = None
    for p, g, d in zip(preds, gts, dyn_masks):
        s = flow_sums(p, g, d)
        total = s if total is None else {k: total[k] + s[k] for k in total}
    return _finish(total).as_dict()


# ------------------------------------------------------------------ tracks

@dataclass
class TrackRow:
    t: float
    track_id: int
    x: float
    y: float
    vx: float
    vy: float
    ax: float = 0.0
    ay: float = 0.0
    assoc_cluster_id: int = -1


@dataclass
class TrackVelocityReport:
    mean: dict = field(default_factory=dict)     # category -> m/s or None
    p95: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def as_rows(self):
        return [(c, self.mean.get(c), self.p95.get(c), self.counts.get(c, 0)) for c in CATEGORIES]


def _iou_cells(a: set, b: set) -> float:
    if not a or not b:
        return 0.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def gt_velocities(annotations_by_time: dict) -> dict:
    """(t, track_id) -> (vx, vy) by backward difference (forward difference at the first frame)."""
    times = sorted(annotations_by_time)
    pos = {t: {a.track_id: a for a in annotations_by_time[t]} for t in times}
    out = {}
    for i, t in enumerate(times):
        for tid, a in pos[t].items():
            other = None
            if i > 0 and tid in pos[times[i - 1]]:
                other, dt, sign = pos[times[i - 1]][tid], t - times[i - 1], 1
            elif i + 1 < len(times) and tid in pos[times[i + 1]]:
                other, dt, sign = pos[times[i + 1]][tid], times[i + 1] - t, -1
            if other is None:
                out[(t, tid)] = (0.0, 0.0)
            else:
                out[(t, tid)] = (sign * (a.x - other.x) / dt, sign * (a.y - other.y) / dt)
    return out


def categorize(label: str, speed: float, max_speed: float, stationary_tol=0.05):
    """Categories a ground-truth object contributes to at one frame."""
    if label not in ("car", "pedestrian", "cyclist"):
        return ["static"]
    cats = []
    if label in ("pedestrian", "cyclist"):
        cats.append("pedestrian_cyclist")
    if max_speed <= stationary_tol:
        cats.append("observed_stationary")
    elif speed <= 3.0:
        cats.append("slow" if speed > stationary_tol else "observed_stationary")
    else:
        cats.append("fast")
    return cats


def track_velocity_error(track_rows, annotations_by_time: dict, footprints: dict | None = None,
                         grid: GridSpec | None = None, iou_threshold: float = 0.5,
                         categories=CATEGORIES, poses: dict | None = None) -> TrackVelocityReport:
    """Per-category mean and 95th-percentile of per-frame track velocity error.

    Tracks associate to the ground-truth box whose cell footprint overlaps the
    track's cluster footprint with IoU >= ``iou_threshold``; ``footprints`` maps
    (t, cluster_id) -> set of (row, col). A track without a footprint associates
    to a box containing its position. Unassociated tracks are scored against zero
    velocity in the static category.

    With ``poses`` (t -> world_from_ego), annotations and track rows are in the
    world frame and each box is moved into that frame's ego grid before the
    footprint overlap is taken.
    """
    from .datagen import footprint_mask
    vel = gt_velocities(annotations_by_time)
    max_speed = {}
    for (t, tid), v in vel.items():
        max_speed[tid] = max(max_speed.get(tid, 0.0), math.hypot(*v))
    box_cells = {}
    errors = {c: [] for c in categories}
    by_time = {}
    for r in track_rows:
        by_time.setdefault(r.t, []).append(r)
    for t in sorted(by_time):
        anns = annotations_by_time.get(t, [])
        for r in by_time[t]:
            match = None
            fp = footprints.get((t, r.assoc_cluster_id)) if footprints is not None else None
            if fp and grid is not None:
                best = 0.0
                for a in anns:
                    key = (t, a.track_id)
                    if key not in box_cells:
                        box = a if poses is None else a.transformed(poses[t].inverse())
                        rr, cc = np.nonzero(footprint_mask(box, grid))
                        box_cells[key] = set(zip(rr.tolist(), cc.tolist()))
                    iou = _iou_cells(fp, box_cells[key])
                    if iou >= iou_threshold and iou > best:
                        best, match = iou, a
            else:
                for a in anns:
                    if bool(a.contains_xy(r.x, r.y)):
                        match = a
                        break
            if match is None:
                gv, cats = (0.0, 0.0), ["static"]
            else:
                gv = vel[(t, match.track_id)]
                cats = categorize(match.label, math.hypot(*gv), max_speed[match.track_id])
            e = math.hypot(r.vx - gv[0], r.vy - gv[1])
            for c in cats:
                if c in errors:
                    errors[c].append(e)
    rep = TrackVelocityReport()
    for c in categories:
        e = np.array(errors[c])
        rep.counts[c] = int(e.size)
        rep.mean[c] = float(e.mean()) if e.size else None
        rep.p95[c] = float(np.percentile(e, 95)) if e.size else None
    return rep
