import math

import numpy as np
import pytest

from pillarflow.datagen import ObjectAnnotation
from pillarflow.errors import InvalidShape
from pillarflow.grid import FlowGrid, GridSpec
from pillarflow.metrics import TrackRow, flow_rmse_aae, pooled_flow_metrics, track_velocity_error

G = GridSpec(-2.0, 2.0, -2.0, 2.0, 0.5)


def random_flow(rng, H=8, W=8):
    v = rng.normal(size=(H, W, 2)) * rng.choice([0.0, 0.05, 1.0, 3.0], size=(H, W, 1))
    return FlowGrid(v, rng.random((H, W)) < 0.8)


def loop_flow_metrics(pred, gt, dyn):
    se = {"d": [], "s": []}
    angles = []
    H, W = gt.shape
    for r in range(H):
        for c in range(W):
            if not (pred.valid[r, c] and gt.valid[r, c]):
                continue
            p, g = pred.values[r, c], gt.values[r, c]
            e = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2
            se["d" if dyn[r, c] else "s"].append(e)
            if math.hypot(*p) > 0.1 and math.hypot(*g) > 0.1:
                cosang = (p[0] * g[0] + p[1] * g[1]) / (math.hypot(*p) * math.hypot(*g))
                angles.append(math.acos(max(-1.0, min(1.0, cosang))))
    root = lambda xs: math.sqrt(sum(xs) / len(xs)) if xs else None
    return root(se["d"]), root(se["s"]), root(se["d"] + se["s"]), (sum(angles) / len(angles) if angles else None)


def close(a, b, tol=1e-9):
    return (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= tol)


def test_flow_metric_examples():
    gt = FlowGrid(np.random.default_rng(0).normal(size=(8, 8, 2)), np.ones((8, 8), bool))
    dyn = np.zeros((8, 8), bool)
    dyn[:2] = True
    m = flow_rmse_aae(gt, gt, dyn)
    assert m.rmse_dynamic == m.rmse_static == m.rmse_average == 0.0 and m.aae == 0.0
    shifted = FlowGrid(gt.values + [1.0, 0.0], gt.valid)
    assert flow_rmse_aae(shifted, gt, dyn).rmse_average == pytest.approx(1.0)
    one = np.ones((1, 1), bool)
    m = flow_rmse_aae(FlowGrid([[[1.0, 0.0]]], one), FlowGrid([[[0.0, 1.0]]], one), one)
    assert m.aae == pytest.approx(math.pi / 2)
    assert flow_rmse_aae(gt, gt, np.zeros((8, 8), bool)).rmse_dynamic is None
    with pytest.raises(InvalidShape):
        flow_rmse_aae(FlowGrid.zeros(G), FlowGrid(np.zeros((4, 4, 2)), np.ones((4, 4), bool)), np.zeros((8, 8)))


def test_flow_metrics_match_loop_oracle_and_are_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pred, gt = random_flow(rng), random_flow(rng)
        dyn = rng.random((8, 8)) < 0.3
        m = flow_rmse_aae(pred, gt, dyn)
        ref = loop_flow_metrics(pred, gt, dyn)
        assert all(close(a, b) for a, b in zip((m.rmse_dynamic, m.rmse_static, m.rmse_average, m.aae), ref))
        assert m.aae is None or 0 <= m.aae <= math.pi
        perm = rng.permutation(64)
        shuf = lambda f: FlowGrid(f.values.reshape(64, 2)[perm].reshape(8, 8, 2), f.valid.ravel()[perm].reshape(8, 8))
        m2 = flow_rmse_aae(shuf(pred), shuf(gt), dyn.ravel()[perm].reshape(8, 8))
        assert close(m.rmse_average, m2.rmse_average) and close(m.aae, m2.aae)


def test_pooled_metrics_pool_squared_errors():
    rng = np.random.default_rng(2)
    preds, gts, dyns = [], [], []
    for _ in range(3):
        preds.append(random_flow(rng))
        gts.append(random_flow(rng))
        dyns.append(rng.random((8, 8)) < 0.4)
    stack = lambda fs: FlowGrid(np.concatenate([f.values for f in fs]), np.concatenate([f.valid for f in fs]))
    whole = flow_rmse_aae(stack(preds), stack(gts), np.concatenate(dyns))
    pooled = pooled_flow_metrics(preds, gts, dyns)
    assert close(pooled["rmse_dynamic"], whole.rmse_dynamic) and close(pooled["aae"], whole.aae)


# ---------------------------------------------------------------- track velocity error

def ann(tid, t, x, y, label="car", l=1.0, w=1.0):
    return ObjectAnnotation(tid, t, x, y, 0.5, 0.0, l, w, 1.0, label)


def test_perfect_tracker_and_constant_error():
    times = [0.125 * k for k in range(10)]      # dyadic times keep the difference quotient exact
    anns = {t: [ann(1, t, -1.0 + 4.0 * t, 0.0)] for t in times}
    perfect = [TrackRow(t, 1, -1.0 + 4.0 * t, 0.0, 4.0, 0.0) for t in times]
    rep = track_velocity_error(perfect, anns)
    assert rep.mean["fast"] == 0.0 and rep.counts["fast"] == 10
    off = [TrackRow(t, 1, -1.0 + 4.0 * t, 0.0, 4.0, 2.0) for t in times]
    rep = track_velocity_error(off, anns)
    assert rep.mean["fast"] == pytest.approx(2.0) and rep.p95["fast"] == pytest.approx(2.0)


def brute_force_track_error(rows, anns_by_t, footprints, grid):
    """Per row: IoU-best box >= 0.5 (cell-center-in-box footprints), else zero velocity in 'static'."""
    times = sorted(anns_by_t)
    out = {}

    def gtv(t, tid):
        i = times.index(t)
        cur = {a.track_id: a for a in anns_by_t[t]}[tid]
        if i > 0:
            prev = {a.track_id: a for a in anns_by_t[times[i - 1]]}.get(tid)
            if prev is not None:
                return ((cur.x - prev.x) / (t - times[i - 1]), (cur.y - prev.y) / (t - times[i - 1]))
        if i + 1 < len(times):
            nxt = {a.track_id: a for a in anns_by_t[times[i + 1]]}.get(tid)
            if nxt is not None:
                return ((nxt.x - cur.x) / (times[i + 1] - t), (nxt.y - cur.y) / (times[i + 1] - t))
        return (0.0, 0.0)

    peak = {}
    for t in times:
        for a in anns_by_t[t]:
            peak[a.track_id] = max(peak.get(a.track_id, 0.0), math.hypot(*gtv(t, a.track_id)))

    def cells(a):
        s = set()
        for r in range(grid.H):
            for c in range(grid.W):
                x = grid.x_min + (c + 0.5) * grid.resolution
                y = grid.y_min + (r + 0.5) * grid.resolution
                if abs(x - a.x) <= a.l / 2 and abs(y - a.y) <= a.w / 2:
                    s.add((r, c))
        return s

    for r in rows:
        fp = footprints[(r.t, r.assoc_cluster_id)]
        best, match = 0.0, None
        for a in anns_by_t[r.t]:
            bc = cells(a)
            iou = len(fp & bc) / len(fp | bc) if bc else 0.0
            if iou >= 0.5 and iou > best:
                best, match = iou, a
        if match is None:
            v, cats = (0.0, 0.0), ["static"]
        else:
            v = gtv(r.t, match.track_id)
            s = math.hypot(*v)
            if match.label == "static":
                cats = ["static"]
            else:
                cats = ["pedestrian_cyclist"] if match.label in ("pedestrian", "cyclist") else []
                if peak[match.track_id] <= 0.05 or s <= 0.05:
                    cats.append("observed_stationary")
                elif s <= 3.0:
                    cats.append("slow")
                else:
                    cats.append("fast")
        for c in cats:
            out.setdefault(c, []).append(math.hypot(r.vx - v[0], r.vy - v[1]))
    return out


def test_track_error_matches_brute_force():
    rng = np.random.default_rng(3)
    grid = GridSpec(-4.0, 4.0, -4.0, 4.0, 0.5)
    for _ in range(100):
        times = [0.0, 0.1, 0.2]
        objs = []
        for tid in range(1, rng.integers(2, 5)):
            label = rng.choice(["car", "pedestrian", "cyclist", "static"])
            v = rng.choice([0.0, 2.0, 8.0]) * rng.normal(size=2) / math.sqrt(2) if label != "static" else np.zeros(2)
            objs.append((tid, label, rng.uniform(-2.5, 2.5, 2), v, rng.uniform(0.8, 2.0, 2)))
        anns = {t: [ann(tid, t, *(p + v * t), label, *sz) for tid, label, p, v, sz in objs] for t in times}
        rows, fps = [], {}
        cid = 0
        for t in times:
            for a in anns[t]:
                if rng.random() < 0.8:
                    cs = {(r, c) for r in range(16) for c in range(16)
                          if abs(grid.x_min + (c + 0.5) * 0.5 - a.x) <= a.l / 2 + rng.choice([0, 0.5])
                          and abs(grid.y_min + (r + 0.5) * 0.5 - a.y) <= a.w / 2}
                    if not cs:
                        continue
                    fps[(t, cid)] = cs
                    rows.append(TrackRow(t, a.track_id, a.x, a.y, *rng.normal(size=2) * 3, 0.0, 0.0, cid))
                    cid += 1
            fps[(t, cid)] = {(0, 0), (0, 1)}             # a clutter track
            rows.append(TrackRow(t, 99, -3.8, -3.8, *rng.normal(size=2), 0.0, 0.0, cid))
            cid += 1
        rep = track_velocity_error(rows, anns, fps, grid)
        ref = brute_force_track_error(rows, anns, fps, grid)
        for c, n in rep.counts.items():
            assert n == len(ref.get(c, []))
            if n:
                assert abs(rep.mean[c] - float(np.mean(ref[c]))) <= 1e-9
                assert abs(rep.p95[c] - float(np.percentile(ref[c], 95))) <= 1e-9
