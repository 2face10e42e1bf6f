"""Randomized properties over generated inputs."""
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pillarflow.baselines.ogm import binarize_ogm
from pillarflow.diff import bilinear_warp, correlation, upsample2x
from pillarflow.diff.ops import FlowL2Loss
from pillarflow.grid import FlowGrid, GridSpec
from pillarflow.io import decode_flow, decode_pcbin, encode_flow, encode_pcbin
from pillarflow.lidar import PointCloud, RigidTransform2_5D
from pillarflow.tracking.kalman import DetectionObservation, TrackState, kf_predict, kf_update_extended

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
dims = st.integers(1, 6)
quiet = settings(max_examples=40, deadline=None)


@quiet
@given(st.tuples(st.integers(1, 2), st.integers(1, 3), dims, dims).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)))
def test_zero_flow_warp_is_identity(f):
    B, _, H, W = f.shape
    assert np.array_equal(bilinear_warp(f, np.zeros((B, 2, H, W))), f)


@quiet
@given(st.tuples(st.just(1), st.integers(1, 4), dims, dims).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)), st.integers(0, 2))
def test_self_correlation_is_non_negative_at_zero_offset(f, md):
    cv = correlation(f, f, md)
    D = 2 * md + 1
    assert np.all(cv[:, md * D + md] >= 0)


@quiet
@given(finite, st.integers(1, 5), st.integers(1, 5))
def test_upsample_preserves_constants(c, h, w):
    x = np.full((1, 2, h, w), c)
    assert np.allclose(upsample2x(x), c, rtol=1e-12, atol=1e-12)
    assert np.allclose(upsample2x(x, flow=True), 2 * c, rtol=1e-12, atol=1e-12)


@quiet
@given(arrays(np.float64, (2, 2, 3, 4), elements=finite), arrays(np.float64, (2, 2, 3, 4), elements=finite),
       arrays(bool, (2, 3, 4)), st.floats(0, 10))
def test_loss_non_negative_and_zero_on_match(p, g, m, a):
    assert FlowL2Loss.forward(p, g, m, a)[0] >= 0
    assert FlowL2Loss.forward(g, g, m, a)[0] == 0


@quiet
@given(st.floats(-math.pi, math.pi), finite, finite, finite, st.floats(-math.pi, math.pi), finite, finite)
def test_rigid_transform_algebra(yaw, tx, ty, tz, yaw2, ux, uy):
    a = RigidTransform2_5D(yaw, (tx, ty, tz))
    b = RigidTransform2_5D(yaw2, (ux, uy, 0.0))
    p = np.array([[1.0, -2.0, 0.5], [3.0, 4.0, -1.0]])
    assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-8)
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-8)


@quiet
@given(arrays(np.float32, st.tuples(st.integers(0, 30), st.just(3)), elements=st.floats(-1e3, 1e3, width=32)),
       st.floats(0, 1, width=32), st.floats(-1e6, 1e6))
def test_pcbin_round_trip(xyz, r, t):
    # the format stores 32-bit coordinates, so float32 inputs must come back exactly
    cloud = PointCloud(np.column_stack([xyz, np.full(len(xyz), r, np.float32)]).astype(np.float64), t)
    assert decode_pcbin(encode_pcbin(cloud)) == cloud


@quiet
@given(arrays(np.float32, (4, 5, 2), elements=st.floats(-50, 50, width=32)), arrays(bool, (4, 5)),
       st.floats(0.01, 1.0))
def test_flow_file_round_trip(vals, valid, dt):
    grid = GridSpec(0.0, 5.0, 0.0, 4.0, 1.0)
    f = FlowGrid(vals.astype(np.float64), valid, dt=float(np.float32(dt)), grid=grid)
    back = decode_flow(encode_flow(f), grid)
    assert back == f


@quiet
@given(arrays(np.float64, st.tuples(st.integers(0, 40), st.just(3)), elements=st.floats(-10, 10)))
def test_ogm_idempotent_under_duplication(xyz):
    grid = GridSpec(-8, 8, -8, 8, 0.5)
    c = PointCloud(np.column_stack([xyz, np.zeros(len(xyz))]))
    d = PointCloud(np.column_stack([np.vstack([xyz, xyz]), np.zeros(2 * len(xyz))]))
    assert np.array_equal(binarize_ogm(c, grid).data, binarize_ogm(d, grid).data)


@quiet
@given(st.lists(st.tuples(st.floats(0.01, 1.0), finite, finite, st.booleans()), min_size=1, max_size=8))
def test_filter_covariance_stays_psd(steps):
    tr = TrackState(np.zeros(6), np.diag([1.0, 1.0, 4.0, 4.0, 1.0, 1.0]))
    for dt, x, y, with_v in steps:
        tr = kf_predict(tr, dt)
        o = DetectionObservation(np.array([x, y, 0, 0, 1, 1, 1.0]), np.eye(7) * 0.1,
                                 np.array([1.0, 0.0]) if with_v else None, np.eye(2) * 0.2 if with_v else None)
        tr = kf_update_extended(tr, o)
        assert np.allclose(tr.cov, tr.cov.T)
        assert np.linalg.eigvalsh(tr.cov).min() >= -1e-9
