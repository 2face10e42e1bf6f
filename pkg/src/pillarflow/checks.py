"""Finite-difference verification of every differentiable operator and of the composed
flow-net loss, at 64-bit."""
from __future__ import annotations

import numpy as np

from .diff import ops
from .diff.gradcheck import grad_check
from .grid import GridSpec


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_cases(seed: int = 0):
    """(name, op, inputs, attrs) covering each operator and its attribute variants."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    x = r((2, 3, 7, 6))
    cases = [
        ("conv2d", ops.Conv2d, [x, r((4, 3, 3, 3)), r(4)], dict(padding=1)),
        ("conv2d_stride2", ops.Conv2d, [x, r((4, 3, 3, 3)), r(4)], dict(stride=2, padding=1)),
        ("conv2d_dilated", ops.Conv2d, [x, r((4, 3, 3, 3)), r(4)], dict(padding=2, dilation=2)),
        ("leaky_relu", ops.LeakyReLU, [_away_from_zero(rng, (3, 5, 4))], dict(slope=0.1)),
        ("batch_norm", ops.BatchNorm, [r((4, 3, 5, 5)), r(3), r(3), np.zeros(3), np.ones(3)],
         dict(training=True)),
        ("batch_norm_rows", ops.BatchNorm, [r((20, 6)), r(6), r(6), np.zeros(6), np.ones(6)],
         dict(training=True)),
        ("dense", ops.Dense, [r((10, 9)), r((9, 5)), r(5)], {}),
        # fractional offsets keep every sample away from the floor() kinks
        ("bilinear_warp", ops.BilinearWarp,
         [r((2, 3, 6, 7)), np.floor(r((2, 2, 6, 7)) * 2) + rng.uniform(0.2, 0.8, (2, 2, 6, 7))], {}),
        ("correlation", ops.Correlation, [r((2, 4, 6, 6)), r((2, 4, 6, 6))], dict(max_disp=2)),
        ("upsample2x", ops.Upsample2x, [r((2, 3, 4, 5))], {}),
        ("upsample2x_flow", ops.Upsample2x, [r((2, 2, 4, 5))], dict(flow=True)),
        ("concat", ops.Concat, [r((2, 2, 3, 3)), r((2, 3, 3, 3))], {}),
        ("stack", ops.Stack, [r((3, 4)), r((3, 4))], {}),
        ("slice", ops.Slice, [r((4, 2, 3, 3))], dict(start=1, stop=3)),
        ("add", ops.Add, [r((2, 3)), r((2, 3))], {}),
        ("scale", ops.Scale, [r((2, 3))], dict(factor=-2.5)),
    ]
    # distinct values per pillar so the maximum is unique
    n_p, n_s, c = 4, 3, 5
    pillar = np.repeat(np.arange(n_p), n_s)
    slot = np.tile(np.arange(n_s), n_p)
    seg = rng.permutation(n_p * n_s * c).reshape(n_p * n_s, c).astype(np.float64) * 0.1
    cases.append(("segment_max", ops.SegmentMax, [seg], dict(pillar=pillar, slot=slot, n_pillars=n_p, n_slots=n_s)))
    cases.append(("scatter", ops.ScatterCells, [r((5, 3))],
                  dict(image=np.array([0, 0, 1, 1, 1]), rows=np.array([0, 2, 1, 3, 0]),
                       cols=np.array([1, 2, 0, 3, 3]), n_images=2, H=4, W=4)))
    mask = rng.random((2, 4, 5)) < 0.7
    cases.append(("flow_l2", ops.FlowL2Loss, [r((2, 2, 4, 5)), r((2, 2, 4, 5)), mask], dict(weight=0.3)))
    return cases


def check_ops(seed: int = 0) -> dict:
    """Max relative gradient error per operator case."""
    out = {}
    for name, op, inputs, attrs in op_cases(seed):
        wrt = [0, 1] if op is ops.FlowL2Loss else None
        out[name] = grad_check(op, inputs, wrt=wrt, seed=seed, **attrs)
    return out


def small_net_config():
    from .flownet import NetConfig
    return NetConfig(grid=GridSpec(-4.0, 4.0, -4.0, 4.0, 0.25), levels=2, channels=(4, 6), pfn_channels=5,
                     max_pillars=512, max_points=6, max_disp=(2, 2), estimator_channels=(6, 4),
                     context_channels=4, context_dilations=(1, 2), v_max=5.0)


def end_to_end_check(seed: int = 0, n_probe: int = 6, eps: float = 1e-6, floor: float = 1e-5) -> dict:
    """Loss gradient of the whole network against central differences, per parameter tensor.

    Zero-initialized heads and biases are replaced by small random values so
    gradient reaches every layer and no pre-activation sits exactly on a ReLU
    kink (empty cells are exact zeros otherwise). Each tensor is probed at
    ``n_probe`` random entries; the error is max|analytic - numeric| divided by
    max(|analytic|, |numeric|, ``floor``). Biases feeding a batch norm have an
    exactly zero gradient, hence the floor.
    """
    from .datagen import SceneConfig, synth_scene
    from .flownet import (LossWeights, _prepare, encode_clouds, gt_targets, init_params, learnable,
                          loss_and_grads)
    cfg = small_net_config()
    rng = np.random.default_rng([seed, 17])
    params = init_params(cfg, seed, dtype=np.float64)
    for k in params:
        if ".head." in k or k.endswith(".b") or k.endswith(".shift"):
            params[k] = rng.standard_normal(params[k].shape) * 0.1
    samples = [synth_scene(SceneConfig(grid=cfg.grid, seed=seed + i, speed_range=(1.0, 4.0), n_ground=800))
               for i in range(2)]
    prevs, currs = _prepare(samples, cfg, seed=seed, allow_empty=True)
    enc = encode_clouds(prevs, currs, cfg, seed=seed, dtype=np.float64)
    targets = gt_targets([s.gt for s in samples], cfg, dtype=np.float64, occupied=enc.occupied)
    weights = LossWeights(alphas=(0.32, 0.08, 0.02))

    def loss_of(p):
        return loss_and_grads(p, cfg, enc, targets, weights, training=True)[0]

    _, grads, _ = loss_and_grads(params, cfg, enc, targets, weights, training=True)
    out = {}
    for k in learnable(params):
        flat = params[k].reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_of(params)
            flat[i] = orig - eps
            fm = loss_of(params)
            flat[i] = orig
            num[n] = (fp - fm) / (2 * eps)
        ana = grads[k].reshape(-1)[idx]
        scale = max(np.abs(ana).max(), np.abs(num).max(), floor)
        out[k] = float(np.abs(ana - num).max() / scale)
    return out
