"""The flow network: pillar encoder, feature pyramid, warp / cost volume / estimator per level,
dilated context refinement, multi-scale loss and the training loop.

Internally each level regresses a displacement field in cells/frame at that
level's resolution, defined on the *current* sweep's grid: ``d(y, x)`` points
from a current cell to where its content sat in the previous sweep, so the
previous sweep's features are warped by ``d`` before the cost volume. Metric
velocity is ``-d * resolution / dt``; the sign flip happens only at the API
boundary (:func:`displacement_to_velocity`, :func:`velocity_to_displacement`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diff.adam import AdamState, adam_step
from .diff.ops import (Add, BatchNorm, BilinearWarp, Concat, Conv2d, Correlation, FlowL2Loss,
                       LeakyReLU, ScatterCells, Slice, Upsample2x)
from .diff.tape import Tape, Var
from .errors import EmptySweep, InvalidShape
from .grid import FlowGrid, GridSpec
from .lidar import PointCloud, RigidTransform2_5D, crop_roi, preprocess_pair
from .pillars import N_DESCRIPTORS, PseudoImage, pfn_embed, voxelize


@dataclass(frozen=True)
class NetConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    levels: int = 3
    channels: tuple = (16, 32, 32)
    pfn_channels: int = 64
    max_pillars: int = 12000
    max_points: int = 32
    max_disp: tuple = (4, 4, 4)
    estimator_channels: tuple = (32, 16)
    context_channels: int = 32
    context_dilations: tuple = (1, 2, 4)
    leaky_slope: float = 0.1
    v_max: float = 20.0
    dt: float = 0.1
    input_mode: str = "pillars"   # "pillars" or "ogm" (binary occupancy, one-channel stem)
    ground_removal: bool = True
    align_first: bool = True
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("pyramid needs at least two levels")
        if len(self.channels) != self.levels or len(self.max_disp) != self.levels:
            raise ValueError("channels and max_disp need one entry per level")
        if self.input_mode not in ("pillars", "ogm"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        for lvl in range(1, self.levels + 1):
            need = math.ceil(self.v_max * self.dt / (self.grid.resolution * 2 ** lvl))
            if self.max_disp[lvl - 1] < need:
                raise ValueError(f"max_disp at level {lvl} is {self.max_disp[lvl - 1]}, "
                                 f"expected motion needs {need}")

    @classmethod
    def desk(cls, **overrides):
        """64x64 grid over [-8, 8]^2 at 0.25 m, three levels; trains on a CPU in minutes."""
        base = dict(grid=GridSpec(-8.0, 8.0, -8.0, 8.0, 0.25), levels=3, channels=(16, 32, 32),
                    pfn_channels=16, max_pillars=4096, max_points=32, max_disp=(4, 4, 4))
        base.update(overrides)
        return cls(**base)

    @property
    def in_channels(self):
        return self.pfn_channels if self.input_mode == "pillars" else 1

    def level_shape(self, lvl):
        return self.grid.H // 2 ** lvl, self.grid.W // 2 ** lvl

    def to_dict(self):
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridSpec(**d["grid"])
        for k in ("channels", "max_disp", "estimator_channels", "context_dilations"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    """alpha per pyramid level, listed coarse to fine; levels below ``l0`` are skipped.

    Level 0 is the upsampled full-resolution output; with L = 3 the four default
    weights cover levels 3, 2, 1, 0.
    """

    alphas: tuple = (0.32, 0.08, 0.02, 0.01)
    l0: int = 0

    def __post_init__(self):
        if any(a < 0 for a in self.alphas):
            raise ValueError("loss weights must be non-negative")
        if self.l0 < 0:
            raise ValueError("l0 must be >= 0")

    def alpha(self, lvl, levels):
        idx = levels - lvl
        if lvl < self.l0 or idx >= len(self.alphas):
            return 0.0
        return float(self.alphas[idx])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    base_lr: float = 1e-4
    lr_decay: float = 0.9
    decay_fraction: float = 0.1
    total_iters: int = 0          # 0: derived from epochs and dataset size
    augment: bool = True
    rotation_range: float = math.pi
    scale_range: tuple = (0.95, 1.05)
    val_samples: int = 20
    loss_mask: str = "occupied"   # "occupied": cells with points in either sweep; "all": every GT-valid cell


def _conv_init(rng, o, i, k, dtype):
    std = math.sqrt(2.0 / (i * k * k))
    return (rng.standard_normal((o, i, k, k)) * std).astype(dtype), np.zeros(o, dtype)


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-initialized weights; both estimator heads and the context head start at zero."""
    rng = np.random.default_rng(seed)
    p = {}
    if cfg.input_mode == "pillars":
        C = cfg.pfn_channels
        p["pfn.w"] = (rng.standard_normal((N_DESCRIPTORS, C)) * math.sqrt(2.0 / N_DESCRIPTORS)).astype(dtype)
        p["pfn.b"] = np.zeros(C, dtype)
        p["pfn.bn.scale"] = np.ones(C, dtype)
        p["pfn.bn.shift"] = np.zeros(C, dtype)
        p["pfn.bn.mean"] = np.zeros(C, dtype)
        p["pfn.bn.var"] = np.ones(C, dtype)
    prev_c = cfg.in_channels
    for lvl in range(1, cfg.levels + 1):
        c = cfg.channels[lvl - 1]
        p[f"pyr{lvl}.a.w"], p[f"pyr{lvl}.a.b"] = _conv_init(rng, c, prev_c, 3, dtype)
        p[f"pyr{lvl}.b.w"], p[f"pyr{lvl}.b.b"] = _conv_init(rng, c, c, 3, dtype)
        prev_c = c
    h1, h2 = cfg.estimator_channels
    for lvl in range(1, cfg.levels + 1):
        d = 2 * cfg.max_disp[lvl - 1] + 1
        cin = d * d + cfg.channels[lvl - 1] + 2
        p[f"est{lvl}.c1.w"], p[f"est{lvl}.c1.b"] = _conv_init(rng, h1, cin, 3, dtype)
        p[f"est{lvl}.c2.w"], p[f"est{lvl}.c2.b"] = _conv_init(rng, h2, h1, 3, dtype)
        p[f"est{lvl}.head.w"] = np.zeros((2, h2, 3, 3), dtype)
        p[f"est{lvl}.head.b"] = np.zeros(2, dtype)
    cc = cfg.context_channels
    cin = h2 + 2
    for k, _ in enumerate(cfg.context_dilations, start=1):
        p[f"ctx.c{k}.w"], p[f"ctx.c{k}.b"] = _conv_init(rng, cc, cin, 3, dtype)
        p[f"ctx.bn{k}.scale"] = np.ones(cc, dtype)
        p[f"ctx.bn{k}.shift"] = np.zeros(cc, dtype)
        p[f"ctx.bn{k}.mean"] = np.zeros(cc, dtype)
        p[f"ctx.bn{k}.var"] = np.ones(cc, dtype)
        cin = cc
    p["ctx.head.w"] = np.zeros((2, cc, 3, 3), dtype)
    p["ctx.head.b"] = np.zeros(2, dtype)
    return p


def is_statistic(name: str) -> bool:
    return name.endswith(".mean") or name.endswith(".var")


def learnable(params: dict) -> list[str]:
    return [k for k in params if not is_statistic(k)]


def cast_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


def receptive_field(dilations, kernel=3) -> int:
    return 1 + (kernel - 1) * sum(dilations)


def cells_per_frame_to_mps(f, resolution, dt):
    return np.asarray(f) * (resolution / dt)


def displacement_to_velocity(d, resolution, dt):
    """Internal displacement (cells/frame, current -> previous) to metric velocity."""
    return -cells_per_frame_to_mps(d, resolution, dt)


def velocity_to_displacement(v, resolution, dt):
    return -np.asarray(v) * (dt / resolution)


# ---------------------------------------------------------------- tape-level blocks

class _Ctx:
    """Carries the tape, params and training flag through one forward pass."""

    def __init__(self, tape: Tape, params: dict, cfg: NetConfig, training: bool,
                 pvars: dict | None = None):
        self.tape = tape
        self.params = params
        self.cfg = cfg
        self.training = training
        self.pvars = pvars if pvars is not None else {k: Var(v, k) for k, v in params.items()}
        self.batch_stats = {}

    def p(self, name):
        return self.pvars[name]

    def conv(self, x, name, stride=1, dilation=1):
        k = self.params[name + ".w"].shape[-1]
        pad = dilation * (k - 1) // 2
        return self.tape.apply(Conv2d, x, self.p(name + ".w"), self.p(name + ".b"),
                               stride=stride, padding=pad, dilation=dilation)

    def leaky(self, x, slope=None):
        return self.tape.apply(LeakyReLU, x, slope=self.cfg.leaky_slope if slope is None else slope)

    def bn(self, x, name):
        out = self.tape.apply(BatchNorm, x, self.p(name + ".scale"), self.p(name + ".shift"),
                              self.params[name + ".mean"], self.params[name + ".var"],
                              training=self.training)
        if self.training:
            cache = self.tape.last_cache
            self.batch_stats[name] = (cache[7], cache[8], cache[6])
        return out


def pyramid_level(ctx: _Ctx, x, lvl):
    h = ctx.leaky(ctx.conv(x, f"pyr{lvl}.a", stride=2))
    return ctx.leaky(ctx.conv(h, f"pyr{lvl}.b"))


def pyramid_tape(ctx: _Ctx, img):
    H, W = img.shape[2:]
    L = ctx.cfg.levels
    if H % 2 ** L or W % 2 ** L:
        raise InvalidShape(f"grid {H}x{W} is not divisible by 2^{L}")
    feats = []
    x = img
    for lvl in range(1, L + 1):
        x = pyramid_level(ctx, x, lvl)
        feats.append(x)
    return feats


def level_flow_tape(ctx: _Ctx, feat1, feat2, up, lvl):
    """Warp feat2 by up, correlate with feat1, regress a residual added to up.

    Returns (flow, hidden features of the estimator).
    """
    warped = ctx.tape.apply(BilinearWarp, feat2, up)
    cv = ctx.tape.apply(Correlation, feat1, warped, max_disp=ctx.cfg.max_disp[lvl - 1])
    cv = ctx.leaky(cv)
    x = ctx.tape.apply(Concat, cv, feat1, up)
    h = ctx.leaky(ctx.conv(x, f"est{lvl}.c1"))
    h = ctx.leaky(ctx.conv(h, f"est{lvl}.c2"))
    res = ctx.conv(h, f"est{lvl}.head")
    return ctx.tape.apply(Add, up, res), h


def context_tape(ctx: _Ctx, flow, hidden):
    x = ctx.tape.apply(Concat, hidden, flow)
    for k, d in enumerate(ctx.cfg.context_dilations, start=1):
        x = ctx.conv(x, f"ctx.c{k}", dilation=d)
        x = ctx.bn(x, f"ctx.bn{k}")
        x = ctx.leaky(x, slope=0.0)
    res = ctx.conv(x, "ctx.head")
    return ctx.tape.apply(Add, flow, res)


def flow_tape(ctx: _Ctx, images):
    """images: Var (2B, C, H, W), previous sweeps first. Returns ({level: disp}, full-res disp)."""
    n2 = images.shape[0]
    B = n2 // 2
    feats = pyramid_tape(ctx, images)
    L = ctx.cfg.levels
    flows = {}
    up = None
    hidden = None
    for lvl in range(L, 0, -1):
        f = feats[lvl - 1]
        f_prev = ctx.tape.apply(Slice, f, start=0, stop=B)
        f_curr = ctx.tape.apply(Slice, f, start=B, stop=n2)
        if up is None:
            h, w = f.shape[2:]
            up = Var(np.zeros((B, 2, h, w), dtype=f.value.dtype))
        flow, hidden = level_flow_tape(ctx, f_curr, f_prev, up, lvl)
        if lvl == 1:
            flow = context_tape(ctx, flow, hidden)
        flows[lvl] = flow
        if lvl > 1:
            up = ctx.tape.apply(Upsample2x, flow, flow=True)
    full = ctx.tape.apply(Upsample2x, flows[1], flow=True)
    return flows, full


# ---------------------------------------------------------------- encoding

@dataclass
class EncodedPair:
    """Network-ready inputs for a batch of sweep pairs."""

    point_feats: np.ndarray | None   # (M, 9) for pillar mode
    pillar: np.ndarray | None
    slot: np.ndarray | None
    n_pillars: int
    image: np.ndarray                # (P,) image index per pillar
    rows: np.ndarray
    cols: np.ndarray
    n_images: int
    occupied: np.ndarray             # (B, H, W) occupied in either sweep
    dt: np.ndarray                   # (B,)


def encode_clouds(prevs, currs, cfg: NetConfig, seed=0, dtype=np.float32) -> EncodedPair:
    clouds = list(prevs) + list(currs)
    B = len(prevs)
    H, W = cfg.grid.shape
    feats, pill, slots, img, rows, cols = [], [], [], [], [], []
    offset = 0
    occ = np.zeros((2 * B, H, W), dtype=bool)
    for i, c in enumerate(clouds):
        vb = voxelize(c, cfg.grid, cfg.max_pillars, cfg.max_points, seed=seed + i)
        r, cc = vb.pillar_cells[:, 0], vb.pillar_cells[:, 1]
        occ[i, r, cc] = True
        rows.append(r)
        cols.append(cc)
        img.append(np.full(r.size, i))
        if cfg.input_mode == "pillars":
            f, p, s = vb.point_rows()
            feats.append(f)
            pill.append(p + offset)
            slots.append(s)
        offset += vb.n_pillars
    cat = lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    dts = np.array([cu.timestamp - pr.timestamp for pr, cu in zip(prevs, currs)])
    occupied = occ[:B] | occ[B:]
    if cfg.input_mode == "pillars":
        return EncodedPair(cat(feats, dtype).reshape(-1, N_DESCRIPTORS), cat(pill), cat(slots), offset,
                           cat(img), cat(rows), cat(cols), 2 * B, occupied, dts)
    return EncodedPair(None, None, None, offset, cat(img), cat(rows), cat(cols), 2 * B, occupied, dts)


def input_images(ctx: _Ctx, enc: EncodedPair):
    cfg = ctx.cfg
    H, W = cfg.grid.shape
    if cfg.input_mode == "ogm":
        dtype = ctx.params[f"pyr1.a.w"].dtype
        ones = np.ones((enc.n_pillars, 1), dtype=dtype)
        return ctx.tape.apply(ScatterCells, ones, image=enc.image, rows=enc.rows, cols=enc.cols,
                              n_images=enc.n_images, H=H, W=W)
    emb = pfn_embed(ctx.tape, enc.point_feats, enc.pillar, enc.slot, enc.n_pillars, cfg.max_points,
                    ctx.p("pfn.w"), ctx.p("pfn.b"), ctx.p("pfn.bn.scale"), ctx.p("pfn.bn.shift"),
                    ctx.params["pfn.bn.mean"], ctx.params["pfn.bn.var"], training=ctx.training)
    if ctx.training:
        cache = ctx.tape.nodes[-3].cache if ctx.tape.record else None
        if cache is not None:
            ctx.batch_stats["pfn.bn"] = (cache[7], cache[8], cache[6])
    return ctx.tape.apply(ScatterCells, emb, image=enc.image, rows=enc.rows, cols=enc.cols,
                          n_images=enc.n_images, H=H, W=W)


# ---------------------------------------------------------------- public numpy-level API

def pyramid_forward(img: PseudoImage | np.ndarray, params: dict, cfg: NetConfig) -> list[np.ndarray]:
    """Feature pyramid of one pseudo-image; level l has shape (C_l, H/2^l, W/2^l)."""
    data = img.data if isinstance(img, PseudoImage) else np.asarray(img)
    ctx = _Ctx(Tape(record=False), params, cfg, training=False)
    feats = pyramid_tape(ctx, Var(data[None].astype(params["pyr1.a.w"].dtype)))
    return [f.value[0] for f in feats]


def level_flow(feat1, feat2, up_flow, params: dict, cfg: NetConfig, lvl: int):
    """Single-level flow for (B, C, h, w) features; returns (B, 2, h, w) cells/frame."""
    ctx = _Ctx(Tape(record=False), params, cfg, training=False)
    flow, _ = level_flow_tape(ctx, Var(feat1), Var(feat2), Var(up_flow), lvl)
    return flow.value


def cost_volume(feat1, feat2, up_flow, max_disp):
    """The (leaky-free) correlation of feat1 with feat2 warped by up_flow."""
    from .diff.ops import bilinear_warp, correlation
    return correlation(feat1, bilinear_warp(feat2, up_flow), max_disp)


def context_refine(flow, hidden, params: dict, cfg: NetConfig):
    if flow.shape[0] != hidden.shape[0] or flow.shape[2:] != hidden.shape[2:]:
        raise InvalidShape(f"context: flow {flow.shape} vs features {hidden.shape}")
    ctx = _Ctx(Tape(record=False), params, cfg, training=False)
    return context_tape(ctx, Var(flow), Var(hidden)).value


def downsample_gt(disp, valid, lvl):
    """Valid-cell average pooling over 2^l blocks; values are rescaled to level cell units."""
    B, _, H, W = disp.shape
    k = 2 ** lvl
    h, w = H // k, W // k
    v = valid.reshape(B, h, k, w, k).astype(np.float64)
    s = (disp * valid[:, None]).reshape(B, 2, h, k, w, k).sum(axis=(3, 5))
    n = v.sum(axis=(2, 4))
    out = np.where(n[:, None] > 0, s / np.maximum(n[:, None], 1), 0.0) / k
    return out, n > 0


def gt_targets(gt_flows: list[FlowGrid], cfg: NetConfig, dtype=np.float32, occupied=None):
    """Per-level displacement targets and masks for a batch of ground-truth FlowGrids.

    Level 0 is the full grid. ``occupied`` (B, H, W) further restricts the mask
    before pooling.
    """
    res = cfg.grid.resolution
    disp = np.stack([velocity_to_displacement(g.values, res, g.dt).transpose(2, 0, 1) for g in gt_flows])
    valid = np.stack([g.valid for g in gt_flows])
    if occupied is not None:
        valid = valid & occupied
    out = {}
    for lvl in range(0, cfg.levels + 1):
        t, m = downsample_gt(disp, valid, lvl)
        out[lvl] = (t.astype(dtype), m)
    return out


def multiscale_loss(pred: dict, targets: dict, weights: LossWeights, levels: int | None = None):
    """sum_l alpha_l * sum over valid cells of ||pred_l - gt_l||_2, on plain arrays."""
    levels = levels or max(pred)
    total = 0.0
    for lvl, p in pred.items():
        t, m = targets[lvl]
        if np.shape(p) != np.shape(t):
            raise InvalidShape(f"level {lvl}: prediction {np.shape(p)} vs target {np.shape(t)}")
        a = weights.alpha(lvl, levels)
        total += float(FlowL2Loss.forward(np.asarray(p, np.float64), np.asarray(t, np.float64), m, a)[0])
    return total


def loss_tape(ctx: _Ctx, flows: dict, targets: dict, weights: LossWeights):
    total = None
    for lvl in sorted(flows):
        t, m = targets[lvl]
        a = weights.alpha(lvl, ctx.cfg.levels)
        term = ctx.tape.apply(FlowL2Loss, flows[lvl], t.astype(flows[lvl].value.dtype), m, weight=a)
        total = term if total is None else ctx.tape.apply(Add, total, term)
    return total


def forward_batch(params: dict, cfg: NetConfig, enc: EncodedPair, training=False, tape=None):
    tape = tape or Tape(record=training)
    ctx = _Ctx(tape, params, cfg, training)
    imgs = input_images(ctx, enc)
    flows, full = flow_tape(ctx, imgs)
    return ctx, flows, full


def loss_and_grads(params: dict, cfg: NetConfig, enc: EncodedPair, targets: dict,
                   weights: LossWeights, training=True):
    """Loss value, gradient dict over learnable params, and batch-norm batch statistics."""
    tape = Tape(record=True)
    ctx, flows, full = forward_batch(params, cfg, enc, training=training, tape=tape)
    flows = {lvl: f for lvl, f in flows.items() if lvl >= weights.l0}
    if weights.l0 == 0:
        flows[0] = full
    loss = loss_tape(ctx, flows, targets, weights)
    tape.backward(loss)
    grads = {}
    for k in learnable(params):
        g = ctx.pvars[k].grad
        grads[k] = np.zeros_like(params[k]) if g is None else g.astype(params[k].dtype)
    return float(loss.value), grads, ctx.batch_stats


def _prepare(samples, cfg: NetConfig, seed=0, allow_empty=False):
    prevs, currs = [], []
    for i, s in enumerate(samples):
        pr, cu = preprocess_pair(s.sweep_prev, s.sweep_curr, s.ego_pose, cfg.grid,
                                 ground_removal=cfg.ground_removal, align_first=cfg.align_first,
                                 seed=seed + 7919 * i)
        if not allow_empty and (len(pr) == 0 or len(cu) == 0):
            raise EmptySweep("a sweep has no points inside the region of interest")
        prevs.append(pr)
        currs.append(cu)
    return prevs, currs


def forward(sweep_prev: PointCloud, sweep_curr: PointCloud, pose_prev_to_curr: RigidTransform2_5D,
            params: dict, cfg: NetConfig, seed: int = 0) -> FlowGrid:
    """Metric BeV flow (m/s) on the current sweep's grid."""
    pr, cu = preprocess_pair(sweep_prev, sweep_curr, pose_prev_to_curr, cfg.grid,
                             ground_removal=cfg.ground_removal, align_first=cfg.align_first, seed=seed)
    if len(pr) == 0 or len(cu) == 0:
        raise EmptySweep("a sweep has no points inside the region of interest")
    return _infer(params, cfg, [pr], [cu], seed)[0]


def _infer(params, cfg, prevs, currs, seed=0) -> list[FlowGrid]:
    enc = encode_clouds(prevs, currs, cfg, seed=seed, dtype=params["pyr1.a.w"].dtype)
    _, _, full = forward_batch(params, cfg, enc, training=False)
    out = []
    for b in range(len(prevs)):
        dt = float(enc.dt[b])
        if not dt > 0:
            raise ValueError("sweep timestamps must increase")
        v = displacement_to_velocity(full.value[b].astype(np.float64), cfg.grid.resolution, dt)
        out.append(FlowGrid(v.transpose(1, 2, 0), enc.occupied[b], dt=dt, grid=cfg.grid))
    return out


def infer_samples(samples, params: dict, cfg: NetConfig, batch_size=8, seed=0) -> list[FlowGrid]:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        prevs, currs = _prepare(chunk, cfg, seed=seed + i, allow_empty=True)
        out.extend(_infer(params, cfg, prevs, currs, seed=seed + i))
    return out


def learning_rate(step: int, total: int, base=1e-4, decay=0.9, fraction=0.1) -> float:
    """Base rate times decay for every completed ``fraction`` of the total iterations."""
    if total <= 0:
        return base
    k = int(math.floor(step / (fraction * total) + 1e-9))
    return base * decay ** k


def update_running_stats(params, batch_stats, momentum):
    for name, (mean, var, m) in batch_stats.items():
        unbiased = var * (m / max(m - 1, 1))
        rm, rv = params[name + ".mean"], params[name + ".var"]
        rm *= 1 - momentum
        rm += (momentum * mean).astype(rm.dtype)
        rv *= 1 - momentum
        rv += (momentum * unbiased).astype(rv.dtype)


def train_step(params, optimizer: AdamState, cfg: NetConfig, tcfg: TrainConfig, weights: LossWeights,
               samples, total_iters: int, seed=0, prepared=False):
    """One Adam step on a batch. ``prepared`` samples are already aligned and ground-stripped."""
    if prepared:
        prevs = [crop_roi(s.sweep_prev, cfg.grid) for s in samples]
        currs = [crop_roi(s.sweep_curr, cfg.grid) for s in samples]
    else:
        prevs, currs = _prepare(samples, cfg, seed=seed, allow_empty=True)
    enc = encode_clouds(prevs, currs, cfg, seed=seed, dtype=params["pyr1.a.w"].dtype)
    occ = enc.occupied if tcfg.loss_mask == "occupied" else None
    targets = gt_targets([s.gt for s in samples], cfg, dtype=params["pyr1.a.w"].dtype, occupied=occ)
    loss, grads, stats = loss_and_grads(params, cfg, enc, targets, weights, training=True)
    lr = learning_rate(optimizer.step, total_iters, tcfg.base_lr, tcfg.lr_decay, tcfg.decay_fraction)
    adam_step(params, grads, optimizer, lr=lr)
    update_running_stats(params, stats, cfg.bn_momentum)
    return loss, lr


def prepare_samples(samples, cfg: NetConfig, seed: int = 0) -> list:
    """Align and ground-strip every sample once; the result trains with ``prepared=True``.

    The alignment leaves the previous sweep in the current frame, so the
    returned samples carry an identity ego pose.
    """
    from .datagen import FramePairSample
    out = []
    for i, s in enumerate(samples):
        pr, cu = preprocess_pair(s.sweep_prev, s.sweep_curr, s.ego_pose, cfg.grid,
                                 ground_removal=cfg.ground_removal, align_first=cfg.align_first,
                                 seed=seed + 7919 * i)
        out.append(FramePairSample(pr, cu, RigidTransform2_5D(), s.ann_prev, s.ann_curr, s.gt))
    return out


def train_epoch(dataset, params: dict, optimizer: AdamState, cfg: NetConfig, seed: int = 0,
                tcfg: TrainConfig | None = None, weights: LossWeights | None = None,
                val_set=None, total_iters: int | None = None, epoch: int = 0,
                prepared: bool = False) -> dict:
    """One shuffled pass with augmentation, Adam and the stepwise-decayed learning rate."""
    from .datagen import augment

    if not len(dataset):
        raise ValueError("empty dataset")
    tcfg = tcfg or TrainConfig()
    weights = weights or LossWeights()
    n = len(dataset)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    if total_iters is None:
        total_iters = tcfg.total_iters or tcfg.epochs * steps_per_epoch
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    losses = []
    lr = None
    for k in range(steps_per_epoch):
        idx = order[k * tcfg.batch_size:(k + 1) * tcfg.batch_size]
        batch = []
        for i in idx:
            s = dataset[int(i)]
            if tcfg.augment:
                s = augment(s, seed=int(rng.integers(2 ** 31)), rotation_range=tcfg.rotation_range,
                            scale_range=tcfg.scale_range)
            batch.append(s)
        loss, lr = train_step(params, optimizer, cfg, tcfg, weights, batch, total_iters,
                              seed=int(rng.integers(2 ** 31)), prepared=prepared)
        losses.append(loss)
    metrics = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr, "step": optimizer.step,
               "losses": losses}
    if val_set:
        metrics.update(evaluate(val_set, params, cfg, prepared=prepared))
    return metrics


def evaluate(samples, params: dict, cfg: NetConfig, prepared: bool = False, seed: int = 0) -> dict:
    """Pooled flow metrics of the network over a list of samples."""
    from .metrics import dynamic_mask_from_gt
    if prepared:
        preds = []
        for i in range(0, len(samples), 8):
            chunk = samples[i:i + 8]
            preds.extend(_infer(params, cfg, [crop_roi(s.sweep_prev, cfg.grid) for s in chunk],
                                [crop_roi(s.sweep_curr, cfg.grid) for s in chunk], seed=seed + i))
    else:
        preds = infer_samples(list(samples), params, cfg, seed=seed)
    return aggregate_flow_metrics(preds, [s.gt for s in samples], [dynamic_mask_from_gt(s.gt) for s in samples])


def train(dataset, cfg: NetConfig, tcfg: TrainConfig | None = None, weights: LossWeights | None = None,
          seed: int = 0, val_set=None, params: dict | None = None, log=None):
    """Full training run. Returns (params, per-epoch metrics); ``log`` is called with each epoch's metrics."""
    tcfg = tcfg or TrainConfig()
    params = init_params(cfg, seed) if params is None else params
    opt = AdamState(lr=tcfg.base_lr)
    data = prepare_samples(dataset, cfg, seed=seed)
    val = prepare_samples(val_set, cfg, seed=seed + 1) if val_set else None
    total = tcfg.total_iters or tcfg.epochs * math.ceil(len(data) / tcfg.batch_size)
    history = []
    for e in range(tcfg.epochs):
        last = e == tcfg.epochs - 1
        m = train_epoch(data, params, opt, cfg, seed=seed, tcfg=tcfg, weights=weights,
                        val_set=val if last else None, total_iters=total, epoch=e, prepared=True)
        history.append(m)
        if log is not None:
            log(m)
    return params, history


def aggregate_flow_metrics(preds, gts, dyn_masks) -> dict:
    """Pool squared errors over a whole split, then take the root (per-category RMSE)."""
    from .metrics import pooled_flow_metrics
    return pooled_flow_metrics(preds, gts, dyn_masks)


def checkpoint_ops(cfg: NetConfig) -> list[str]:
    import json
    lines = ["config " + json.dumps(cfg.to_dict(), sort_keys=True)]
    if cfg.input_mode == "pillars":
        lines.append(f"pfn dense {N_DESCRIPTORS}->{cfg.pfn_channels} batch_norm relu segment_max scatter")
    for lvl in range(1, cfg.levels + 1):
        lines.append(f"pyr{lvl} conv2d s2 leaky_relu conv2d leaky_relu -> {cfg.channels[lvl - 1]}")
    for lvl in range(cfg.levels, 0, -1):
        lines.append(f"est{lvl} bilinear_warp correlation(md={cfg.max_disp[lvl - 1]}) concat "
                     f"conv2d conv2d conv2d add")
    lines.append("ctx " + " ".join(f"conv2d(d={d}) batch_norm relu" for d in cfg.context_dilations)
                 + " conv2d add upsample2x")
    return lines


def save_checkpoint(path, params: dict, cfg: NetConfig):
    from .diff.checkpoint import save_pfw
    save_pfw(path, params, checkpoint_ops(cfg))


def load_checkpoint(path):
    import json
    from .diff.checkpoint import load_pfw
    params, ops = load_pfw(path)
    cfg_lines = [o for o in ops if o.startswith("config ")]
    if not cfg_lines:
        raise ValueError("checkpoint carries no network config")
    cfg = NetConfig.from_dict(json.loads(cfg_lines[0][len("config "):]))
    return params, cfg
