"""Differentiable operators with hand-written forward and backward passes.

Every operator is a class with two static methods::

    out, cache = Op.forward(*inputs, **attrs)
    grads = Op.backward(dout, cache)      # one entry per input (None if not differentiable)

Arrays are numpy; the dtype of the inputs is preserved (float64 for gradient
checks, float32 for training).
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidShape


def _conv_out(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


class Conv2d:
    name = "conv2d"

    @staticmethod
    def forward(x, w, b, stride=1, padding=0, dilation=1):
        if x.ndim != 4 or w.ndim != 4:
            raise InvalidShape("conv2d expects (B,C,H,W) input and (O,C,kh,kw) weight")
        B, C, H, W = x.shape
        O, Cw, kh, kw = w.shape
        if Cw != C:
            raise InvalidShape(f"conv2d channel mismatch: input {C}, weight {Cw}")
        if b is not None and b.shape != (O,):
            raise InvalidShape("conv2d bias must have one entry per output channel")
        if stride < 1 or dilation < 1:
            raise InvalidShape("stride and dilation must be >= 1")
        Ho = _conv_out(H, kh, stride, padding, dilation)
        Wo = _conv_out(W, kw, stride, padding, dilation)
        if Ho < 1 or Wo < 1:
            raise InvalidShape("conv2d output would be empty")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
        ye, xe = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i * dilation:i * dilation + ye:stride, j * dilation:j * dilation + xe:stride]
                cols[:, i, j] = win.transpose(1, 0, 2, 3)
        cols2 = cols.reshape(C * kh * kw, B * Ho * Wo)
        out = (w.reshape(O, -1) @ cols2).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
        if b is not None:
            out = out + b.reshape(1, O, 1, 1)
        out = np.ascontiguousarray(out)
        cache = (x.shape, w, cols2, b is not None, stride, padding, dilation, (Ho, Wo))
        return out, cache

    @staticmethod
    def backward(dout, cache):
        xshape, w, cols2, has_bias, stride, padding, dilation, (Ho, Wo) = cache
        B, C, H, W = xshape
        O, _, kh, kw = w.shape
        d2 = dout.transpose(1, 0, 2, 3).reshape(O, -1)
        dw = (d2 @ cols2.T).reshape(w.shape)
        db = dout.sum(axis=(0, 2, 3)) if has_bias else None
        dcols = (w.reshape(O, -1).T @ d2).reshape(C, kh, kw, B, Ho, Wo)
        dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
        ye, xe = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * dilation:i * dilation + ye:stride, j * dilation:j * dilation + xe:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return np.ascontiguousarray(dx), dw, db


class LeakyReLU:
    name = "leaky_relu"

    @staticmethod
    def forward(x, slope=0.1):
        if not 0.0 <= slope < 1.0:
            raise ValueError("slope must lie in [0, 1)")
        pos = x > 0
        return np.where(pos, x, x * x.dtype.type(slope)), (pos, slope)

    @staticmethod
    def backward(dout, cache):
        pos, slope = cache
        return (np.where(pos, dout, dout * dout.dtype.type(slope)),)


class BatchNorm:
    """Normalizes over every axis except axis 1 (channels).

    ``training=True`` uses batch statistics (biased variance); the cache then
    carries the batch mean and variance so the caller can update running
    statistics. Otherwise the running statistics are used.
    """

    name = "batch_norm"

    @staticmethod
    def forward(x, gamma, beta, running_mean, running_var, training=False, eps=1e-5):
        C = x.shape[1]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise InvalidShape("batch_norm scale/shift must have one entry per channel")
        axes = tuple(i for i in range(x.ndim) if i != 1)
        bshape = [1] * x.ndim
        bshape[1] = C
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = running_mean.astype(x.dtype)
            var = running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
        m = x.size // C
        return out, (xhat, inv_std, gamma, axes, bshape, training, m, mean, var)

    @staticmethod
    def backward(dout, cache):
        xhat, inv_std, gamma, axes, bshape, training, m, _, _ = cache
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        dxhat = dout * gamma.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta, None, None


class Dense:
    """Row-wise affine map: (M, K) @ (K, C) + (C,)."""

    name = "dense"

    @staticmethod
    def forward(x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise InvalidShape(f"dense: cannot apply {w.shape} weight to {x.shape} input")
        return x @ w + b, (x, w)

    @staticmethod
    def backward(dout, cache):
        x, w = cache
        return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def _bilinear_corners(flow, H, W):
    B = flow.shape[0]
    gy, gx = np.meshgrid(np.arange(H, dtype=flow.dtype), np.arange(W, dtype=flow.dtype), indexing="ij")
    sx = gx[None] + flow[:, 0]
    sy = gy[None] + flow[:, 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            idx = np.where(ok, yy * W + xx, 0)
            corners.append((idx.reshape(B, -1), ok.reshape(B, -1), dy, dx))
    return corners, fx.reshape(B, -1), fy.reshape(B, -1)


class BilinearWarp:
    """out[b,c,y,x] = bilinear sample of feat at (x + u, y + v); zero outside the grid."""

    name = "bilinear_warp"

    @staticmethod
    def forward(feat, flow):
        if feat.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2 \
                or flow.shape[0] != feat.shape[0] or flow.shape[2:] != feat.shape[2:]:
            raise InvalidShape(f"warp: features {feat.shape} vs flow {flow.shape}")
        B, C, H, W = feat.shape
        corners, fx, fy = _bilinear_corners(flow, H, W)
        fr = feat.reshape(B, C, H * W)
        out = np.zeros((B, C, H * W), dtype=feat.dtype)
        vals = []
        for idx, ok, dy, dx in corners:
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx) * ok
            v = np.take_along_axis(fr, np.broadcast_to(idx[:, None, :], (B, C, H * W)), axis=2)
            v = v * ok[:, None, :]
            vals.append(v)
            out += wgt[:, None, :] * v
        return out.reshape(B, C, H, W), (feat.shape, corners, fx, fy, vals)

    @staticmethod
    def backward(dout, cache):
        (B, C, H, W), corners, fx, fy, vals = cache
        d = dout.reshape(B, C, H * W)
        dfeat = np.zeros(B * C * H * W, dtype=dout.dtype)
        base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
        v00, v01, v10, v11 = vals
        for (idx, ok, dy, dx) in corners:
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx) * ok
            flat = (base + idx[:, None, :]).ravel()
            dfeat += np.bincount(flat, weights=(d * wgt[:, None, :]).ravel(), minlength=dfeat.size)
        # d out / d sx and d out / d sy for the piecewise-bilinear interpolant
        dsx = (1 - fy)[:, None, :] * (v01 - v00) + fy[:, None, :] * (v11 - v10)
        dsy = (1 - fx)[:, None, :] * (v10 - v00) + fx[:, None, :] * (v11 - v01)
        dflow = np.stack([(d * dsx).sum(axis=1), (d * dsy).sum(axis=1)], axis=1)
        return dfeat.reshape(B, C, H, W), dflow.reshape(B, 2, H, W)


class Correlation:
    """Cost volume: channel (dy+m)*(2m+1) + (dx+m) holds mean_c f1[c,y,x] * f2[c,y+dy,x+dx]."""

    name = "correlation"

    @staticmethod
    def forward(f1, f2, max_disp=4):
        if f1.shape != f2.shape or f1.ndim != 4:
            raise InvalidShape(f"correlation inputs differ: {f1.shape} vs {f2.shape}")
        B, C, H, W = f1.shape
        m = int(max_disp)
        D = 2 * m + 1
        f2p = np.pad(f2, ((0, 0), (0, 0), (m, m), (m, m)))
        out = np.empty((B, D * D, H, W), dtype=f1.dtype)
        inv_c = f1.dtype.type(1.0 / C)
        for dy in range(-m, m + 1):
            for dx in range(-m, m + 1):
                k = (dy + m) * D + (dx + m)
                win = f2p[:, :, m + dy:m + dy + H, m + dx:m + dx + W]
                out[:, k] = np.einsum("bchw,bchw->bhw", f1, win) * inv_c
        return out, (f1, f2p, m)

    @staticmethod
    def backward(dout, cache):
        f1, f2p, m = cache
        B, C, H, W = f1.shape
        D = 2 * m + 1
        inv_c = f1.dtype.type(1.0 / C)
        df1 = np.zeros_like(f1)
        df2p = np.zeros_like(f2p)
        for dy in range(-m, m + 1):
            for dx in range(-m, m + 1):
                k = (dy + m) * D + (dx + m)
                g = dout[:, k][:, None] * inv_c
                df1 += g * f2p[:, :, m + dy:m + dy + H, m + dx:m + dx + W]
                df2p[:, :, m + dy:m + dy + H, m + dx:m + dx + W] += g * f1
        return df1, df2p[:, :, m:m + H, m:m + W]


def upsample_matrix(n, dtype=np.float64):
    """(2n, n) linear interpolation matrix, half-pixel aligned, edge-clamped."""
    out = 2 * n
    src = (np.arange(out, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    U = np.zeros((out, n))
    U[np.arange(out), i0] += 1 - f
    U[np.arange(out), i1] += f
    return U.astype(dtype)


class Upsample2x:
    """Bilinear 2x upsampling; ``flow=True`` also doubles the values (cell units halve)."""

    name = "upsample2x"

    @staticmethod
    def forward(x, flow=False):
        B, C, H, W = x.shape
        Uy = upsample_matrix(H, x.dtype)
        Ux = upsample_matrix(W, x.dtype)
        out = np.einsum("yh,bchw,xw->bcyx", Uy, x, Ux, optimize=True)
        if flow:
            out = out * x.dtype.type(2.0)
        return out, (Uy, Ux, flow)

    @staticmethod
    def backward(dout, cache):
        Uy, Ux, flow = cache
        dx = np.einsum("yh,bcyx,xw->bchw", Uy, dout, Ux, optimize=True)
        if flow:
            dx = dx * dout.dtype.type(2.0)
        return (dx,)


class Concat:
    name = "concat"

    @staticmethod
    def forward(*xs, axis=1):
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), (sizes, axis)

    @staticmethod
    def backward(dout, cache):
        sizes, axis = cache
        return tuple(np.split(dout, np.cumsum(sizes)[:-1], axis=axis))


class Stack:
    name = "stack"

    @staticmethod
    def forward(*xs):
        return np.stack(xs, axis=0), len(xs)

    @staticmethod
    def backward(dout, cache):
        return tuple(dout[i] for i in range(cache))


class Slice:
    """Leading-axis slice x[start:stop]."""

    name = "slice"

    @staticmethod
    def forward(x, start=0, stop=None):
        return x[start:stop], (x.shape, start, stop)

    @staticmethod
    def backward(dout, cache):
        shape, start, stop = cache
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[start:stop] = dout
        return (dx,)


class Add:
    name = "add"

    @staticmethod
    def forward(a, b):
        if np.shape(a) != np.shape(b):
            raise InvalidShape(f"add: {np.shape(a)} vs {np.shape(b)}")
        return a + b, None

    @staticmethod
    def backward(dout, cache):
        return dout, dout


class Scale:
    name = "scale"

    @staticmethod
    def forward(x, factor=1.0):
        return x * factor, factor

    @staticmethod
    def backward(dout, cache):
        return (dout * cache,)


class SegmentMax:
    """Channel-wise max over the points of each pillar.

    x is (M, C) point features, ``pillar`` (M,) the pillar id of each row and
    ``slot`` (M,) its position inside the pillar. Rows of a pillar need not be
    contiguous. Padding never enters the max because only real points are rows.
    """

    name = "segment_max"

    @staticmethod
    def forward(x, pillar=None, slot=None, n_pillars=0, n_slots=1):
        M, C = x.shape
        dense = np.full((n_pillars, n_slots, C), -np.inf, dtype=x.dtype)
        dense[pillar, slot] = x
        arg = dense.argmax(axis=1)
        out = np.take_along_axis(dense, arg[:, None, :], axis=1)[:, 0, :]
        if n_pillars and not np.all(np.isfinite(out)):
            raise InvalidShape("segment_max: a pillar has no points")
        return out, (arg, pillar, slot)

    @staticmethod
    def backward(dout, cache):
        arg, pillar, slot = cache
        hit = arg[pillar] == slot[:, None]
        return (np.where(hit, dout[pillar], 0),)


class ScatterCells:
    """(P, C) pillar embeddings -> (N_img, C, H, W) images; untouched cells are zero."""

    name = "scatter"

    @staticmethod
    def forward(emb, image=None, rows=None, cols=None, n_images=1, H=1, W=1):
        P, C = emb.shape
        out = np.zeros((n_images, C, H, W), dtype=emb.dtype)
        out[image, :, rows, cols] = emb
        return out, (image, rows, cols)

    @staticmethod
    def backward(dout, cache):
        image, rows, cols = cache
        return (dout[image, :, rows, cols],)


class FlowL2Loss:
    """weight * sum over masked cells of ||pred - gt||_2 ; pred/gt (B,2,h,w), mask (B,h,w)."""

    name = "flow_l2"

    @staticmethod
    def forward(pred, gt, mask=None, weight=1.0):
        if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 2:
            raise InvalidShape(f"loss: prediction {pred.shape} vs target {gt.shape}")
        if mask is None:
            mask = np.ones((pred.shape[0],) + pred.shape[2:], dtype=bool)
        if mask.shape != (pred.shape[0],) + pred.shape[2:]:
            raise InvalidShape("loss mask shape mismatch")
        diff = pred - gt
        norm = np.sqrt((diff * diff).sum(axis=1))
        val = weight * np.where(mask, norm, 0).sum()
        return np.asarray(val, dtype=pred.dtype), (diff, norm, mask, weight)

    @staticmethod
    def backward(dout, cache):
        diff, norm, mask, weight = cache
        safe = np.where(norm > 0, norm, 1)
        g = np.where((mask & (norm > 0))[:, None], diff / safe[:, None], 0)
        return dout * weight * g, None


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    return Conv2d.forward(x, w, b, stride=stride, padding=padding, dilation=dilation)[0]


def leaky_relu(x, slope=0.1):
    return LeakyReLU.forward(x, slope)[0]


def batch_norm(x, gamma, beta, running_mean, running_var, training=False, eps=1e-5):
    return BatchNorm.forward(x, gamma, beta, running_mean, running_var, training, eps)[0]


def bilinear_warp(feat, flow):
    return BilinearWarp.forward(feat, flow)[0]


def correlation(f1, f2, max_disp=4):
    return Correlation.forward(f1, f2, max_disp)[0]


def upsample2x(x, flow=False):
    return Upsample2x.forward(x, flow)[0]
