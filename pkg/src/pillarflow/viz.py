"""Flow color wheel and binary PPM I/O."""
from __future__ import annotations

import re

import numpy as np

from .errors import FormatError
from .grid import FlowGrid


def hsv_to_rgb(hsv):
    """Vectorized HSV -> RGB, all channels in [0, 1]."""
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([np.stack(c, axis=-1) for c in
                      [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]])
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def flow_colorize(flow: FlowGrid, max_speed: float = 10.0) -> np.ndarray:
    """(H, W, 3) uint8: hue from direction, saturation min(speed / max_speed, 1), value 1.

    Invalid cells are black. Row 0 is the grid's first row (y_min).
    """
    if not max_speed > 0:
        raise ValueError("max_speed must be positive")
    u, v = flow.values[..., 0], flow.values[..., 1]
    hue = (np.arctan2(v, u) % (2 * np.pi)) / (2 * np.pi)
    sat = np.minimum(np.hypot(u, v) / max_speed, 1.0)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(hue)], axis=-1))
    img = np.round(rgb * 255).astype(np.uint8)
    img[~flow.valid] = 0
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if m is None:
        raise FormatError("not a binary PPM", section="header", offset=0)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", section="header", offset=0)
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise FormatError(f"expected {w * h * 3} pixel bytes, got {len(body)}", section="pixels", offset=m.end())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img):
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())
