"""On-disk formats: PCBIN v1 / CSV sweeps, FLOW v1 grids, annotation and pose tables, manifests."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import FlowGrid, GridSpec
from .lidar import PointCloud, RigidTransform2_5D

_F32 = np.dtype("<f4")


def _split_header(data: bytes, section: str):
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", section=section, offset=len(data))
    try:
        header = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII", section=section, offset=exc.start) from None
    return header, nl + 1


def encode_pcbin(cloud: PointCloud) -> bytes:
    header = f"PCBIN 1 {len(cloud)} {cloud.timestamp!r} {cloud.frame_id}\n".encode("ascii")
    return header + cloud.points.astype(_F32).tobytes()


def decode_pcbin(data: bytes) -> PointCloud:
    header, start = _split_header(data, "header")
    if len(header) != 5 or header[0] != "PCBIN":
        raise FormatError("not a PCBIN header", section="header", offset=0)
    if header[1] != "1":
        raise FormatError(f"unsupported PCBIN version {header[1]}", section="header", offset=6)
    try:
        n = int(header[2])
        timestamp = float(header[3])
    except ValueError:
        raise FormatError("bad point count or timestamp", section="header", offset=0) from None
    need = n * 16
    body = data[start:]
    if len(body) < need:
        raise FormatError(f"truncated: expected {need} bytes of points, found {len(body)}",
                          section="points", offset=start + len(body))
    if len(body) > need:
        raise FormatError("trailing bytes after point data", section="points", offset=start + need)
    pts = np.frombuffer(body, dtype=_F32).reshape(n, 4).astype(np.float64)
    return PointCloud(pts, timestamp, header[4])


def write_pcbin(path, cloud: PointCloud):
    Path(path).write_bytes(encode_pcbin(cloud))


def read_pcbin(path) -> PointCloud:
    return decode_pcbin(Path(path).read_bytes())


def read_cloud_csv(path, timestamp=0.0, frame_id="lidar") -> PointCloud:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        rows = np.zeros((0, 4))
    if rows.shape[1] != 4:
        raise FormatError("CSV sweep must have columns x,y,z,r", section="points", offset=0)
    return PointCloud(rows, timestamp, frame_id)


def read_cloud(path, **kw) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_cloud_csv(path, **kw)
    return read_pcbin(path)


def encode_flow(flow: FlowGrid) -> bytes:
    H, W = flow.shape
    header = f"FLOW 1 {H} {W} {flow.dt!r}\n".encode("ascii")
    return (header + flow.values.astype(_F32).tobytes()
            + flow.valid.astype(np.uint8).tobytes())


def decode_flow(data: bytes, grid: GridSpec | None = None) -> FlowGrid:
    header, start = _split_header(data, "header")
    if len(header) != 5 or header[0] != "FLOW":
        raise FormatError("not a FLOW header", section="header", offset=0)
    if header[1] != "1":
        raise FormatError(f"unsupported FLOW version {header[1]}", section="header", offset=5)
    try:
        H, W, dt = int(header[2]), int(header[3]), float(header[4])
    except ValueError:
        raise FormatError("bad grid size or dt", section="header", offset=0) from None
    n_vec = H * W * 8
    body = data[start:]
    if len(body) < n_vec:
        raise FormatError("truncated flow vectors", section="vectors", offset=start + len(body))
    if len(body) < n_vec + H * W:
        raise FormatError("truncated validity mask", section="validity", offset=start + len(body))
    if len(body) > n_vec + H * W:
        raise FormatError("trailing bytes after validity mask", section="validity",
                          offset=start + n_vec + H * W)
    values = np.frombuffer(body[:n_vec], dtype=_F32).reshape(H, W, 2).astype(np.float64)
    valid = np.frombuffer(body[n_vec:], dtype=np.uint8).reshape(H, W)
    if np.any(valid > 1):
        bad = int(np.argmax(valid.ravel() > 1))
        raise FormatError("validity bytes must be 0 or 1", section="validity",
                          offset=start + n_vec + bad)
    return FlowGrid(values, valid.astype(bool), dt=dt, grid=grid)


def write_flow(path, flow: FlowGrid):
    Path(path).write_bytes(encode_flow(flow))


def read_flow(path, grid: GridSpec | None = None) -> FlowGrid:
    return decode_flow(Path(path).read_bytes(), grid)


def write_pose_csv(path, pose: RigidTransform2_5D):
    tx, ty, tz = pose.translation
    Path(path).write_text(f"yaw,tx,ty,tz\n{pose.yaw!r},{tx!r},{ty!r},{tz!r}\n")


def read_pose_csv(path) -> RigidTransform2_5D:
    text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) != 1:
        raise FormatError("ego.csv must hold exactly one pose row", section="ego", offset=0)
    try:
        r = rows[0]
        return RigidTransform2_5D(float(r["yaw"]), (float(r["tx"]), float(r["ty"]), float(r["tz"])))
    except (KeyError, TypeError, ValueError):
        raise FormatError("malformed pose row", section="ego", offset=text.find("\n") + 1) from None


def write_manifest(path, entries):
    """entries: iterable of (split, sample_dir). Paths are stored relative to the manifest."""
    path = Path(path)
    lines = ["split,path"]
    for split, d in entries:
        d = Path(d)
        try:
            d = d.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        lines.append(f"{split},{d.as_posix()}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path, split: str | None = None) -> list[Path]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            if split is None or row["split"] == split:
                p = Path(row["path"])
                out.append(p if p.is_absolute() else path.parent / p)
    return out
