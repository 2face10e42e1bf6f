"""PFW v1 parameter checkpoints.

Layout::

    PFW 1\n
    ops <k>\n
    <k op-description lines>\n
    params <n>\n
    then per entry: "<name> <ndim> <d1> ... <dn>\n" followed by prod(d) little-endian float32
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import FormatError

_F32 = np.dtype("<f4")


def encode_pfw(params: dict, ops: list[str] = ()) -> bytes:
    chunks = [b"PFW 1\n", f"ops {len(ops)}\n".encode()]
    for line in ops:
        if "\n" in line:
            raise ValueError("op description lines cannot contain newlines")
        chunks.append(line.encode("utf-8") + b"\n")
    chunks.append(f"params {len(params)}\n".encode())
    for name in params:
        arr = np.asarray(params[name])
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"bad parameter name {name!r}")
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"{name} {arr.ndim}{' ' + dims if dims else ''}\n".encode())
        chunks.append(arr.astype(_F32).tobytes())
    return b"".join(chunks)


def decode_pfw(data: bytes):
    pos = 0

    def line(section):
        nonlocal pos
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError("unexpected end of file", section=section, offset=len(data))
        text = data[pos:nl].decode("utf-8", errors="replace")
        start, pos = pos, nl + 1
        return text, start

    head, _ = line("header")
    if head != "PFW 1":
        raise FormatError("not a PFW v1 file", section="header", offset=0)
    text, off = line("ops")
    parts = text.split()
    if len(parts) != 2 or parts[0] != "ops" or not parts[1].isdigit():
        raise FormatError("bad ops count", section="ops", offset=off)
    ops = [line("ops")[0] for _ in range(int(parts[1]))]
    text, off = line("params")
    parts = text.split()
    if len(parts) != 2 or parts[0] != "params" or not parts[1].isdigit():
        raise FormatError("bad params count", section="params", offset=off)
    params = {}
    for _ in range(int(parts[1])):
        text, off = line("params")
        parts = text.split()
        try:
            name, ndim = parts[0], int(parts[1])
            dims = tuple(int(d) for d in parts[2:2 + ndim])
            if len(parts) != 2 + ndim:
                raise ValueError
        except (IndexError, ValueError):
            raise FormatError("bad parameter entry", section="params", offset=off) from None
        count = int(np.prod(dims)) if dims else 1
        end = pos + 4 * count
        if end > len(data):
            raise FormatError(f"truncated data for {name}", section="params", offset=len(data))
        params[name] = np.frombuffer(data[pos:end], dtype=_F32).reshape(dims).astype(np.float32)
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes", section="params", offset=pos)
    return params, ops


def save_pfw(path, params: dict, ops: list[str] = ()):
    Path(path).write_bytes(encode_pfw(params, ops))


def load_pfw(path):
    return decode_pfw(Path(path).read_bytes())
