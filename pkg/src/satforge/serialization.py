"""On-disk formats.

Checkpoint / blob layout::

    SATFORGE1\\n
    <name> <dim> <dim> ...\\n     one line per tensor
    \\n                          blank line ends the header
    <little-endian float32 data, tensors in header order>

Embedding tables are text, one ``id dim v1 ... vd`` line per vector.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

MAGIC = b"SATFORGE1"
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    header = [MAGIC.decode()]
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid tensor name {name!r}")
        header.append(" ".join([name, *(str(d) for d in np.shape(arr))]))
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n\n").encode())
    for arr in tensors.values():
        a = np.asarray(arr)
        if a.dtype != np.float32 and not np.all(np.isfinite(a)):
            raise FormatError("non-finite tensor")
        buf.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    return buf.getvalue()


def parse_tensors(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC + b"\n"):
        raise FormatError("missing SATFORGE1 magic")
    end = data.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise FormatError("unterminated header")
    lines = data[len(MAGIC) + 1 : end].decode().split("\n") if end > len(MAGIC) else []
    offset = end + 2
    out: dict[str, np.ndarray] = {}
    for line in lines:
        if not line:
            continue
        name, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise FormatError(f"truncated data for tensor {name}")
        out[name] = np.frombuffer(data, dtype=_LE_F32, count=count, offset=offset).astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after tensor data")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    write_bytes_atomic(path, dump_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return parse_tensors(Path(path).read_bytes())


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def format_float(x) -> str:
    # 9 significant digits round-trip any float32 exactly
    return format(float(np.float32(x)), ".9g")


def write_table(path, rows: dict[str, np.ndarray]) -> None:
    lines = []
    for key, vec in rows.items():
        v = np.ravel(vec)
        lines.append(" ".join([key, str(v.size), *(format_float(x) for x in v)]))
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode() if lines else b"")


def read_table(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, dim, *vals = line.split()
        if int(dim) != len(vals):
            raise FormatError(f"{path}:{n}: declared dim {dim} but {len(vals)} values")
        out[key] = np.array([float(v) for v in vals], dtype=np.float32)
    return out
