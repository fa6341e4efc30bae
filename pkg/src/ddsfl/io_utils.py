"""Atomic writes and the binary matrix / feature-block formats."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"DDSFLMAT"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def matrix_bytes(m) -> bytes:
    """``DDSFLMAT`` + u32 rows + u32 cols + little-endian f32 row-major data."""
    m = np.atleast_2d(np.asarray(m, dtype="<f4"))
    return MATRIX_MAGIC + struct.pack("<II", *m.shape) + m.tobytes(order="C")


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not a matrix file")
    r, c = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * r * c:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(data[16:], dtype="<f4").reshape(r, c).astype(np.float32)


def feature_blocks_bytes(blocks) -> bytes:
    """Feature-map export.

    Each block is a text header line ``image<TAB>scale<TAB>rows<TAB>cols``
    followed by rows*cols little-endian f32 values. Row layout:
    ``centre_x, centre_y, pos_x, pos_y, f_1 .. f_D`` (centres in original
    image pixels, positions in the scaled image). A first line
    ``#hw<TAB>image<TAB>height<TAB>width`` per image records geometry.
    """
    out = bytearray()
    for image, hw, scale, rows in blocks:
        if hw is not None:
            out += f"#hw\t{image}\t{hw[0]}\t{hw[1]}\n".encode()
        rows = np.asarray(rows, dtype="<f4").reshape(len(rows), -1)
        out += f"{image}\t{scale}\t{rows.shape[0]}\t{rows.shape[1]}\n".encode()
        out += rows.tobytes(order="C")
    return bytes(out)


def read_feature_blocks(path):
    """Yield ``(image, scale, rows)`` blocks and collect ``{image: (h, w)}``."""
    data = Path(path).read_bytes()
    off = 0
    blocks = []
    geometry = {}
    while off < len(data):
        end = data.index(b"\n", off)
        header = data[off:end].decode().split("\t")
        off = end + 1
        if header[0] == "#hw":
            geometry[header[1]] = (int(header[2]), int(header[3]))
            continue
        image, scale, r, c = header[0], int(header[1]), int(header[2]), int(header[3])
        n = 4 * r * c
        if off + n > len(data):
            raise ValueError(f"{path}: truncated feature block for {image}")
        rows = np.frombuffer(data[off:off + n], dtype="<f4").reshape(r, c).astype(np.float32)
        off += n
        blocks.append((image, scale, rows))
    return blocks, geometry
