"""On-disk formats: weight checkpoints and metadata-tagged CSV files.

Checkpoint layout (all integers little-endian uint32)::

    b"CFW1"  count  { rows  cols  rows*cols float64-LE }*count  crc32

The trailing CRC-32 covers every byte before it.  A network with biases
stores its weight matrices first, then one ``1 x out_dim`` array per bias.
"""
from __future__ import annotations

import csv
import hashlib
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ChecksumError, DimensionError, FormatError
from .nn import LayerSpec, Network

MAGIC = b"CFW1"


def encode_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.atleast_2d(np.asarray(a, dtype="<f8"))
        if a.ndim != 2:
            raise DimensionError("checkpoint arrays must be 2-D")
        parts.append(struct.pack("<II", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_arrays(buf: bytes) -> list[np.ndarray]:
    if len(buf) < 12:
        raise FormatError("checkpoint too short", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch", offset=len(body))
    (count,) = struct.unpack_from("<I", body, 4)
    pos, out = 8, []
    for _ in range(count):
        if pos + 8 > len(body):
            raise FormatError("truncated array header", offset=pos)
        rows, cols = struct.unpack_from("<II", body, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(body):
            raise FormatError("truncated array payload", offset=pos)
        out.append(np.frombuffer(body, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if pos != len(body):
        raise FormatError("trailing bytes after last array", offset=pos)
    return out


def save_network(net: Network, path) -> None:
    arrays = list(net.weights)
    if net.biases is not None:
        arrays += [b[None, :] for b in net.biases]
    Path(path).write_bytes(encode_arrays(arrays))


def load_network(path, layers: Sequence[LayerSpec], bias: bool = False) -> Network:
    arrays = decode_arrays(Path(path).read_bytes())
    L = len(layers)
    if len(arrays) != (2 * L if bias else L):
        raise FormatError(f"{path}: {len(arrays)} arrays for a {L}-layer network")
    biases = [a[0].copy() for a in arrays[L:]] if bias else None
    return Network(list(layers), [a.copy() for a in arrays[:L]], biases)


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> None:
    """CSV with an optional leading ``# key=value ...`` comment line."""
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_meta(path) -> dict[str, str]:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first[1:].split() if "=" in item)


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
