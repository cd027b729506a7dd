"""Flat named-array snapshot files for model parameters.

Binary layout (all integers little-endian):

    magic   4 bytes  b"FCPR"
    version u32      format version (1)
    count   u32      number of arrays
    entry*  count times:
        name_len u16, name utf-8 bytes,
        ndim u8, dims u32 * ndim,
        payload float64-LE * prod(dims)

Used for per-round global snapshots (``round_<k>.params``) and per-node
personalized models (``node_<i>_<method>.params``).
"""

from __future__ import annotations

import struct
import sys
from array import array
from pathlib import Path

from .models import ModelParams, ModelSpec
from .tensor import Tensor

MAGIC = b"FCPR"
VERSION = 1


class SnapshotError(ValueError):
    """Malformed or mismatched snapshot file."""


def _le(buf: array) -> bytes:
    if sys.byteorder == "little":
        return buf.tobytes()
    swapped = array("d", buf)
    swapped.byteswap()
    return swapped.tobytes()


def write_arrays(path, arrays: dict[str, tuple[tuple[int, ...], array]]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, (shape, buf) in arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        chunks.append(_le(buf))
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> dict[str, tuple[tuple[int, ...], array]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise SnapshotError(f"{path}: not a parameter snapshot (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {version}")
    off = 12
    out: dict[str, tuple[tuple[int, ...], array]] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n = 1
        for s in shape:
            n *= s
        buf = array("d")
        buf.frombytes(raw[off:off + 8 * n])
        off += 8 * n
        if sys.byteorder != "little":
            buf.byteswap()
        if len(buf) != n:
            raise SnapshotError(f"{path}: truncated payload for {name!r}")
        out[name] = (tuple(int(s) for s in shape), buf)
    return out


def save_params(params: ModelParams, path) -> None:
    write_arrays(path, {name: (t.shape, t.data)
                        for name, t in params.tensors.items()})


def load_params(spec: ModelSpec, path) -> ModelParams:
    """Rebuild ModelParams for ``spec``, validating names and shapes."""
    from .models import init_params

    arrays = read_arrays(path)
    reference = init_params(spec, seed=0)
    if tuple(arrays) != reference.names():
        raise SnapshotError(
            f"{path}: parameter names do not match spec {spec.family!r}")
    tensors: dict[str, Tensor] = {}
    for name, (shape, buf) in arrays.items():
        want = reference.tensors[name].shape
        if shape != want:
            raise SnapshotError(
                f"{path}: {name!r} has shape {shape}, spec wants {want}")
        tensors[name] = Tensor(shape, buf, requires_grad=True, name=name)
    return ModelParams(spec, tensors)
