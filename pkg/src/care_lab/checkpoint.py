"""Checkpoint files: text manifest followed by raw little-endian arrays.

Layout::

    care-lab-checkpoint
    version 1
    int <name> <decimal>
    array <name> <dtype> <d0>x<d1>... <offset>
    data
    <raw bytes, arrays in manifest order>

Offsets count from the first byte after the ``data`` line. Training
checkpoints use ``<f8`` so a reloaded run continues bit-for-bit; ``<f4`` is
accepted for compact exports.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "care-lab-checkpoint"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    ints: dict[str, int] = field(default_factory=dict)
    version: int = VERSION


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], ints: Mapping[str, int],
                    dtype: str = "<f8") -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    dt = _DTYPES[dtype]
    lines = [MAGIC, f"version {VERSION}"]
    for name, value in ints.items():
        _check_name(name)
        lines.append(f"int {name} {int(value)}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        _check_name(name)
        a = np.asarray(arr, dtype=dt, order="C")  # ascontiguousarray would promote 0-d to 1-d
        lines.append(f"array {name} {dtype} {_shape_str(a.shape)} {offset}")
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("ascii")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def _check_name(name: str) -> None:
    if not name or any(c.isspace() for c in name):
        raise CheckpointError(f"invalid checkpoint entry name {name!r}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointTruncatedError(f"{path}: manifest ends before the data marker")
        line = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "data":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a care-lab checkpoint")
    if len(lines) < 2 or not lines[1].startswith("version "):
        raise CheckpointVersionError(f"{path}: missing version line")
    version = int(lines[1].split()[1])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    ckpt = Checkpoint(version=version)
    data = memoryview(raw)[pos:]
    for line in lines[2:]:
        parts = line.split()
        if parts[0] == "int":
            ckpt.ints[parts[1]] = int(parts[2])
        elif parts[0] == "array":
            _, name, dtype, shape_s, off_s = parts
            if dtype not in _DTYPES:
                raise CheckpointError(f"{path}: unsupported dtype {dtype!r} for {name}")
            dt = _DTYPES[dtype]
            shape = _parse_shape(shape_s)
            off = int(off_s)
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(data):
                raise CheckpointTruncatedError(
                    f"{path}: array {name} needs bytes [{off}, {off + nbytes}) but data has {len(data)}")
            arr = np.frombuffer(data[off:off + nbytes], dtype=dt).reshape(shape)
            ckpt.arrays[name] = arr.astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unrecognized manifest line {line!r}")
    return ckpt


def assign_arrays(targets: Mapping[str, np.ndarray], source: Mapping[str, np.ndarray],
                  context: str = "checkpoint") -> None:
    """Copy ``source`` into same-named ``targets``; any name/shape difference is an error."""
    missing = sorted(set(targets) - set(source))
    extra = sorted(set(source) - set(targets))
    if missing or extra:
        raise CheckpointShapeError(
            f"{context}: parameter sets differ (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, dst in targets.items():
        src = source[name]
        if src.shape != dst.shape:
            raise CheckpointShapeError(
                f"{context}: {name} has shape {src.shape}, model expects {dst.shape}")
    for name, dst in targets.items():
        dst[...] = source[name]
