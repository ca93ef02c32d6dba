"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ADCW"                      magic
    u32                          format version
    u32 + bytes                  UTF-8 JSON config (sorted keys, compact)
    repeated until EOF:
        u32 + bytes              array name (UTF-8)
        u8                       dtype tag: 0 = float32, 1 = float64
        u32                      rank
        u32 * rank               dims
        raw data                 little-endian, C order

Array names carry a section prefix: ``psi/``, ``theta/`` or ``buffer/``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .models import ArchConfig, ModelState
from .norm import GbnParams
from .tensor import Tensor

MAGIC = b"ADCW"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def write_arrays(path: os.PathLike, config: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = dumps_config(config).encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg]
    seen = set()
    for name, arr in arrays:
        if name in seen:
            raise CheckpointError(f"duplicate array name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<B", DTYPE_TAGS[dt]),
                   struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                   np.ascontiguousarray(arr, dtype=dt).tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path: os.PathLike) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = take("<I")
    config = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    arrays = []
    while pos < len(buf):
        (n,) = take("<I")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (tag,) = take("<B")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{path}: {name} has unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
        arrays.append((name, arr.astype(dt.newbyteorder("="))))
    return config, arrays


def save_model(path: os.PathLike, model: ModelState, extra: dict | None = None) -> None:
    config = {"kind": model.kind, "arch": model.arch.to_dict(), "version": model.version, **(extra or {})}
    arrays = [(f"psi/{k}", t.data) for k, t in model.psi.items()]
    arrays += [(f"theta/{k}", t.data) for k, t in model.theta.items()]
    arrays += [(f"buffer/{k}", v) for k, v in model.buffers.items()]
    write_arrays(path, config, arrays)


def load_model(path: os.PathLike) -> tuple[ModelState, dict]:
    config, arrays = read_arrays(path)
    if config.get("kind") not in ("gbn", "bn"):
        raise CheckpointError(f"{path}: not a model checkpoint (kind={config.get('kind')!r})")
    arch = ArchConfig.from_dict(config["arch"])
    psi, theta, buffers = {}, {}, {}
    for name, arr in arrays:
        section, _, key = name.partition("/")
        if section == "psi":
            psi[key] = Tensor(arr, requires_grad=True)
        elif section == "theta":
            theta[key] = Tensor(arr, requires_grad=True)
        elif section == "buffer":
            buffers[key] = arr
        else:
            raise CheckpointError(f"{path}: unknown array section in {name!r}")
    model = ModelState(psi=psi, theta=theta, arch=arch, kind=config["kind"], buffers=buffers,
                       version=int(config.get("version", 1)))
    return model, config


def save_phi(path: os.PathLike, phi: GbnParams, extra: dict | None = None) -> None:
    config = {"kind": "phi", "layout": [list(p) for p in phi.layout], **(extra or {})}
    write_arrays(path, config, [("phi", phi.phi.data)])


def load_phi(path: os.PathLike) -> tuple[GbnParams, dict]:
    config, arrays = read_arrays(path)
    if config.get("kind") != "phi" or len(arrays) != 1:
        raise CheckpointError(f"{path}: not a phi file")
    layout = [tuple(p) for p in config["layout"]]
    return GbnParams(Tensor(arrays[0][1]), layout), config
