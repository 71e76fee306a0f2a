"""SPDCKPT1 binary container for full checkpoints and block overlays.

Layout: magic "SPDCKPT1", u32 pair count, then length-prefixed key/value
strings (config plus container metadata), u32 tensor count, then per tensor
(u32 name length, name, u32 rank, u64 dims, raw little-endian element bytes).
Round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile

import numpy as np

from .errors import DataError
from .model import DecoderBlockWeights, Model, ModelConfig, init_model
from .tensor import Tensor

MAGIC = b"SPDCKPT1"


def _write_str(f, s):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def _write_tensor(f, name, arr):
    _write_str(f, name)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor(f, dtype):
    name = _read_str(f)
    (rank,) = struct.unpack("<I", f.read(4))
    dims = [struct.unpack("<Q", f.read(8))[0] for _ in range(rank)]
    count = 1
    for d in dims:
        count *= d
    dt = np.dtype(dtype).newbyteorder("<")
    arr = np.frombuffer(f.read(count * dt.itemsize), dtype=dt).reshape(dims)
    return name, arr.astype(np.dtype(dtype))


def atomic_write(path, writer):
    """Write via temp file + rename so partial files never land."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_container(path, header, named_arrays):
    def writer(f):
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        for k, v in header.items():
            _write_str(f, k)
            _write_str(f, str(v))
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays:
            _write_tensor(f, name, arr)
    atomic_write(path, writer)


def _load_container(path):
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise DataError(f"{path}: not an SPDCKPT1 file")
        (n_pairs,) = struct.unpack("<I", f.read(4))
        header = {}
        for _ in range(n_pairs):
            k = _read_str(f)
            header[k] = _read_str(f)
        dtype = header.get("dtype", "float64")
        (n_tensors,) = struct.unpack("<I", f.read(4))
        arrays = [_read_tensor(f, dtype) for _ in range(n_tensors)]
    return header, arrays


def model_hash(model):
    h = hashlib.sha256()
    for name, t in model.named_tensors():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def save_model(path, model):
    header = dict(model.config.to_dict())
    header["container"] = "model"
    header["dtype"] = str(model.blocks[0].w_q.data.dtype) if model.blocks else str(
        model.embed.data.dtype)
    _save_container(path, header,
                    [(n, t.data) for n, t in model.named_tensors()])


def load_model(path):
    header, arrays = _load_container(path)
    if header.get("container") != "model":
        raise DataError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(header)
    model = init_model(cfg, requires_grad=True)
    lookup = dict(model.named_tensors())
    seen = set()
    for name, arr in arrays:
        if name not in lookup:
            raise DataError(f"{path}: unexpected tensor {name!r}")
        if lookup[name].data.shape != arr.shape:
            raise DataError(f"{path}: shape mismatch for {name!r}")
        lookup[name].data = arr.copy()
        seen.add(name)
    missing = set(lookup) - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    return model


def save_overlay(path, overlays, base_hash, config):
    """Overlay container: only modified blocks, keyed by block index."""
    header = dict(config.to_dict())
    header["container"] = "overlay"
    header["base_hash"] = base_hash
    arrays = []
    for idx in sorted(overlays):
        for n, t in overlays[idx].named_tensors():
            arrays.append((f"block.{idx}.{n}", t.data))
    if arrays:
        header["dtype"] = str(arrays[0][1].dtype)
    _save_container(path, header, arrays)


def load_overlay(path, config=None):
    header, arrays = _load_container(path)
    if header.get("container") != "overlay":
        raise DataError(f"{path}: not an overlay checkpoint")
    cfg = ModelConfig.from_dict(header)
    per_block = {}
    for name, arr in arrays:
        _, idx, field = name.split(".", 2)
        per_block.setdefault(int(idx), {})[field] = arr
    template = init_model(cfg, requires_grad=False)
    overlays = {}
    for idx, fields in per_block.items():
        block = template.blocks[0].copy()
        for n, t in block.named_tensors():
            if n not in fields:
                raise DataError(f"{path}: overlay block {idx} missing {n!r}")
            t.data = fields[n].copy()
        overlays[idx] = block
    return overlays, header.get("base_hash", "")
