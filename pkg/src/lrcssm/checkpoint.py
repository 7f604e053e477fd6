"""Binary checkpoint format.

Layout (all integers little-endian uint64 unless noted):

    magic   7 bytes  b"LRCSSM1"
    cfg_len uint64   length of the UTF-8 JSON config echo
    cfg     cfg_len bytes
    count   uint64   number of named arrays
    then per array, in the fixed order of model.iter_named_arrays:
        name_len uint64, name bytes (UTF-8)
        ndim uint64, dims uint64 * ndim
        data float64 little-endian, C order

Arrays are written as float64 regardless of the in-memory dtype; loading
restores the dtype recorded in the config.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .errors import ValidationError
from .model import ModelConfig, ModelParams, init_params, iter_named_arrays
from .solver import SolverConfig

MAGIC = b"LRCSSM1"


def config_to_dict(cfg: ModelConfig) -> dict:
    out = dataclasses.asdict(cfg)
    return out


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    solver = d.pop("solver", {})
    return ModelConfig(solver=SolverConfig(**solver), **d)


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    entries = list(iter_named_arrays(params))
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (cfg, params); raises ValidationError on a malformed file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        chunk = raw[off:off + n]
        if len(chunk) != n:
            raise ValidationError(f"{path}: truncated checkpoint")
        off += n
        return chunk

    (cfg_len,) = struct.unpack("<Q", take(8))
    cfg = config_from_dict(json.loads(take(cfg_len).decode("utf-8")))
    params = init_params(cfg)  # correct tree structure; values overwritten
    expected = list(iter_named_arrays(params))
    (count,) = struct.unpack("<Q", take(8))
    if count != len(expected):
        raise ValidationError(
            f"{path}: {count} arrays, config implies {len(expected)}")
    dtype = cfg.np_dtype
    for want_name, dst in expected:
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        if name != want_name:
            raise ValidationError(f"{path}: array {name!r}, expected {want_name!r}")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        if shape != dst.shape:
            raise ValidationError(
                f"{path}: {name} has shape {shape}, expected {dst.shape}")
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        arr = np.frombuffer(take(n_bytes), dtype="<f8").reshape(shape)
        dst[...] = arr.astype(dtype)
    if off != len(raw):
        raise ValidationError(f"{path}: trailing bytes after arrays")
    return cfg, params
