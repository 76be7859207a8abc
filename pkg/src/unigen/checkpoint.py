"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"UNIGEN-CKPT v1\\n"
    config_len, config text (UTF-8, ``key = value`` lines)
    n_entries
    n_entries x (name_len, name bytes, ndim, dims..., float64 LE data)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .weavenet import build_model

MAGIC = b"UNIGEN-CKPT v1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path) -> None:
    cfg_bytes = model.cfg.to_text().encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple:
    """Returns ``(config, {name: array})``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing UNIGEN-CKPT v1 header")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    cfg = parse_config(raw[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, arrays


def load_checkpoint(path, expect: RunConfig | None = None):
    """Rebuild the model stored at ``path``.

    With ``expect`` given, the stored architecture must hash identically.
    """
    cfg, arrays = read_checkpoint(path)
    if expect is not None and expect.arch_hash() != cfg.arch_hash():
        raise CheckpointError(f"architecture mismatch: checkpoint {cfg.arch_hash()} "
                              f"vs expected {expect.arch_hash()}")
    model = build_model(cfg)
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(params))[:3]
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra}); "
                              f"config hash {cfg.arch_hash()}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data[...] = arrays[name]
    return model
