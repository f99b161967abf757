"""Decoder checkpoint serialization.

Layout: magic ``R3DW``, format version, a JSON block with the decoder
configuration, then every named parameter as (name, shape, float64 payload)
in sorted-name order. Loading rebuilds the parameter structure from the
stored configuration and fills it in place, so a checkpoint restores
bit-identical behavior; any structural disagreement is rejected.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .config import ConfigError, DecoderConfig
from .decoder import build_decoder_params
from .layers import named_parameters
from .scene import ValidationError

MAGIC = b"R3DW"
VERSION = 1


def save_checkpoint(path, params, cfg: DecoderConfig):
    named = named_parameters(params)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(named))
    for name in sorted(named):
        data = named[name].data
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += np.ascontiguousarray(data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, blob, label):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValidationError(f"{self.label}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u4(self):
        return struct.unpack("<I", self.take(4))[0]

    def done(self):
        if self.pos != len(self.blob):
            raise ValidationError(f"{self.label}: trailing bytes after checkpoint payload")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, DecoderConfig)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, str(path))
    if r.take(4) != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    version = r.u4()
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg_doc = json.loads(r.take(r.u4()).decode("utf-8"))
        cfg = DecoderConfig(**cfg_doc).validate()
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise ValidationError(f"{path}: bad embedded config ({exc})") from exc

    params = build_decoder_params(cfg, seed=0)
    named = named_parameters(params)
    count = r.u4()
    if count != len(named):
        raise ValidationError(f"{path}: holds {count} parameters, structure needs {len(named)}")
    seen = set()
    for _ in range(count):
        name = r.take(r.u4()).decode("utf-8")
        if name not in named:
            raise ValidationError(f"{path}: unexpected parameter {name!r}")
        if name in seen:
            raise ValidationError(f"{path}: duplicate parameter {name!r}")
        seen.add(name)
        ndim = r.u4()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        target = named[name]
        if shape != target.shape:
            raise ValidationError(f"{path}: parameter {name!r} has shape {shape}, expected {target.shape}")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"{path}: parameter {name!r} holds non-finite values")
        target.data = data
    r.done()
    return params, cfg
