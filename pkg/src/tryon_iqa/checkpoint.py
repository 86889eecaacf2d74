"""Checkpoint byte layout (all integers little-endian)::

    b"VIQA"                       magic
    u32                           format version (1)
    u32 + bytes                   config block: UTF-8 JSON {"model": {...}, "train": {...} | null}
    u32                           parameter count
    per parameter:
        u16 + bytes               name
        u8                        ndim
        u32 * ndim                shape
        f64 * prod(shape)         values, row-major
    u8                            optimizer flag
    if flag == 1:
        u64                       step
        u32                       entry count
        per entry: u16 + bytes name, then f64 first moment, f64 second moment
        (shapes are those of the same-named parameter)
    u32                           CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, CheckpointError, ShapeMismatchError, TruncatedCheckpointError,
                     ChecksumError)
from .model import IcaModel, ModelConfig, parameter_shapes
from .tensor import Tensor
from .train import OptimizerState, TrainConfig

MAGIC = b"VIQA"
VERSION = 1


@dataclass
class Checkpoint:
    model: IcaModel
    train_config: TrainConfig | None = None
    optimizer: OptimizerState | None = None


def _name(buf: bytearray, name: str) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw


def encode_checkpoint(model: IcaModel, train_config: TrainConfig | None = None,
                      optimizer: OptimizerState | None = None) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    cfg = json.dumps({"model": model.config.to_dict(),
                      "train": train_config.to_dict() if train_config else None},
                     sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        _name(buf, name)
        buf += struct.pack("<B", p.data.ndim)
        buf += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    if optimizer is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1) + struct.pack("<QI", optimizer.step, len(optimizer.m))
        for name in optimizer.m:
            _name(buf, name)
            buf += np.ascontiguousarray(optimizer.m[name], dtype="<f8").tobytes()
            buf += np.ascontiguousarray(optimizer.v[name], dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"bad parameter name at byte {self.pos}: {e}") from None

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def _parse(data: bytes):
    r = _Reader(data, len(data) - 4)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    try:
        cfg = json.loads(r.take(clen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config block: {e}") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.name()
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        params[name] = r.floats(shape)
    (flag,) = r.unpack("<B")
    opt = None
    if flag == 1:
        step, n = r.unpack("<QI")
        opt = OptimizerState(step=step)
        for _ in range(n):
            name = r.name()
            if name not in params:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            opt.m[name] = r.floats(params[name].shape)
            opt.v[name] = r.floats(params[name].shape)
    elif flag != 0:
        raise CheckpointError(f"bad optimizer flag {flag}")
    if r.pos != r.end:
        raise CheckpointError(f"{r.end - r.pos} unexpected bytes before checksum")
    return cfg, params, opt


def decode_checkpoint(data: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    if len(data) < 4:
        raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    if len(data) < 12:
        raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes")
    (stored,) = struct.unpack("<I", data[-4:])
    crc_ok = zlib.crc32(data[:-4]) & 0xFFFFFFFF == stored
    if not crc_ok:
        # a structural overrun means bytes are missing; otherwise the payload was altered
        try:
            _parse(data)
        except TruncatedCheckpointError:
            raise
        except CheckpointError:
            pass
        raise ChecksumError("checkpoint CRC mismatch")
    cfg, params, opt = _parse(data)
    try:
        model_cfg = ModelConfig.from_dict(cfg["model"])
        train_cfg = TrainConfig.from_dict(cfg["train"]) if cfg.get("train") else None
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"bad config block: {e}") from None

    want = parameter_shapes(expected or model_cfg)
    for name, shape in want.items():
        if name not in params:
            raise ShapeMismatchError(f"parameter {name} missing from checkpoint")
        if params[name].shape != shape:
            raise ShapeMismatchError(f"parameter {name}: checkpoint shape {params[name].shape}, expected {shape}")
    extra = set(params) - set(want)
    if extra:
        raise ShapeMismatchError(f"unexpected parameter {sorted(extra)[0]} in checkpoint")
    if expected is not None and expected.to_dict() != model_cfg.to_dict():
        diff = sorted(k for k, v in expected.to_dict().items() if model_cfg.to_dict()[k] != v)
        raise ShapeMismatchError(f"checkpoint config differs from expected in {diff}")

    dtype = np.dtype(model_cfg.dtype)
    model = IcaModel(model_cfg, {n: Tensor(params[n].astype(dtype), name=n) for n in want})
    return Checkpoint(model, train_cfg, opt)


def save_checkpoint(path: str | os.PathLike, model: IcaModel, train_config: TrainConfig | None = None,
                    optimizer: OptimizerState | None = None) -> None:
    data = encode_checkpoint(model, train_config, optimizer)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), expected)
