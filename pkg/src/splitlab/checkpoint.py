"""SPLB binary checkpoints.

Layout::

    "SPLB" | version u16 LE | kind u8 |
    repeated: name_len u16 LE | name utf-8 | ndim u8 | ndim x u32 LE | f32 LE data |
    CRC32 (u32 LE) of every preceding byte

Architecture integers are stored as 0-d parameters named ``arch.<key>``.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from splitlab.zoo.models import Autoencoder, Generator, InverseNet, SplitModel

MAGIC = b"SPLB"
VERSION = 1
KINDS = {1: SplitModel, 2: Generator, 3: Autoencoder, 4: InverseNet}
KIND_CODES = {cls: code for code, cls in KINDS.items()}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CRCMismatch(CheckpointError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


def encode_params(kind: int, params: dict) -> bytes:
    out = bytearray(MAGIC + struct.pack("<HB", VERSION, kind))
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")      # ascontiguousarray would turn 0-d into 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise ValueError(f"parameter {name!r} cannot be stored")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes(order="C")
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_params(data: bytes) -> tuple[int, dict]:
    if len(data) < 11:
        raise CheckpointError("file too short", len(data))
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CRCMismatch("CRC mismatch", len(data) - 4)
    version, kind = struct.unpack_from("<HB", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unknown format version {version}", 4)
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind}", 6)
    params, pos = {}, 7
    while pos < len(body):
        start = pos
        try:
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            ndim = body[pos]
            dims = struct.unpack_from(f"<{ndim}I", body, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CheckpointError(f"parameter {name!r} runs past the end", start)
            params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed parameter entry ({exc})", start) from exc
    return kind, params


def save_checkpoint(model, path) -> None:
    kind = KIND_CODES.get(type(model))
    if kind is None:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    params = {f"arch.{k}": np.float32(v) for k, v in model.arch().items()}
    params.update(model.params())
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_params(kind, params))
    os.replace(tmp, path)


def load_checkpoint(path):
    if not os.path.exists(path):
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        kind, params = decode_params(fh.read())
    arch = {k[5:]: int(v) for k, v in params.items() if k.startswith("arch.")}
    model = KINDS[kind].from_arch(arch)
    model.set_params({k: v for k, v in params.items() if not k.startswith("arch.")})
    return model
