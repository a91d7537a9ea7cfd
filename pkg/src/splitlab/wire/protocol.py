"""SIP1 tensor frames.

Tensor frame::

    "SIP1" | version u8 = 1 | msg_type u8 | dtype u8 (1 = f32 LE) | ndim u8 |
    ndim x u32 LE dims | prod(dims) x f32 LE

An ERROR frame (msg_type 3) carries a u16 LE code right after msg_type and
nothing else.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SIP1"
VERSION = 1
INFER_REQUEST = 1
INFER_RESPONSE = 2
ERROR = 3
DTYPE_F32 = 1
MAX_NDIM = 8
MAX_ELEMENTS = 1 << 26

# ERROR frame codes
E_BAD_MAGIC = 1
E_BAD_VERSION = 2
E_BAD_TYPE = 3
E_BAD_DTYPE = 4
E_DIMS = 5
E_LENGTH = 6
E_SHAPE = 7
E_INTERNAL = 8
E_UNEXPECTED = 9

_TENSOR_TYPES = (INFER_REQUEST, INFER_RESPONSE)
_F32 = np.dtype("<f4")


class DecodeError(ValueError):
    code = E_INTERNAL


class TruncatedFrame(DecodeError):
    code = E_LENGTH


class BadMagic(DecodeError):
    code = E_BAD_MAGIC


class BadVersion(DecodeError):
    code = E_BAD_VERSION


class BadMessageType(DecodeError):
    code = E_BAD_TYPE


class BadDtype(DecodeError):
    code = E_BAD_DTYPE


class DimsOverflow(DecodeError):
    code = E_DIMS


class TrailingBytes(DecodeError):
    code = E_LENGTH


class RemoteError(RuntimeError):
    """The peer answered with an ERROR frame."""

    def __init__(self, code: int):
        super().__init__(f"remote error code {code}")
        self.code = code


@dataclass
class Message:
    msg_type: int
    tensor: np.ndarray | None = None
    error_code: int | None = None

    def __eq__(self, other):
        if not isinstance(other, Message) or (self.msg_type, self.error_code) != (other.msg_type, other.error_code):
            return False
        if self.tensor is None or other.tensor is None:
            return self.tensor is other.tensor
        return self.tensor.shape == other.tensor.shape and self.tensor.tobytes() == other.tensor.tobytes()


def encode_tensor(t: np.ndarray, msg_type: int = INFER_REQUEST) -> bytes:
    """Encode a float32 tensor as one frame."""
    t = np.asarray(t)
    if msg_type not in _TENSOR_TYPES:
        raise ValueError(f"msg_type {msg_type} does not carry a tensor")
    if t.dtype != np.float32:
        raise TypeError(f"only float32 tensors are encodable, got {t.dtype}")
    if t.ndim > MAX_NDIM:
        raise ValueError(f"at most {MAX_NDIM} dimensions, got {t.ndim}")
    if t.size > MAX_ELEMENTS:
        raise ValueError("tensor too large for one frame")
    header = MAGIC + struct.pack("<BBBB", VERSION, msg_type, DTYPE_F32, t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    return header + dims + np.ascontiguousarray(t, dtype=_F32).tobytes()


def encode_error(code: int) -> bytes:
    return MAGIC + struct.pack("<BBH", VERSION, ERROR, code)


def parse_prefix(buf: bytes) -> int:
    """Validate the fixed header and return the full frame length.

    Raises :class:`TruncatedFrame` if ``buf`` is too short to know the length.
    """
    if len(buf) < 4:
        raise TruncatedFrame("frame shorter than magic")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagic("bad magic")
    if len(buf) < 6:
        raise TruncatedFrame("frame shorter than header")
    version, msg_type = buf[4], buf[5]
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if msg_type == ERROR:
        return 8
    if msg_type not in _TENSOR_TYPES:
        raise BadMessageType(f"unknown message type {msg_type}")
    if len(buf) < 8:
        raise TruncatedFrame("frame shorter than header")
    dtype, ndim = buf[6], buf[7]
    if dtype != DTYPE_F32:
        raise BadDtype(f"unsupported dtype code {dtype}")
    if ndim > MAX_NDIM:
        raise DimsOverflow(f"ndim {ndim} exceeds {MAX_NDIM}")
    if len(buf) < 8 + 4 * ndim:
        raise TruncatedFrame("frame shorter than its dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    n = 1
    for d in dims:
        n *= d
    if n > MAX_ELEMENTS:
        raise DimsOverflow(f"{n} elements exceed the frame limit")
    return 8 + 4 * ndim + 4 * n


def decode_frame(buf: bytes) -> Message:
    """Decode exactly one frame; any defect raises a :class:`DecodeError`."""
    buf = bytes(buf)
    length = parse_prefix(buf)
    if len(buf) < length:
        raise TruncatedFrame(f"frame needs {length} bytes, got {len(buf)}")
    if len(buf) > length:
        raise TrailingBytes(f"{len(buf) - length} bytes after the frame")
    msg_type = buf[5]
    if msg_type == ERROR:
        return Message(ERROR, error_code=struct.unpack_from("<H", buf, 6)[0])
    ndim = buf[7]
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    data = np.frombuffer(buf, dtype=_F32, offset=8 + 4 * ndim).reshape(dims)
    return Message(msg_type, tensor=data.astype(np.float32))


def decode_tensor(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode a tensor frame to ``(tensor, msg_type)``; ERROR frames raise :class:`RemoteError`."""
    msg = decode_frame(buf)
    if msg.msg_type == ERROR:
        raise RemoteError(msg.error_code)
    return msg.tensor, msg.msg_type
