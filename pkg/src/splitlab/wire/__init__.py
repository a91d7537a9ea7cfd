"""Split-inference wire protocol, server, client, and capture replay."""

from splitlab.wire.capture import CaptureRecord, CaptureWriter, Replay, read_capture, replay_capture
from splitlab.wire.net import (
    SplitClient,
    SplitServer,
    client_representation,
    read_frame,
    run_client,
    run_server,
)
from splitlab.wire.protocol import (
    ERROR,
    INFER_REQUEST,
    INFER_RESPONSE,
    MAGIC,
    BadDtype,
    BadMagic,
    BadMessageType,
    BadVersion,
    DecodeError,
    DimsOverflow,
    Message,
    RemoteError,
    TrailingBytes,
    TruncatedFrame,
    decode_frame,
    decode_tensor,
    encode_error,
    encode_tensor,
)

__all__ = [
    "BadDtype", "BadMagic", "BadMessageType", "BadVersion", "CaptureRecord", "CaptureWriter", "DecodeError",
    "DimsOverflow", "ERROR", "INFER_REQUEST", "INFER_RESPONSE", "MAGIC", "Message", "RemoteError", "Replay",
    "SplitClient", "SplitServer", "TrailingBytes", "TruncatedFrame", "client_representation", "decode_frame",
    "decode_tensor", "encode_error", "encode_tensor", "read_capture", "read_frame", "replay_capture",
    "run_client", "run_server",
]
