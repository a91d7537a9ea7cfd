"""Append-only capture of received frames, and offline replay.

The capture file is a sequence of records ``u32 LE length | frame bytes``;
record ids are positions in that sequence. Receive timestamps go to a
sidecar text index ``<capture>.idx`` with lines ``id,timestamp,offset,length``.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
from dataclasses import dataclass

from splitlab.wire.protocol import DecodeError, decode_tensor

log = logging.getLogger(__name__)


@dataclass
class CaptureRecord:
    id: int
    timestamp: float | None
    frame: bytes


class CaptureWriter:
    """Serializes appends from concurrent handlers; ids are assigned under the lock."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        self.next_id = len(read_capture(self.path)[0]) if os.path.exists(self.path) else 0

    def append(self, frame: bytes) -> int:
        with self._lock:
            rid = self.next_id
            with open(self.path, "ab") as fh:
                offset = fh.tell()
                fh.write(struct.pack("<I", len(frame)) + frame)
            with open(self.path + ".idx", "a") as fh:
                fh.write(f"{rid},{time.time():.6f},{offset},{len(frame)}\n")
            self.next_id += 1
            return rid


def _timestamps(path):
    try:
        with open(path + ".idx") as fh:
            return {int(p[0]): float(p[1]) for p in (line.split(",") for line in fh) if len(p) == 4}
    except (OSError, ValueError):
        return {}


def read_capture(path) -> tuple[list[CaptureRecord], bool]:
    """All complete records plus a flag telling whether a truncated tail was dropped."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    stamps = _timestamps(path)
    records, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            return records, True
        (n,) = struct.unpack_from("<I", data, pos)
        if pos + 4 + n > len(data):
            return records, True
        rid = len(records)
        records.append(CaptureRecord(rid, stamps.get(rid), data[pos + 4:pos + 4 + n]))
        pos += 4 + n
    return records, False


class Replay(list):
    """Captured tensors in arrival order; ``truncated`` reports a dropped tail record."""

    truncated = False


def replay_capture(path) -> Replay:
    records, truncated = read_capture(path)
    out = Replay()
    for rec in records:
        try:
            out.append(decode_tensor(rec.frame)[0])
        except DecodeError as exc:
            log.warning("capture record %d undecodable: %s", rec.id, exc)
    out.truncated = truncated
    if truncated:
        log.warning("capture %s ends in a truncated record; %d complete records replayed", path, len(records))
    return out
