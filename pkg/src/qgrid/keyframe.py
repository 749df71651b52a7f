"""Binary key frames as written by the key service into the local key file.

Wire layout (46 bytes, big-endian integers)::

    offset  size  field
    0       1     sync      0xA5
    1       8     key_id    64-bit key counter
    9       32    key_data  256-bit secret
    41      1     status    bit 0: 0 = unused, 1 = used; other bits zero
    42      4     crc       CRC-32 (IEEE) over bytes 1..41

The sync byte is not covered by the CRC.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO

from qgrid.errors import BadCRC, BadLength, BadSync, KeyFileIOError, Truncated

SYNC = 0xA5
KEY_LEN = 32
FRAME_LEN = 46
_BODY = struct.Struct(">Q32sB")  # key_id, key_data, status
_CRC = struct.Struct(">I")
_CRC_START = 1
_CRC_END = 1 + _BODY.size
_SYNC_BYTE = bytes([SYNC])


@dataclass(frozen=True)
class KeyFrame:
    key_id: int
    key_data: bytes
    key_status: int = 0
    crc: int | None = None
    sync: int = SYNC

    @property
    def crc_ok(self) -> bool:
        return self.crc is None or self.crc == frame_crc(self.key_id, self.key_data, self.key_status)


def frame_crc(key_id: int, key_data: bytes, key_status: int) -> int:
    return zlib.crc32(_BODY.pack(key_id, key_data, key_status & 1)) & 0xFFFFFFFF


def make_frame(key_id: int, key_data: bytes, key_status: int = 0) -> KeyFrame:
    """Build a frame with its CRC filled in."""
    if len(key_data) != KEY_LEN:
        raise BadLength(f"key_data must be {KEY_LEN} bytes", length=len(key_data))
    return KeyFrame(key_id, bytes(key_data), key_status & 1, frame_crc(key_id, key_data, key_status))


def serialize_frame(frame: KeyFrame) -> bytes:
    if len(frame.key_data) != KEY_LEN:
        raise BadLength(f"key_data must be {KEY_LEN} bytes", length=len(frame.key_data))
    if not 0 <= frame.key_id < 1 << 64:
        raise BadLength("key_id does not fit in 64 bits", key_id=frame.key_id)
    body = _BODY.pack(frame.key_id, frame.key_data, frame.key_status & 1)
    return _SYNC_BYTE + body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _decode_at(buf: bytes, pos: int) -> KeyFrame:
    # caller guarantees buf[pos] == SYNC and FRAME_LEN bytes available
    body = bytes(buf[pos + _CRC_START : pos + _CRC_END])
    (crc,) = _CRC.unpack_from(buf, pos + _CRC_END)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BadCRC("crc mismatch", offset=pos)
    key_id, key_data, status = _BODY.unpack(body)
    if status & 0xFE:
        raise BadCRC("reserved status bits set", offset=pos)
    return KeyFrame(key_id, key_data, status, crc)


def parse_frame(data: bytes | bytearray | memoryview, start: int = 0) -> tuple[KeyFrame, int]:
    """Parse the first frame at or after ``start``.

    Returns ``(frame, consumed)`` where ``consumed`` counts bytes from
    ``start`` through the end of the frame, including any skipped garbage.
    A sync byte whose candidate frame fails its CRC is passed over and the
    scan continues, so corrupted frames are skipped rather than returned.
    Raises ``BadSync`` when no sync byte is present, ``Truncated`` when the
    only candidate runs past the end of ``data``, and ``BadCRC`` when every
    complete candidate failed its check.
    """
    buf = bytes(data)
    n = len(buf)
    pos = start
    saw_bad = False
    while True:
        pos = buf.find(_SYNC_BYTE, pos)
        if pos < 0:
            if saw_bad:
                raise BadCRC("no frame with a valid crc", offset=start)
            raise BadSync("no sync marker", offset=start)
        if n - pos < FRAME_LEN:
            if saw_bad:
                raise BadCRC("no frame with a valid crc", offset=start)
            raise Truncated("incomplete frame", offset=pos, available=n - pos)
        try:
            frame = _decode_at(buf, pos)
        except BadCRC:
            saw_bad = True
            pos += 1
            continue
        return frame, pos + FRAME_LEN - start


@dataclass
class ScanItem:
    offset: int
    frame: KeyFrame
    crc_ok: bool


def scan_frames(data: bytes) -> list[ScanItem]:
    """Walk a whole buffer, reporting valid and corrupted frames.

    A sync position whose CRC fails is reported as a corrupted frame when it
    starts where the previous frame ended, or when a valid frame (or the end
    of data) follows exactly one frame length later. Otherwise it is treated
    as stray garbage and the scan advances one byte.
    """
    items: list[ScanItem] = []
    pos = 0
    boundary = 0
    n = len(data)
    while True:
        pos = data.find(_SYNC_BYTE, pos)
        if pos < 0 or n - pos < FRAME_LEN:
            return items
        try:
            frame = _decode_at(data, pos)
            items.append(ScanItem(pos, frame, True))
            pos += FRAME_LEN
            boundary = pos
        except BadCRC:
            nxt = pos + FRAME_LEN
            if pos == boundary or nxt == n or _valid_at(data, nxt):
                key_id, key_data, status = _BODY.unpack_from(data, pos + 1)
                (crc,) = _CRC.unpack_from(data, pos + _CRC_END)
                items.append(ScanItem(pos, KeyFrame(key_id, key_data, status & 1, crc), False))
                pos = boundary = nxt
            else:
                pos += 1


def _valid_at(data: bytes, pos: int) -> bool:
    if len(data) - pos < FRAME_LEN or data[pos] != SYNC:
        return False
    try:
        _decode_at(data, pos)
    except BadCRC:
        return False
    return True


class KeyFileReader:
    """Tail-follows an append-only key file.

    Each :meth:`read` returns the complete, CRC-valid frames written since the
    previous call. A partial frame at the end is left in place for the next
    call. ``source`` is a path or a seekable binary stream.
    """

    def __init__(self, source: str | os.PathLike | BinaryIO):
        self.source = source
        self.offset = 0
        self.bad_crc = 0
        self.frames_read = 0

    def _read_new(self) -> bytes:
        try:
            if isinstance(self.source, (str, os.PathLike)):
                if not os.path.exists(self.source):
                    return b""
                with open(self.source, "rb") as fh:
                    fh.seek(self.offset)
                    return fh.read()
            self.source.seek(self.offset)
            return self.source.read()
        except OSError as exc:
            raise KeyFileIOError(str(exc), offset=self.offset) from exc

    def read(self) -> list[KeyFrame]:
        data = self._read_new()
        frames: list[KeyFrame] = []
        pos = 0
        n = len(data)
        while pos < n:
            sync = data.find(_SYNC_BYTE, pos)
            if sync < 0:
                pos = n
                break
            if n - sync < FRAME_LEN:
                pos = sync
                break
            try:
                frames.append(_decode_at(data, sync))
                pos = sync + FRAME_LEN
            except BadCRC:
                nxt = sync + FRAME_LEN
                if nxt == n or _valid_at(data, nxt):
                    self.bad_crc += 1
                    pos = nxt
                elif n - nxt < FRAME_LEN and data.find(_SYNC_BYTE, sync + 1, nxt + 1) < 0:
                    # cannot decide yet whether this was a bad frame or garbage
                    pos = sync
                    break
                else:
                    pos = sync + 1
        self.offset += pos
        self.frames_read += len(frames)
        return frames


def read_key_file(source: str | os.PathLike | BinaryIO | bytes) -> list[KeyFrame]:
    """One-shot read of every valid frame in ``source``."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))
    return KeyFileReader(source).read()


class KeyFileWriter:
    """Appends frames to a key file (or any binary stream)."""

    def __init__(self, sink: str | os.PathLike | BinaryIO):
        self._own = isinstance(sink, (str, os.PathLike))
        try:
            self._fh = open(sink, "ab") if self._own else sink
        except OSError as exc:
            raise KeyFileIOError(str(exc)) from exc
        self.count = 0

    def write(self, frame: KeyFrame) -> None:
        try:
            if not self._own and self._fh.seekable():
                self._fh.seek(0, io.SEEK_END)
            self._fh.write(serialize_frame(frame))
            self._fh.flush()
        except OSError as exc:
            raise KeyFileIOError(str(exc), frames=self.count) from exc
        self.count += 1

    def close(self) -> None:
        if self._own:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
