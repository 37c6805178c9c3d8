"""Binary frame codec for client/server traffic.

Frame layout (little-endian)::

    magic "SPL1" | type u8 | client_id u32 | epoch u32 | batch_id u32
    | payload_len u64 | payload | crc32(payload) u32

Payload encodings:

* tensor block: rank u8, extents u32 x rank, f32 data
* parameter block: count u32, then per tensor name_len u16, name, tensor block
* error: code u16, utf-8 message
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SPL1"
HEADER = struct.Struct("<4sBIIIQ")
HEADER_SIZE = HEADER.size  # 25
CRC_SIZE = 4
MAX_PAYLOAD = 256 * 1024 * 1024
MAX_RANK = 8
_READ_CHUNK = 1 << 20


class FrameType(enum.IntEnum):
    TRAIN_REQUEST = 1
    FEATURE_BATCH = 2
    GRADIENT_BATCH = 3
    WEIGHT_UPLOAD = 4
    WEIGHT_BROADCAST = 5
    EPOCH_DONE = 6
    AVG_COMMIT = 7
    EVAL_REQUEST = 8
    LOGITS_BATCH = 9
    ERROR = 10


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    CRC_MISMATCH = 2
    TRUNCATED = 3
    UNKNOWN_TYPE = 4
    TOO_LARGE = 5
    BAD_PAYLOAD = 6
    SHAPE_MISMATCH = 10
    UNKNOWN_SESSION = 11
    NO_CACHE = 12
    BARRIER = 13
    BAD_STATE = 14
    INTERNAL = 15


class ProtocolError(Exception):
    code = ErrorCode.BAD_PAYLOAD

    def __init__(self, message: str, code: ErrorCode | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class BadMagic(ProtocolError):
    code = ErrorCode.BAD_MAGIC


class CrcMismatch(ProtocolError):
    code = ErrorCode.CRC_MISMATCH


class Truncated(ProtocolError):
    code = ErrorCode.TRUNCATED


class UnknownType(ProtocolError):
    code = ErrorCode.UNKNOWN_TYPE


class FrameTooLarge(ProtocolError):
    code = ErrorCode.TOO_LARGE


class BadPayload(ProtocolError):
    code = ErrorCode.BAD_PAYLOAD


class ConnectionClosed(EOFError):
    """Peer closed the stream cleanly between frames."""


class RemoteError(Exception):
    """The peer answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Frame:
    type: FrameType
    client_id: int = 0
    epoch: int = 0
    batch_id: int = 0
    payload: bytes = b""


def encode(frame: Frame) -> bytes:
    payload = bytes(frame.payload)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    for field in ("client_id", "epoch", "batch_id"):
        v = getattr(frame, field)
        if not 0 <= v <= 0xFFFFFFFF:
            raise ValueError(f"{field}={v} does not fit in u32")
    head = HEADER.pack(MAGIC, int(FrameType(frame.type)), frame.client_id, frame.epoch,
                       frame.batch_id, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _parse_header(head: bytes):
    magic, ftype, cid, epoch, bid, plen = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise UnknownType(f"unknown frame type {ftype}") from None
    if plen > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload of {plen} bytes exceeds {MAX_PAYLOAD}")
    return ftype, cid, epoch, bid, plen


def _check_crc(payload: bytes, crc_bytes: bytes) -> None:
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) != crc:
        raise CrcMismatch("payload checksum mismatch")


def decode_prefix(buf: bytes) -> tuple[Frame, int]:
    """Decode the frame at the start of ``buf``; return it and the bytes consumed."""
    buf = memoryview(buf)
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    ftype, cid, epoch, bid, plen = _parse_header(bytes(buf[:HEADER_SIZE]))
    end = HEADER_SIZE + plen + CRC_SIZE
    if len(buf) < end:
        raise Truncated(f"frame needs {end} bytes, have {len(buf)}")
    payload = bytes(buf[HEADER_SIZE:HEADER_SIZE + plen])
    _check_crc(payload, bytes(buf[end - CRC_SIZE:end]))
    return Frame(ftype, cid, epoch, bid, payload), end


def decode(buf: bytes) -> Frame:
    frame, used = decode_prefix(buf)
    if used != len(buf):
        raise BadPayload(f"{len(buf) - used} trailing bytes after frame")
    return frame


def _read_exact(stream: BinaryIO, n: int, *, at_boundary: bool = False) -> bytes:
    parts, got = [], 0
    while got < n:
        chunk = stream.read(min(n - got, _READ_CHUNK))
        if not chunk:
            if at_boundary and got == 0:
                raise ConnectionClosed("stream closed")
            raise Truncated(f"stream ended after {got} of {n} bytes")
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def read_frame(stream: BinaryIO) -> Frame:
    """Read exactly one frame from a blocking byte stream."""
    head = _read_exact(stream, HEADER_SIZE, at_boundary=True)
    ftype, cid, epoch, bid, plen = _parse_header(head)
    payload = _read_exact(stream, plen)
    _check_crc(payload, _read_exact(stream, CRC_SIZE))
    return Frame(ftype, cid, epoch, bid, payload)


def write_frame(stream: BinaryIO, frame: Frame) -> None:
    stream.write(encode(frame))
    stream.flush()


# payload codecs

def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if not 1 <= t.ndim <= MAX_RANK:
        raise ValueError(f"tensor rank {t.ndim} outside 1..{MAX_RANK}")
    return struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape) + np.ascontiguousarray(t, "<f4").tobytes()


def _decode_tensor_at(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    if pos + 1 > len(buf):
        raise BadPayload("tensor block truncated before rank")
    rank = buf[pos]
    if not 1 <= rank <= MAX_RANK:
        raise BadPayload(f"tensor rank {rank} outside 1..{MAX_RANK}")
    pos += 1
    if pos + 4 * rank > len(buf):
        raise BadPayload("tensor block truncated in extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if min(shape) < 1:
        raise BadPayload(f"tensor extents must be >= 1, got {shape}")
    count = 1
    for e in shape:
        count *= e
    if pos + 4 * count > len(buf):
        raise BadPayload(f"tensor {shape} needs {4 * count} bytes, have {len(buf) - pos}")
    t = np.frombuffer(buf, "<f4", count, pos).astype(np.float32).reshape(shape)
    return t, pos + 4 * count


def decode_tensor(buf: bytes) -> np.ndarray:
    t, end = _decode_tensor_at(buf, 0)
    if end != len(buf):
        raise BadPayload(f"{len(buf) - end} trailing bytes after tensor block")
    return t


def encode_params(params: Mapping[str, np.ndarray] | None) -> bytes:
    params = params or {}
    parts = [struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + encode_tensor(t))
    return b"".join(parts)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4:
        raise BadPayload("parameter block truncated before count")
    (count,) = struct.unpack_from("<I", buf, 0)
    pos, out = 4, {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise BadPayload("parameter block truncated in name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen > len(buf):
            raise BadPayload("parameter block truncated in name")
        try:
            name = bytes(buf[pos:pos + nlen]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadPayload(f"parameter name is not utf-8: {exc}") from None
        pos += nlen
        if name in out:
            raise BadPayload(f"duplicate parameter {name!r}")
        out[name], pos = _decode_tensor_at(buf, pos)
    if pos != len(buf):
        raise BadPayload(f"{len(buf) - pos} trailing bytes after parameter block")
    return out


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def decode_error(buf: bytes) -> tuple[int, str]:
    if len(buf) < 2:
        raise BadPayload("error payload truncated")
    (code,) = struct.unpack_from("<H", buf, 0)
    return code, bytes(buf[2:]).decode("utf-8", errors="replace")


def error_frame(code: int, message: str, client_id: int = 0, epoch: int = 0, batch_id: int = 0) -> Frame:
    return Frame(FrameType.ERROR, client_id, epoch, batch_id, encode_error(code, message))


def tensor_frame(ftype: FrameType, t: np.ndarray, client_id: int = 0, epoch: int = 0,
                 batch_id: int = 0) -> Frame:
    return Frame(ftype, client_id, epoch, batch_id, encode_tensor(t))
