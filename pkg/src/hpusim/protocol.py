"""GPU -> HPU offload wire format and the link transfer-cost model.

Frame layout (all integers little-endian)::

    header   magic u32 | version u16 | kind u16 | count u16 | reserved u16   12 B
    entries  count x entry
    trailer  crc32 u32 over every byte after the magic, trailer excluded

Request entry (kind 0)::

    head_id u32 | batch_id u32 | kv_base_addr u64 | seq_len u32 |
    head_dim u16 | group_size u16                                           24 B
    q[g, d] | k_new[d] | v_new[d]                         fp16, (g + 2) d 2 B

Response entry (kind 1)::

    head_id u32 | batch_id u32 | head_dim u16 | group_size u16              12 B
    out[g, d]                                                   fp16, g d 2 B
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = 0x48505543
VERSION = 1
KIND_REQUEST = 0
KIND_RESPONSE = 1
MAX_DESCRIPTORS = 256

_HEADER = struct.Struct("<IHHHH")
_REQ = struct.Struct("<IIQIHH")
_RESP = struct.Struct("<IIHH")
_CRC = struct.Struct("<I")

HEADER_BYTES = _HEADER.size
REQUEST_ENTRY_BYTES = _REQ.size
RESPONSE_ENTRY_BYTES = _RESP.size
TRAILER_BYTES = _CRC.size


class ProtocolError(Exception):
    pass


class ChunkTooLarge(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class BadCrc(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


def _bits(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f2").tobytes()


@dataclass(eq=False)
class Descriptor:
    head_id: int
    batch_id: int
    kv_base_addr: int
    seq_len: int
    q: np.ndarray       # (g, d)
    k_new: np.ndarray   # (d,)
    v_new: np.ndarray   # (d,)

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float16))
        self.k_new = np.asarray(self.k_new, dtype=np.float16).reshape(-1)
        self.v_new = np.asarray(self.v_new, dtype=np.float16).reshape(-1)
        if self.k_new.shape != (self.head_dim,) or self.v_new.shape != (self.head_dim,):
            raise ValueError("k_new/v_new must have head_dim elements")

    @property
    def group_size(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    @property
    def payload_bytes(self) -> int:
        return (self.group_size + 2) * self.head_dim * 2

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (self.head_id, self.batch_id, self.kv_base_addr, self.seq_len) == (
            other.head_id, other.batch_id, other.kv_base_addr, other.seq_len
        ) and all(_bits(a) == _bits(b) and a.shape == b.shape for a, b in
                  ((self.q, other.q), (self.k_new, other.k_new), (self.v_new, other.v_new)))


@dataclass(eq=False)
class Result:
    head_id: int
    batch_id: int
    out: np.ndarray     # (g, d)

    def __post_init__(self):
        self.out = np.atleast_2d(np.asarray(self.out, dtype=np.float16))

    def __eq__(self, other):
        if not isinstance(other, Result):
            return NotImplemented
        return ((self.head_id, self.batch_id) == (other.head_id, other.batch_id)
                and self.out.shape == other.out.shape and _bits(self.out) == _bits(other.out))


def _frame(kind: int, body_entries: list[bytes], version: int) -> bytes:
    n = len(body_entries)
    if n > MAX_DESCRIPTORS:
        raise ChunkTooLarge(f"{n} entries > {MAX_DESCRIPTORS}")
    if n < 1:
        raise ValueError("a chunk carries at least one entry")
    head = _HEADER.pack(MAGIC, version, kind, n, 0)
    body = head[4:] + b"".join(body_entries)
    return head[:4] + body + _CRC.pack(zlib.crc32(body))


def encode_chunk(descs: list[Descriptor], version: int = VERSION) -> bytes:
    entries = []
    for d in descs:
        entries.append(_REQ.pack(d.head_id, d.batch_id, d.kv_base_addr, d.seq_len,
                                 d.head_dim, d.group_size)
                       + _bits(d.q) + _bits(d.k_new) + _bits(d.v_new))
    return _frame(KIND_REQUEST, entries, version)


def encode_response(results: list[Result], version: int = VERSION) -> bytes:
    entries = [_RESP.pack(r.head_id, r.batch_id, r.out.shape[1], r.out.shape[0]) + _bits(r.out)
               for r in results]
    return _frame(KIND_RESPONSE, entries, version)


def _open(frame: bytes, kind: int) -> tuple[memoryview, int]:
    frame = memoryview(bytes(frame))
    if len(frame) < HEADER_BYTES + TRAILER_BYTES:
        raise TruncatedFrame(f"{len(frame)} bytes is shorter than header + trailer")
    magic, version, fkind, count, _ = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic:#010x}")
    (crc,) = _CRC.unpack_from(frame, len(frame) - TRAILER_BYTES)
    if zlib.crc32(frame[4:len(frame) - TRAILER_BYTES]) != crc:
        raise BadCrc("frame checksum mismatch")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if fkind != kind:
        raise ProtocolError(f"frame kind {fkind}, expected {kind}")
    if count > MAX_DESCRIPTORS:
        raise ChunkTooLarge(f"{count} entries > {MAX_DESCRIPTORS}")
    if count < 1:
        raise ProtocolError("empty chunk")
    return frame, count


def _half(view, offset: int, n: int, end: int) -> np.ndarray:
    if offset + 2 * n > end:
        raise TruncatedFrame("payload runs past the end of the frame")
    return np.frombuffer(view, dtype="<f2", count=n, offset=offset).astype(np.float16)


def decode_chunk(frame: bytes) -> list[Descriptor]:
    view, count = _open(frame, KIND_REQUEST)
    end = len(view) - TRAILER_BYTES
    pos, out = HEADER_BYTES, []
    for _ in range(count):
        if pos + REQUEST_ENTRY_BYTES > end:
            raise TruncatedFrame("entry header runs past the end of the frame")
        head_id, batch_id, base, seq_len, d, g = _REQ.unpack_from(view, pos)
        pos += REQUEST_ENTRY_BYTES
        q = _half(view, pos, g * d, end).reshape(g, d)
        pos += 2 * g * d
        k = _half(view, pos, d, end)
        pos += 2 * d
        v = _half(view, pos, d, end)
        pos += 2 * d
        out.append(Descriptor(head_id, batch_id, base, seq_len, q, k, v))
    if pos != end:
        raise TruncatedFrame(f"{end - pos} stray bytes after the last entry")
    return out


def decode_response(frame: bytes) -> list[Result]:
    view, count = _open(frame, KIND_RESPONSE)
    end = len(view) - TRAILER_BYTES
    pos, out = HEADER_BYTES, []
    for _ in range(count):
        if pos + RESPONSE_ENTRY_BYTES > end:
            raise TruncatedFrame("entry header runs past the end of the frame")
        head_id, batch_id, d, g = _RESP.unpack_from(view, pos)
        pos += RESPONSE_ENTRY_BYTES
        out.append(Result(head_id, batch_id, _half(view, pos, g * d, end).reshape(g, d)))
        pos += 2 * g * d
    if pos != end:
        raise TruncatedFrame(f"{end - pos} stray bytes after the last entry")
    return out


def request_bytes(n_desc: int, group_size: int, head_dim: int) -> tuple[int, int]:
    """Total wire bytes and frame count for ``n_desc`` descriptors in full chunks."""
    frames = -(-n_desc // MAX_DESCRIPTORS)
    entry = REQUEST_ENTRY_BYTES + (group_size + 2) * head_dim * 2
    return frames * (HEADER_BYTES + TRAILER_BYTES) + n_desc * entry, frames


def response_bytes(n_desc: int, group_size: int, head_dim: int) -> tuple[int, int]:
    frames = -(-n_desc // MAX_DESCRIPTORS)
    entry = RESPONSE_ENTRY_BYTES + group_size * head_dim * 2
    return frames * (HEADER_BYTES + TRAILER_BYTES) + n_desc * entry, frames


# link cost model --------------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """DMA link: fixed latency, per-message setup, and a bandwidth that
    degrades for small messages (linear ramp between ``floor_size`` and
    ``small_transfer_knee``)."""

    bandwidth: float
    base_latency: float = 2e-6
    per_message_overhead: float = 5e-6
    small_transfer_knee: int = 1 << 20
    floor_size: int = 4096
    floor_fraction: float = 0.10

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if min(self.base_latency, self.per_message_overhead, self.small_transfer_knee,
               self.floor_size, self.floor_fraction) < 0:
            raise ValueError("link parameters must be >= 0")
        if self.small_transfer_knee < self.floor_size:
            raise ValueError("knee must not be below the floor size")

    def efficiency(self, message_bytes: float) -> float:
        if message_bytes >= self.small_transfer_knee:
            return 1.0
        if message_bytes <= self.floor_size:
            return self.floor_fraction
        frac = (message_bytes - self.floor_size) / (self.small_transfer_knee - self.floor_size)
        return self.floor_fraction + (1.0 - self.floor_fraction) * frac


def transfer_time(nbytes: int, msgs: int, link: LinkModel) -> float:
    """Seconds to move ``nbytes`` as ``msgs`` messages.

    The small-transfer penalty follows the size of the whole transfer; the
    cost of splitting it up is the per-message overhead.
    """
    if nbytes < 0 or msgs < 0:
        raise ValueError("bytes and msgs must be >= 0")
    t = link.base_latency + msgs * link.per_message_overhead
    if nbytes:
        t += nbytes / (link.bandwidth * link.efficiency(nbytes))
    return t
