"""Advertisement payload wire format and slot-bitmap algebra.

The payload is a fixed 22-byte layout (within the 24-byte budget of a
single advertisement):

    offset  size  field
    0       2     magic, constant 0x4A41
    2       1     sender index (0..103)
    3       4     v: microseconds from this advertisement's first packet
                  to the start of the sender's next ranging window,
                  big-endian
    7       1     conflict report: an index value observed on two distinct
                  neighbors, or 0xFF for none
    8       1     flags: bit0 = inhibitor, bit1 = crowd alarm, rest zero
    9       13    slot bitmap, 104 bits

Bitmap bit x lives at bit (x mod 8) of byte floor(x/8), LSB first within
a byte; bit x set means a ranging slot is allocated for the node holding
index x.  Bitmaps are handled as plain ints below (bit x = 1 << x).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .core import INDEX_SPACE

MAGIC = 0x4A41
NO_CONFLICT = 0xFF
PAYLOAD_LEN = 22

FLAG_INHIBITOR = 0x01
FLAG_CROWD = 0x02
_FLAGS_RESERVED = 0xFC

BITMAP_MASK = (1 << INDEX_SPACE) - 1

_STRUCT = struct.Struct(">HBIBB13s")


class CodecError(ValueError):
    pass


class InvalidPayload(CodecError):
    pass


class BadLength(CodecError):
    pass


class BadMagic(CodecError):
    pass


class FieldOutOfRange(CodecError):
    pass


def bitmap_from_indexes(indexes) -> int:
    bm = 0
    for x in indexes:
        if not 0 <= x < INDEX_SPACE:
            raise FieldOutOfRange(f"index {x} out of range")
        bm |= 1 << x
    return bm


def bitmap_indexes(bm: int) -> list[int]:
    """Set bit positions in ascending order."""
    return [x for x in range(INDEX_SPACE) if bm >> x & 1]


@dataclass(frozen=True)
class AdvPayload:
    sender_index: int
    v_us: int
    bitmap: int
    conflict_index: int = NO_CONFLICT
    flags: int = 0

    def check(self) -> None:
        if not 0 <= self.sender_index < INDEX_SPACE:
            raise InvalidPayload(f"sender_index {self.sender_index} out of range")
        if not 0 <= self.v_us <= 0xFFFFFFFF:
            raise InvalidPayload(f"v_us {self.v_us} does not fit in 4 bytes")
        if self.conflict_index != NO_CONFLICT and not 0 <= self.conflict_index < INDEX_SPACE:
            raise InvalidPayload(f"conflict_index {self.conflict_index} out of range")
        if self.flags & _FLAGS_RESERVED:
            raise InvalidPayload("reserved flag bits must be zero")
        if not 0 <= self.bitmap <= BITMAP_MASK:
            raise InvalidPayload("bitmap wider than 104 bits")

    @property
    def inhibitor(self) -> bool:
        return bool(self.flags & FLAG_INHIBITOR)

    @property
    def crowd_alarm(self) -> bool:
        return bool(self.flags & FLAG_CROWD)


def encode(p: AdvPayload) -> bytes:
    """Serialize to the fixed 22-byte wire form."""
    p.check()
    return _STRUCT.pack(
        MAGIC,
        p.sender_index,
        p.v_us,
        p.conflict_index,
        p.flags,
        p.bitmap.to_bytes(13, "little"),
    )


def decode(raw: bytes) -> AdvPayload:
    """Parse and validate a received payload; inverse of encode on its image."""
    if len(raw) != PAYLOAD_LEN:
        raise BadLength(f"expected {PAYLOAD_LEN} bytes, got {len(raw)}")
    magic, sender_index, v_us, conflict_index, flags, bitmap_raw = _STRUCT.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic 0x{magic:04X}")
    if sender_index >= INDEX_SPACE:
        raise FieldOutOfRange(f"sender_index {sender_index} out of range")
    if conflict_index != NO_CONFLICT and conflict_index >= INDEX_SPACE:
        raise FieldOutOfRange(f"conflict_index {conflict_index} out of range")
    if flags & _FLAGS_RESERVED:
        raise FieldOutOfRange(f"reserved flag bits set: 0x{flags:02X}")
    return AdvPayload(
        sender_index=sender_index,
        v_us=v_us,
        bitmap=int.from_bytes(bitmap_raw, "little"),
        conflict_index=conflict_index,
        flags=flags,
    )


def slot_ordinal(bitmap: int, idx: int) -> int | None:
    """Position of index idx's slot within the window, counting from 1.

    The slot number is the ordinal of the set bit: 1 + number of set bits
    below idx.  None if idx has no slot in this bitmap.
    """
    if not 0 <= idx < INDEX_SPACE:
        raise FieldOutOfRange(f"index {idx} out of range")
    if not bitmap >> idx & 1:
        return None
    return 1 + (bitmap & ((1 << idx) - 1)).bit_count()


def free_indexes(own: int, cached, in_use_sender_indexes) -> set[int]:
    """Index values unused anywhere in the known neighborhood.

    ORs the node's own schedule with every cached neighbor bitmap and
    removes indexes currently claimed by neighbors as their sender index.
    """
    used = own
    for bm in cached:
        used |= bm
    out = {x for x in range(INDEX_SPACE) if not used >> x & 1}
    return out - set(in_use_sender_indexes)
