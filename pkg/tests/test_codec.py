import numpy as np
import pytest
from hypothesis import given, strategies as st

from proxsim import codec
from proxsim.codec import (
    NO_CONFLICT,
    AdvPayload,
    BadLength,
    BadMagic,
    FieldOutOfRange,
    InvalidPayload,
    bitmap_from_indexes,
    decode,
    encode,
    free_indexes,
    slot_ordinal,
)

# Conformance vectors pinning the wire layout (big-endian integers,
# LSB-first bitmap bits within each byte).
GOLDEN = [
    (
        AdvPayload(sender_index=0, v_us=0, bitmap=0, conflict_index=0, flags=0),
        "4a41" + "00" * 20,
    ),
    (
        AdvPayload(sender_index=2, v_us=0, bitmap=bitmap_from_indexes([2, 6]),
                   conflict_index=NO_CONFLICT, flags=0),
        "4a41" + "02" + "00000000" + "ff" + "00" + "44" + "00" * 12,
    ),
    (
        AdvPayload(sender_index=103, v_us=500_000,
                   bitmap=bitmap_from_indexes([0, 103]),
                   conflict_index=7, flags=codec.FLAG_INHIBITOR | codec.FLAG_CROWD),
        "4a41" + "67" + "0007a120" + "07" + "03" + "01" + "00" * 11 + "80",
    ),
]


payloads = st.builds(
    AdvPayload,
    sender_index=st.integers(0, 103),
    v_us=st.integers(0, 0xFFFFFFFF),
    bitmap=st.integers(0, (1 << 104) - 1),
    conflict_index=st.one_of(st.just(NO_CONFLICT), st.integers(0, 103)),
    flags=st.integers(0, 3),
)


class TestEncode:
    @pytest.mark.parametrize("payload,hex_bytes", GOLDEN)
    def test_golden_vectors(self, payload, hex_bytes):
        assert encode(payload).hex() == hex_bytes
        assert decode(bytes.fromhex(hex_bytes)) == payload

    def test_length_is_22(self):
        for payload, _ in GOLDEN:
            assert len(encode(payload)) == 22 <= 24

    @given(payloads)
    def test_length_constant(self, p):
        assert len(encode(p)) == 22

    def test_bitmap_bits_2_and_6_lsb_first(self):
        # bits 2 and 6 of byte 0: 0b01000100
        raw = encode(AdvPayload(2, 0, bitmap_from_indexes([2, 6])))
        assert raw[9] == 0x44
        assert set(raw[10:22]) == {0}

    def test_invalid_payload_rejected(self):
        with pytest.raises(InvalidPayload):
            encode(AdvPayload(sender_index=104, v_us=0, bitmap=0))
        with pytest.raises(InvalidPayload):
            encode(AdvPayload(0, 0, bitmap=1 << 104))
        with pytest.raises(InvalidPayload):
            encode(AdvPayload(0, 0, 0, flags=0x04))


class TestDecode:
    def test_round_trip_1000_random_payloads(self):
        rng = np.random.default_rng(0xC0DEC)
        for _ in range(1000):
            p = AdvPayload(
                sender_index=int(rng.integers(0, 104)),
                v_us=int(rng.integers(0, 1 << 32)),
                bitmap=int.from_bytes(rng.bytes(13), "little"),
                conflict_index=(int(rng.integers(0, 104))
                                if rng.random() < 0.5 else NO_CONFLICT),
                flags=int(rng.integers(0, 4)),
            )
            assert decode(encode(p)) == p

    @given(payloads)
    def test_round_trip(self, p):
        assert decode(encode(p)) == p

    def test_bad_length(self):
        with pytest.raises(BadLength):
            decode(b"\x4a\x41" + b"\x00" * 19)

    def test_bad_magic(self):
        raw = bytearray(encode(GOLDEN[0][0]))
        raw[0] = 0x4B
        with pytest.raises(BadMagic):
            decode(bytes(raw))

    def test_sender_index_out_of_range(self):
        raw = bytearray(encode(GOLDEN[0][0]))
        raw[2] = 0xD0  # 208 >= 104
        with pytest.raises(FieldOutOfRange):
            decode(bytes(raw))

    def test_reserved_flags_rejected(self):
        raw = bytearray(encode(GOLDEN[0][0]))
        raw[8] = 0x10
        with pytest.raises(FieldOutOfRange):
            decode(bytes(raw))

    def test_decode_of_bitmap_example_popcount(self):
        p = decode(encode(AdvPayload(2, 0, bitmap_from_indexes([2, 6]))))
        assert p.bitmap.bit_count() == 2


class TestSlotOrdinal:
    def test_bits_2_and_6(self):
        bm = bitmap_from_indexes([2, 6])
        assert slot_ordinal(bm, 2) == 1
        assert slot_ordinal(bm, 6) == 2

    def test_unset_bit(self):
        assert slot_ordinal(bitmap_from_indexes([2, 6]), 5) is None

    def test_full_bitmap(self):
        bm = bitmap_from_indexes(range(104))
        assert slot_ordinal(bm, 103) == 104

    def test_index_out_of_range(self):
        with pytest.raises(FieldOutOfRange):
            slot_ordinal(0, 104)

    @given(st.integers(0, (1 << 104) - 1))
    def test_strictly_increasing_and_max_is_popcount(self, bm):
        ordinals = [slot_ordinal(bm, x) for x in range(104) if bm >> x & 1]
        assert ordinals == sorted(ordinals)
        assert len(set(ordinals)) == len(ordinals)
        if ordinals:
            assert max(ordinals) == bm.bit_count()


class TestFreeIndexes:
    def test_nothing_allocated(self):
        assert free_indexes(0, [], set()) == set(range(104))

    def test_bitwise_or_example(self):
        got = free_indexes(
            bitmap_from_indexes([2, 6]), [bitmap_from_indexes([6, 7])], {9}
        )
        assert got == set(range(104)) - {2, 6, 7, 9}

    def test_saturated_neighborhood(self):
        assert free_indexes(bitmap_from_indexes(range(104)), [], set()) == set()

    @given(
        st.integers(0, (1 << 104) - 1),
        st.lists(st.integers(0, (1 << 104) - 1), max_size=4),
        st.sets(st.integers(0, 103), max_size=10),
    )
    def test_disjoint_from_inputs(self, own, cached, in_use):
        got = free_indexes(own, cached, in_use)
        for x in got:
            assert not own >> x & 1
            assert all(not bm >> x & 1 for bm in cached)
        assert not got & in_use
