import json

import pytest
from hypothesis import given, strategies as st

from proxsim import core
from proxsim.core import (
    MS,
    SEC,
    US,
    ConstraintViolation,
    ProtocolConfig,
    config_to_json_dict,
    format_address,
    parse_address,
    preset,
    preset_names,
    protocol_config_from_json_dict,
    validate_config,
)


def spec_example_config(**overrides):
    base = dict(
        epoch=2 * SEC,
        scan=170 * MS,
        adv=5 * MS,
        adv_interval=160 * MS,
        packet_gap=400 * US,
        ranging_period=2 * SEC,
        jitter=100 * MS,
        slot=4 * MS,
    )
    base.update(overrides)
    return ProtocolConfig(**base)


class TestValidateConfig:
    def test_valid_example(self):
        # E=2s, L=170ms, b=5ms, A=160ms, R=4ms, U=2s, J=100ms: every
        # inequality checks out by hand (5<170<2000, 160<=165, 100<1000).
        validate_config(spec_example_config())

    def test_scan_not_shorter_than_epoch(self):
        with pytest.raises(ConstraintViolation) as e:
            validate_config(spec_example_config(scan=2 * SEC))
        assert e.value.field == "scan"

    def test_adv_interval_exceeds_scan_minus_adv(self):
        with pytest.raises(ConstraintViolation) as e:
            validate_config(spec_example_config(adv_interval=170 * MS))
        assert e.value.field == "adv_interval"

    def test_jitter_bound(self):
        with pytest.raises(ConstraintViolation) as e:
            validate_config(spec_example_config(jitter=SEC))
        assert e.value.field == "jitter"

    def test_zero_slot(self):
        with pytest.raises(ConstraintViolation) as e:
            validate_config(spec_example_config(slot=0))
        assert e.value.field == "slot"


class TestPresets:
    def test_2s_epoch_and_ranging_period(self):
        cfg = preset("2s")
        assert cfg.epoch == 2 * SEC
        assert cfg.ranging_period == 2 * SEC

    def test_30s_epoch(self):
        assert preset("30s").epoch == 30 * SEC

    @pytest.mark.parametrize("name", preset_names())
    def test_presets_self_validate(self, name):
        validate_config(preset(name))

    def test_standby_default_five_minutes(self):
        assert preset("2s").standby == 5 * 60 * SEC

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            preset("7s")


class TestAddress:
    def test_format_roundtrip(self):
        assert format_address(0x2A) == "00:00:00:00:00:2a"
        assert parse_address("00:00:00:00:00:2a") == 0x2A
        assert parse_address(17) == 17

    @given(st.integers(0, core.MAX_ADDRESS), st.integers(0, core.MAX_ADDRESS))
    def test_total_order_matches_byte_order(self, a, b):
        # Byte-lexicographic comparison of the 6-byte form must agree with
        # integer order, and exactly one of <, ==, > holds.
        byte_cmp = a.to_bytes(6, "big") < b.to_bytes(6, "big")
        assert byte_cmp == (a < b)
        assert (a < b) + (a == b) + (b < a) == 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            format_address(1 << 48)
        with pytest.raises(ValueError):
            parse_address("00:00:00:2a")


class TestSpanArithmetic:
    @given(st.integers(0, 10**15), st.integers(0, 10**15), st.integers(0, 10**15))
    def test_addition_associative_commutative(self, a, b, c):
        assert (a + b) + c == a + (b + c)
        assert a + b == b + a

    def test_no_silent_wrap(self):
        big = 10**15
        assert big + big == 2 * 10**15


class TestConfigFiles:
    def test_round_trip(self):
        cfg = preset("2s")
        data = config_to_json_dict(cfg)
        assert data["epoch"] == 2_000_000  # integer microseconds
        assert protocol_config_from_json_dict(data) == cfg

    def test_preset_reference_with_override(self):
        cfg = protocol_config_from_json_dict(
            {"preset": "2s", "crowd_threshold": 3}
        )
        assert cfg.epoch == 2 * SEC
        assert cfg.crowd_threshold == 3

    def test_unknown_field_rejected(self):
        with pytest.raises(ConstraintViolation):
            protocol_config_from_json_dict({"preset": "2s", "bogus": 1})

    def test_non_integer_duration_rejected(self):
        data = config_to_json_dict(preset("2s"))
        data["scan"] = 170000.5
        with pytest.raises(ConstraintViolation):
            protocol_config_from_json_dict(data)

    def test_load_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(config_to_json_dict(preset("15s"))))
        assert core.load_protocol_config(path) == preset("15s")
