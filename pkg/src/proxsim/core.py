"""Shared vocabulary: time base, identifiers, protocol and radio configuration.

All simulated time is counted in integer ticks of 1 nanosecond.  Config
files express durations in integer microseconds; they are converted to
ticks on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

# Time units, in ticks (1 tick = 1 ns of simulated time).
US = 1_000
MS = 1_000_000
SEC = 1_000_000_000

# Conventional speed of radio propagation in air, m/s.  Used to convert
# UWB time-of-flight to distance.
SPEED_OF_LIGHT_AIR = 299_702_547.0

# Distance covered by light in one tick, meters.
METERS_PER_TICK = SPEED_OF_LIGHT_AIR * 1e-9

# Node addresses model 6-byte radio MAC addresses.
ADDRESS_BITS = 48
MAX_ADDRESS = (1 << ADDRESS_BITS) - 1

# Width of the slot-allocation bitmap; node indexes live in [0, 104).
INDEX_SPACE = 104


def format_address(addr: int) -> str:
    """Render a 48-bit address as colon-separated hex, e.g. 00:00:00:00:00:2a."""
    if not 0 <= addr <= MAX_ADDRESS:
        raise ValueError(f"address out of range: {addr}")
    raw = addr.to_bytes(6, "big")
    return ":".join(f"{x:02x}" for x in raw)


def parse_address(text: str | int) -> int:
    """Accept either an integer or aa:bb:cc:dd:ee:ff notation."""
    if isinstance(text, int):
        if not 0 <= text <= MAX_ADDRESS:
            raise ValueError(f"address out of range: {text}")
        return text
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"malformed address: {text!r}")
    return int.from_bytes(bytes(int(p, 16) for p in parts), "big")


class ConstraintViolation(ValueError):
    """A configuration field violates one of its invariants."""

    def __init__(self, field_name: str, reason: str):
        self.field = field_name
        self.reason = reason
        super().__init__(f"{field_name}: {reason}")


@dataclass
class ProtocolConfig:
    """Protocol timing parameters.  All durations in ticks.

    epoch:     discovery period (one scan plus a train of advertisements)
    scan:      listen window at the start of each epoch
    adv:       duration of one advertisement (3 packets plus gaps)
    adv_interval: start-to-start spacing of advertisements in the train
    packet_gap: start-to-start spacing of the 3 packets of one advertisement
    ranging_period: spacing of a node's own ranging windows
    jitter:    half-width of the uniform jitter applied to each period
    slot:      per-neighbor ranging slot size
    neighbor_expiry_epochs: silent epochs after which a neighbor is dropped
    standby:   inhibitor-triggered standby duration
    crowd_threshold: neighbor count above which the crowd alarm raises
    alert_distance_m: real-time proximity alert threshold
    """

    epoch: int
    scan: int
    adv: int
    adv_interval: int
    packet_gap: int
    ranging_period: int
    jitter: int
    slot: int
    neighbor_expiry_epochs: int = 3
    standby: int = 5 * 60 * SEC
    crowd_threshold: int = 10
    alert_distance_m: float = 2.0

    _DURATION_FIELDS = (
        "epoch", "scan", "adv", "adv_interval", "packet_gap",
        "ranging_period", "jitter", "slot", "standby",
    )


@dataclass
class PhyConfig:
    """Radio/physical model parameters.

    Ranges use a unit-disk model.  RSSI follows log-distance path loss
    with optional shadowing.  Durations in ticks, distances in meters.
    """

    ble_range_m: float = 25.0
    uwb_range_m: float = 30.0
    uwb_noise_sigma_m: float = 0.05
    rssi_p0_dbm: float = -55.0
    rssi_path_loss_n: float = 2.0
    rssi_shadow_sigma_db: float = 4.0
    propagation_speed_m_s: float = SPEED_OF_LIGHT_AIR
    clock_drift_ppm: float = 10.0
    loss_probability: float = 0.0
    ble_packet_airtime: int = 304 * US
    uwb_packet_airtime: int = 200 * US
    uwb_guard: int = 200 * US
    uwb_reply_delay: int = 300 * US
    uwb_wake_lead: int = 5_500 * US

    _DURATION_FIELDS = (
        "ble_packet_airtime", "uwb_packet_airtime", "uwb_guard",
        "uwb_reply_delay", "uwb_wake_lead",
    )

    def validate(self) -> None:
        if self.uwb_noise_sigma_m < 0:
            raise ConstraintViolation("uwb_noise_sigma_m", "must be >= 0")
        if self.ble_range_m <= 0:
            raise ConstraintViolation("ble_range_m", "must be > 0")
        if self.uwb_range_m <= 0:
            raise ConstraintViolation("uwb_range_m", "must be > 0")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ConstraintViolation("loss_probability", "must be in [0, 1]")


def validate_config(cfg: ProtocolConfig) -> None:
    """Raise ConstraintViolation naming the first violated constraint.

    The scheduling invariants guarantee that a full scan always
    overlaps at least one advertisement of a neighbor's train:
    b < L < E and A <= L - b.
    """
    if cfg.adv <= 0:
        raise ConstraintViolation("adv", "advertisement duration must be > 0")
    if cfg.scan <= cfg.adv:
        raise ConstraintViolation("scan", "scan must be longer than one advertisement")
    if cfg.scan >= cfg.epoch:
        raise ConstraintViolation("scan", "scan must be shorter than the epoch")
    if cfg.adv_interval <= 0:
        raise ConstraintViolation("adv_interval", "advertisement interval must be > 0")
    if cfg.adv_interval > cfg.scan - cfg.adv:
        raise ConstraintViolation(
            "adv_interval",
            "advertisement interval must not exceed scan - adv "
            "(otherwise a scan can straddle the train without a full advertisement)",
        )
    if cfg.packet_gap <= 0:
        raise ConstraintViolation("packet_gap", "packet gap must be > 0")
    if 2 * cfg.packet_gap >= cfg.adv:
        raise ConstraintViolation("packet_gap", "3-packet sequence must fit in adv")
    if cfg.slot <= 0:
        raise ConstraintViolation("slot", "slot size must be > 0")
    if cfg.ranging_period <= 0:
        raise ConstraintViolation("ranging_period", "ranging period must be > 0")
    if cfg.jitter < 0:
        raise ConstraintViolation("jitter", "jitter must be >= 0")
    if cfg.jitter >= cfg.ranging_period // 2:
        raise ConstraintViolation("jitter", "jitter must be < ranging_period / 2")
    if cfg.neighbor_expiry_epochs < 1:
        raise ConstraintViolation("neighbor_expiry_epochs", "must be >= 1")
    if cfg.standby <= 0:
        raise ConstraintViolation("standby", "standby duration must be > 0")
    if cfg.crowd_threshold < 0:
        raise ConstraintViolation("crowd_threshold", "must be >= 0")
    if cfg.alert_distance_m <= 0:
        raise ConstraintViolation("alert_distance_m", "must be > 0")


# Per-latency-class defaults.  Scan length and advertisement interval are
# chosen so that (a) the interval is at most half the usable scan length,
# guaranteeing two catchable packets per overlapping scan, and (b) the
# resulting BLE duty cycles are consistent with the measured average
# currents the energy model is calibrated against.
_PRESETS = {
    "2s": dict(epoch=2 * SEC, scan=170 * MS, adv_interval=82 * MS, jitter=5 * MS),
    "15s": dict(epoch=15 * SEC, scan=280 * MS, adv_interval=134 * MS, jitter=37 * MS),
    "30s": dict(epoch=30 * SEC, scan=392 * MS, adv_interval=188 * MS, jitter=75 * MS),
}


def preset(latency_class: str) -> ProtocolConfig:
    """Return a validated configuration for one of the named latency classes.

    The epoch equals the detection latency; the ranging period equals the
    epoch (one ranging window per discovery epoch).
    """
    if latency_class not in _PRESETS:
        raise ValueError(f"unknown latency class {latency_class!r}; "
                         f"expected one of {sorted(_PRESETS)}")
    p = _PRESETS[latency_class]
    cfg = ProtocolConfig(
        epoch=p["epoch"],
        scan=p["scan"],
        adv=5 * MS,
        adv_interval=p["adv_interval"],
        packet_gap=400 * US,
        ranging_period=p["epoch"],
        jitter=p["jitter"],
        slot=4 * MS,
    )
    validate_config(cfg)
    return cfg


def preset_names() -> list[str]:
    return list(_PRESETS)


def _to_us(ticks: int) -> int:
    if ticks % US:
        raise ValueError(f"duration {ticks} ticks is not a whole microsecond")
    return ticks // US


def config_to_json_dict(cfg: ProtocolConfig | PhyConfig) -> dict:
    """Serialize to the file representation (durations in integer us)."""
    out = asdict(cfg)
    for name in cfg._DURATION_FIELDS:
        out[name] = _to_us(out[name])
    return out


def _config_from_json_dict(cls, data: dict, where: str):
    valid = {f.name for f in fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ConstraintViolation(where, f"unknown fields: {sorted(unknown)}")
    kwargs = dict(data)
    for name in cls._DURATION_FIELDS:
        if name in kwargs:
            v = kwargs[name]
            if not isinstance(v, int):
                raise ConstraintViolation(name, "durations must be integer microseconds")
            kwargs[name] = v * US
    return cls(**kwargs)


def protocol_config_from_json_dict(data: dict) -> ProtocolConfig:
    """Build a ProtocolConfig from its file form.

    Accepts either the full field set (durations in us) or
    {"preset": "<class>", ...overrides...}.
    """
    data = dict(data)
    name = data.pop("preset", None)
    if name is not None:
        cfg = preset(name)
        if data:
            base = config_to_json_dict(cfg)
            base.update(data)
            cfg = _config_from_json_dict(ProtocolConfig, base, "protocol")
        validate_config(cfg)
        return cfg
    cfg = _config_from_json_dict(ProtocolConfig, data, "protocol")
    validate_config(cfg)
    return cfg


def phy_config_from_json_dict(data: dict) -> PhyConfig:
    phy = _config_from_json_dict(PhyConfig, data, "phy")
    phy.validate()
    return phy


def load_protocol_config(path) -> ProtocolConfig:
    with open(path) as f:
        return protocol_config_from_json_dict(json.load(f))
