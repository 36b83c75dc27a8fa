"""Epoch scheduling for neighbor discovery and neighbor-table maintenance.

Every epoch a node scans for one interval and then transmits a train of
advertisements; each advertisement is three identical packets sent
back-to-back on channels 37, 38, 39.  The scan sits at the start of the
epoch and listens on a single channel, rotated every epoch.

With the advertisement interval capped at half the usable scan length,
any foreign scan that overlaps the advertising train catches at least
two packets, so losing one to a collision (or to the scanner's own
anchor transmission, below) still leaves a discovery opportunity.

A node is silent while it scans, so two nodes whose epochs happen to
align could scan simultaneously, advertise simultaneously, and never
hear each other at any epoch.  To break that symmetry each node emits
one extra "anchor" advertisement inside its own scan window, at a slot
derived from its address and epoch number.  Reception is suspended for
the anchor's duration, which is why the train must offer two catchable
packets elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MS, US, ProtocolConfig

CHANNELS = (37, 38, 39)

# Anchor slot geometry: slots start at ANCHOR_BASE from scan start and
# are ANCHOR_GRANULE apart, wide enough that distinct slots can never
# shadow each other's packets across the phases the anchor must cover.
ANCHOR_BASE = 8 * MS
ANCHOR_GRANULE = 16 * MS
# Worst-case packet airtime assumed by the slot-count computation.
_PKT_BOUND = 500 * US

# Epoch starts wobble by a per-node, per-epoch offset below this bound.
# With all nodes on the same exact epoch, two advertisement trains that
# happen to align within one packet airtime would shadow each other at
# every receiver forever; the wobble re-rolls the alignment every epoch.
# Kept below the train's end-of-epoch slack so epochs never collide.
EPOCH_WOBBLE = 8 * MS


def epoch_wobble(address: int, epoch_number: int) -> int:
    """Deterministic epoch-start offset in [0, EPOCH_WOBBLE), microsecond
    granularity."""
    x = (address * 2654435761 + epoch_number * 40503) & 0xFFFFFFFF
    x ^= x >> 16
    return (x % (EPOCH_WOBBLE // US)) * US


class Infeasible(ValueError):
    """No (scan, interval) pair meets the discovery-probability target."""


def train_adv_count(cfg: ProtocolConfig) -> int:
    """Advertisements in the post-scan train: starts every A from L while
    the advertisement still ends within the epoch."""
    return (cfg.epoch - cfg.scan - cfg.adv) // cfg.adv_interval + 1


def boundary_gap(cfg: ProtocolConfig) -> int:
    """Start-to-start silence across the epoch boundary (the advertiser's
    own scan plus the train remainder)."""
    return cfg.epoch - (train_adv_count(cfg) - 1) * cfg.adv_interval


def anchor_slot_count(cfg: ProtocolConfig) -> int:
    """Number of usable anchor positions inside the scan.

    An anchor must fit inside the scan and still be receivable by a
    scanner whose window sits anywhere in this node's silent gap (widened
    by the epoch wobble in the worst case).
    """
    band = boundary_gap(cfg) + 2 * EPOCH_WOBBLE - (cfg.scan - _PKT_BOUND)
    p_max = min(
        cfg.scan - cfg.adv,
        cfg.scan - _PKT_BOUND - 2 * cfg.packet_gap - band + cfg.adv,
    )
    if p_max < ANCHOR_BASE:
        return 0
    return (p_max - ANCHOR_BASE) // ANCHOR_GRANULE + 1


def anchor_offset(cfg: ProtocolConfig, address: int, epoch_number: int) -> int | None:
    """Scan-relative start of this epoch's anchor advertisement.

    The slot walks a different residue sequence per address so that two
    nodes stuck at an unlucky relative phase stop shadowing each other
    within a few epochs.
    """
    n = anchor_slot_count(cfg)
    if n == 0:
        return None
    if n == 1:
        return ANCHOR_BASE
    stride = 1 + address % (n - 1)
    slot = (address * 7 + epoch_number * stride) % n
    return ANCHOR_BASE + slot * ANCHOR_GRANULE


@dataclass(frozen=True)
class EpochSchedule:
    """Concrete timing of one node epoch."""

    epoch_start: int
    epoch_number: int
    scan_start: int
    scan_end: int
    scan_channel: int
    adv_starts: tuple[int, ...]
    anchor_start: int | None


def scan_channel(epoch_number: int) -> int:
    return CHANNELS[epoch_number % 3]


def build_epoch_schedule(
    cfg: ProtocolConfig,
    epoch_start: int,
    epoch_number: int,
    address: int | None = None,
) -> EpochSchedule:
    """Scan at the epoch start, then the advertisement train every A.

    When an address is given, the epoch also carries the in-scan anchor
    advertisement at that node's slot for this epoch.
    """
    n = train_adv_count(cfg)
    first = epoch_start + cfg.scan
    starts = tuple(first + i * cfg.adv_interval for i in range(n))
    anchor = None
    if address is not None:
        off = anchor_offset(cfg, address, epoch_number)
        if off is not None:
            anchor = epoch_start + off
    return EpochSchedule(
        epoch_start=epoch_start,
        epoch_number=epoch_number,
        scan_start=epoch_start,
        scan_end=epoch_start + cfg.scan,
        scan_channel=scan_channel(epoch_number),
        adv_starts=starts,
        anchor_start=anchor,
    )


def packet_times(adv_start: int, packet_gap: int) -> tuple[tuple[int, int], ...]:
    """(channel, packet start) for the three packets of one advertisement."""
    return tuple((ch, adv_start + i * packet_gap) for i, ch in enumerate(CHANNELS))


def first_packet_time(rx_packet_start: int, rx_channel: int, packet_gap: int) -> int:
    """Recover the advertisement's first-packet time from any of its packets.

    The channel sequence is invariant, so the receive channel tells the
    packet's position in the sequence.
    """
    if rx_channel not in CHANNELS:
        raise ValueError(f"invalid advertising channel {rx_channel}")
    return rx_packet_start - (rx_channel - 37) * packet_gap


@dataclass
class NeighborRecord:
    address: int
    index: int
    last_heard: int
    epochs_missed: int
    cached_bitmap: int
    next_window_start: int
    last_rssi: float
    heard_this_epoch: bool = True


def update_neighbor(
    table: dict[int, NeighborRecord],
    payload,
    sender: int,
    rx_time: int,
    reference: int,
    rssi: float = 0.0,
) -> tuple[NeighborRecord, bool]:
    """Insert or refresh the record for sender; returns (record, is_new).

    reference must be the advertisement's first-packet time; the sender's
    next ranging window starts at reference + v.
    """
    window = reference + payload.v_us * US
    rec = table.get(sender)
    if rec is None:
        rec = NeighborRecord(
            address=sender,
            index=payload.sender_index,
            last_heard=rx_time,
            epochs_missed=0,
            cached_bitmap=payload.bitmap,
            next_window_start=window,
            last_rssi=rssi,
        )
        table[sender] = rec
        return rec, True
    rec.index = payload.sender_index
    rec.last_heard = rx_time
    rec.epochs_missed = 0
    rec.cached_bitmap = payload.bitmap
    rec.next_window_start = window
    rec.last_rssi = rssi
    rec.heard_this_epoch = True
    return rec, False


def expire_neighbors(
    table: dict[int, NeighborRecord], expiry_epochs: int
) -> list[NeighborRecord]:
    """Per-epoch-boundary bookkeeping: age silent neighbors, drop the dead.

    A record heard during the elapsed epoch resets its miss count; one
    that reaches the expiry count is removed and returned so its slot can
    be de-allocated at the next window end.
    """
    removed = []
    for addr in list(table):
        rec = table[addr]
        if rec.heard_this_epoch:
            rec.epochs_missed = 0
            rec.heard_this_epoch = False
        else:
            rec.epochs_missed += 1
            if rec.epochs_missed >= expiry_epochs:
                removed.append(table.pop(addr))
    return removed


# --- analytic discovery-time computation -------------------------------
#
# Mirrors the simulator's delivery rule for the two-node, collision-free
# case: a packet is received iff its full airtime lies inside the
# listener's scan, on the scan channel, and does not overlap the
# listener's own anchor transmission.  Used for exhaustive relative-phase
# sweeps that would be too slow as full event simulations.


def _epoch_packets_on_channel(cfg, boot, address, epoch_number, channel):
    """Start times of this node's packets on one channel in one epoch."""
    base = boot + epoch_number * cfg.epoch + epoch_wobble(address, epoch_number)
    off = (channel - 37) * cfg.packet_gap
    out = []
    anchor = anchor_offset(cfg, address, epoch_number)
    if anchor is not None:
        out.append(base + anchor + off)
    first = base + cfg.scan
    for i in range(train_adv_count(cfg)):
        out.append(first + i * cfg.adv_interval + off)
    return out


def first_hear_time(
    cfg: ProtocolConfig,
    listener_boot: int,
    listener_addr: int,
    speaker_boot: int,
    speaker_addr: int,
    horizon: int,
    packet_airtime: int,
) -> int | None:
    """Earliest time the listener finishes receiving any speaker packet.

    Two nodes only; returns None if nothing is received before horizon.
    """
    k = 0
    while True:
        scan_lo = listener_boot + k * cfg.epoch + epoch_wobble(listener_addr, k)
        if scan_lo >= horizon:
            return None
        scan_hi = scan_lo + cfg.scan
        ch = scan_channel(k)
        punct = anchor_offset(cfg, listener_addr, k)
        if punct is not None:
            punct_lo = scan_lo + punct
            punct_hi = punct_lo + cfg.adv
        else:
            punct_lo = punct_hi = None

        j_lo = (scan_lo - speaker_boot - 2 * cfg.epoch) // cfg.epoch
        j_hi = (scan_hi - speaker_boot) // cfg.epoch
        best = None
        for j in range(max(0, j_lo), j_hi + 1):
            for t in _epoch_packets_on_channel(cfg, speaker_boot, speaker_addr, j, ch):
                if t < scan_lo or t + packet_airtime > scan_hi:
                    continue
                if punct_lo is not None and t < punct_hi and t + packet_airtime > punct_lo:
                    continue
                done = t + packet_airtime
                if best is None or done < best:
                    best = done
        if best is not None and best <= horizon:
            return best
        k += 1


def discovery_times(
    cfg: ProtocolConfig,
    boot_a: int,
    boot_b: int,
    addr_a: int,
    addr_b: int,
    horizon: int,
    packet_airtime: int,
) -> tuple[int | None, int | None]:
    """(first time a hears b, first time b hears a)."""
    t_ab = first_hear_time(cfg, boot_a, addr_a, boot_b, addr_b, horizon, packet_airtime)
    t_ba = first_hear_time(cfg, boot_b, addr_b, boot_a, addr_a, horizon, packet_airtime)
    return t_ab, t_ba


# --- parameter optimizer ------------------------------------------------

_MC_TRIALS = 10_000
_MC_SEED = 0x5EED


def _discovery_probability(
    scan: int,
    interval: int,
    adv: int,
    packet_airtime: int,
    density: int,
    trials: int = _MC_TRIALS,
) -> float:
    """Monte Carlo estimate of one-epoch unidirectional discovery.

    Advertisers are modelled as independent periodic processes with
    uniform phases.  An advertisement is caught if it falls fully inside
    the scan; it is lost if any other node's advertisement overlaps it on
    the same channel, which for identical channel sequences means the
    advertisement starts are closer than one packet airtime.
    """
    rng = np.random.default_rng(_MC_SEED)
    window = scan - adv
    max_starts = window // interval + 1
    phases = rng.uniform(0.0, interval, size=trials)
    if density <= 1:
        return 1.0
    others = rng.uniform(0.0, interval, size=(trials, density - 1))
    discovered = np.zeros(trials, dtype=bool)
    for i in range(max_starts):
        s = phases + i * interval
        valid = s <= window
        d = np.abs(((s[:, None] - others) + interval / 2) % interval - interval / 2)
        clean = (d >= packet_airtime).all(axis=1)
        discovered |= valid & clean
    return float(discovered.mean())


def optimize(
    target_latency: int,
    density: int,
    adv: int = 5 * MS,
    packet_airtime: int = 304 * US,
    target_probability: float = 0.95,
) -> tuple[int, int, int]:
    """Pick (epoch, scan, adv_interval) minimizing the BLE duty cycle.

    The epoch equals the requested latency.  Candidates are filtered on
    an estimated one-epoch discovery probability of at least
    target_probability at the given neighborhood density; the estimate
    uses a fixed-seed Monte Carlo so results are reproducible.
    """
    if target_latency < 1_000 * MS:
        raise ValueError("target latency must be at least 1 s")
    if density < 1:
        raise ValueError("density must be at least 1")
    epoch = target_latency
    best = None
    for scan_ms in range(20, min(600, epoch // (2 * MS)) + 1, 10):
        scan = scan_ms * MS
        usable = scan - adv
        if usable <= 0:
            continue
        for frac in (1.0, 0.75, 0.5, 0.35, 0.25):
            interval = int(usable * frac)
            if interval <= 0:
                continue
            n_adv = (epoch - scan - adv) // interval + 1
            duty = (scan + n_adv * adv) / epoch
            if best is not None and duty >= best[0]:
                continue
            p = _discovery_probability(scan, interval, adv, packet_airtime, density)
            if p >= target_probability:
                best = (duty, epoch, scan, interval)
    if best is None:
        raise Infeasible(
            f"no (scan, interval) reaches discovery probability "
            f"{target_probability} at density {density}"
        )
    return best[1], best[2], best[3]
