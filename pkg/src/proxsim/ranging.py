"""Ranging-window scheduling and single-sided two-way-ranging math.

A node that owns a window acts as the responder; each neighbor with an
allocated slot initiates one POLL/RESPONSE exchange in its own slot.
The owner's radio must leave deep sleep ahead of the window (the wake
lead is a radio property, see PhyConfig.uwb_wake_lead).
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import METERS_PER_TICK


class MalformedTimestamps(ValueError):
    pass


@dataclass(frozen=True)
class TwrTimestamps:
    """The four timestamps of one exchange.

    t1/t4 are POLL transmit and RESPONSE receive on the initiator's
    clock; t2/t3 are POLL receive and RESPONSE transmit on the
    responder's clock.  Values may be sub-tick (float) in test harnesses.
    """

    t1: float
    t2: float
    t3: float
    t4: float


@dataclass(frozen=True)
class RangeSample:
    initiator: int
    responder: int
    distance_m: float
    time: int
    success: bool
    clamped: bool = False


def sstwr_distance(ts: TwrTimestamps, c_m_s: float) -> tuple[float, bool]:
    """Distance from one POLL/RESPONSE exchange.

    Time of flight is half the difference between the initiator's round
    trip and the responder's reply delay; distance is ToF times the
    propagation speed.  A negative ToF (a noise artifact) is clamped to
    zero and flagged rather than rejected, so sample streams survive
    heavy noise.  Returns (meters, clamped).
    """
    if ts.t4 <= ts.t1:
        raise MalformedTimestamps("t4 must be after t1")
    if ts.t3 < ts.t2:
        raise MalformedTimestamps("t3 must not precede t2")
    tof_ticks = ((ts.t4 - ts.t1) - (ts.t3 - ts.t2)) / 2.0
    if tof_ticks < 0:
        return 0.0, True
    return tof_ticks * c_m_s * 1e-9, False


def schedule_next_window(now: int, period: int, jitter: int, rng) -> int:
    """Start of the node's next ranging window: now + period +- jitter.

    The jitter draw is uniform over [-jitter, +jitter] from the node's
    own generator, so two nodes with equal periods but different seeds
    drift apart instead of overlapping persistently.
    """
    if jitter == 0:
        return now + period
    return now + period + int(rng.integers(-jitter, jitter + 1))


def allocate_slots(current: int, newly_discovered, departed) -> int:
    """Recompute the slot bitmap at a window end.

    Departed indexes lose their bit, newly discovered ones gain it;
    re-adding an already-present index is a no-op.
    """
    bm = current
    for idx in departed:
        bm &= ~(1 << idx)
    for idx in newly_discovered:
        bm |= 1 << idx
    return bm


def responder_slot_start(window_start: int, ordinal: int, slot: int) -> int:
    """Start of the ordinal-th slot (1-based) within a window."""
    if ordinal < 1:
        raise ValueError("slot ordinal counts from 1")
    return window_start + (ordinal - 1) * slot


def window_duration(bitmap: int, slot: int) -> int:
    """Window length grows linearly with the number of allocated slots."""
    return bitmap.bit_count() * slot


def synthesize_timestamps(
    tof_ticks: float,
    poll_tx: int,
    reply_delay: int,
    drift_initiator: float,
    drift_responder: float,
    sub_tick: bool = False,
) -> TwrTimestamps:
    """Build the four clock readings for an exchange.

    Real-time event positions come from the (possibly noisy) one-way
    time of flight; each side then reads them on its own drifting clock.
    The responder aims for the configured reply delay on its own clock,
    so its real turnaround is reply_delay / (1 + drift_responder).
    Integer-tick readings quantize the result; sub_tick keeps floats for
    exact-arithmetic checks.
    """
    d_i = 1.0 + drift_initiator
    d_r = 1.0 + drift_responder
    poll_rx = poll_tx + tof_ticks
    resp_tx = poll_rx + reply_delay / d_r
    resp_rx = resp_tx + tof_ticks

    def reading(t_real: float, rate: float) -> float:
        t = t_real * rate
        return t if sub_tick else round(t)

    return TwrTimestamps(
        t1=reading(poll_tx, d_i),
        t2=reading(poll_rx, d_r),
        t3=reading(resp_tx, d_r),
        t4=reading(resp_rx, d_i),
    )


def distance_to_tof_ticks(distance_m: float) -> float:
    return distance_m / METERS_PER_TICK
