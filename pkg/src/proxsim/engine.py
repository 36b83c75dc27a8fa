"""Per-node protocol state machine.

Ties discovery and ranging together: payload construction, index
conflict resolution, ranging-window placement, slot commitments toward
neighbors' windows, inhibitor standby, crowd detection, and proximity
alerts.

The engine is a pure transition machine: every input method returns a
list of action tuples for the caller (the simulator, or a test) to act
on.  Action kinds:

    ("log", event_type, details)
    ("window", wake_time, start, end)          schedule own window
    ("commit", owner, slot_start, ordinal, window_start)
    ("standby_until", t)                        radios off until t
    ("scan_only", )                             run one detection scan
    ("resume", )                                back to normal epochs
    ("alert", peer, distance_m)
"""

from __future__ import annotations

from . import codec, ranging
from .codec import AdvPayload, NO_CONFLICT
from .core import INDEX_SPACE, MS, US, PhyConfig, ProtocolConfig
from .discovery import expire_neighbors, first_packet_time, update_neighbor

ACTIVE = "ACTIVE"
STANDBY = "STANDBY"
SCAN_ONLY = "SCAN_ONLY"

# Safety margin added around predicted neighbor windows when placing our
# own, and between our window and the radio wake lead.
_DODGE_MARGIN = 1 * MS


class IndexSpaceExhausted(RuntimeError):
    """More than 104 mutually visible index claims; no index is free."""


class TagEngine:
    def __init__(
        self,
        address: int,
        cfg: ProtocolConfig,
        phy: PhyConfig,
        rng,
        init_index: int | None = None,
    ):
        self.address = address
        self.cfg = cfg
        self.phy = phy
        self.rng = rng
        if init_index is None:
            init_index = int(rng.integers(0, INDEX_SPACE))
        self.my_index = init_index
        self.mode = ACTIVE
        self.table = {}
        self.bitmap = 0
        self.next_window_start: int | None = None
        self.window_end: int | None = None
        self.prev_window_start: int | None = None
        self.epoch_count = 0
        self.crowd_alarm = False
        self.standby_until: int | None = None
        self.inhibitor_seen_in_scan = False
        # Radio commitments [start, end) (own windows and initiator slots).
        self.bookings: list[tuple[int, int]] = []
        # One pending initiation per window owner.
        self.planned: dict[int, tuple[int, int, int]] = {}
        self.last_alert_epoch: dict[int, int] = {}
        self.skipped_busy = 0
        self.index_changes = 0
        # Incremental view of neighbor index usage: how many table entries
        # claim each index, and which indexes are claimed more than once.
        self.index_counts: dict[int, int] = {}
        self.duplicated: set[int] = set()
        self._payload_cache: tuple[int, AdvPayload] | None = None

    # -- payloads ---------------------------------------------------------

    def make_payload(self, adv_first_packet_time: int) -> AdvPayload | None:
        """Advertisement content at the given first-packet time.

        v counts down to the next ranging window from the first packet of
        this advertisement and saturates at zero once the window has
        begun.  Only transmitted while in normal operation.  One payload
        is built per advertisement (all of its packets, and every
        receiver, see the same bytes).
        """
        if self.mode != ACTIVE:
            return None
        if self._payload_cache is not None and \
                self._payload_cache[0] == adv_first_packet_time:
            return self._payload_cache[1]
        if self.next_window_start is None:
            v_us = 0
        else:
            v_us = max(0, (self.next_window_start - adv_first_packet_time) // US)
        flags = codec.FLAG_CROWD if self.crowd_alarm else 0
        payload = AdvPayload(
            sender_index=self.my_index,
            v_us=min(v_us, 0xFFFFFFFF),
            bitmap=self.bitmap,
            conflict_index=min(self.duplicated) if self.duplicated else NO_CONFLICT,
            flags=flags,
        )
        self._payload_cache = (adv_first_packet_time, payload)
        return payload

    def _count_add(self, idx: int) -> bool:
        """Track one more claim of idx; True if it just became duplicated."""
        n = self.index_counts.get(idx, 0) + 1
        self.index_counts[idx] = n
        if n == 2:
            self.duplicated.add(idx)
            return True
        return False

    def _count_remove(self, idx: int) -> None:
        n = self.index_counts[idx] - 1
        if n == 0:
            del self.index_counts[idx]
        else:
            self.index_counts[idx] = n
        if n < 2:
            self.duplicated.discard(idx)

    # -- receive path -----------------------------------------------------

    def heard_advertisement(
        self,
        now: int,
        sender: int,
        payload: AdvPayload,
        rx_channel: int,
        rx_packet_start: int,
        rssi: float,
    ) -> list:
        actions = []
        if self.mode == STANDBY:
            return actions
        if payload.inhibitor:
            # Inhibitors are not ranging participants; their presence just
            # sends us to standby (from normal operation) or keeps us
            # there (from the detection scan).
            return self._enter_standby(now)
        if self.mode == SCAN_ONLY:
            return actions

        reference = first_packet_time(rx_packet_start, rx_channel, self.cfg.packet_gap)
        old = self.table.get(sender)
        old_index = old.index if old is not None else None
        rec, is_new = update_neighbor(self.table, payload, sender, now, reference, rssi)
        newly_duplicated = False
        if is_new:
            newly_duplicated = self._count_add(rec.index)
            actions.append(("discovered", sender))
            actions.append(("log", "DISCOVERED", f"peer={sender} index={rec.index}"))
            actions += self._crowd_actions()
            if self.next_window_start is None:
                # Bootstrap: the first discovery opens the ranging schedule,
                # acting as a zeroth window end for slot allocation.
                self.bitmap = ranging.allocate_slots(self.bitmap, [rec.index], [])
                actions += self._schedule_window(now)
        elif old_index != rec.index:
            self._count_remove(old_index)
            newly_duplicated = self._count_add(rec.index)

        if payload.sender_index == self.my_index and self.address < sender:
            actions += self._change_index(now, "peer advertised our index")
        if payload.conflict_index == self.my_index:
            actions += self._change_index(now, "conflict reported by neighbor")
        if newly_duplicated:
            actions.append(("log", "CONFLICT_REPORT", f"index={rec.index}"))

        actions += self._plan_initiation(now, rec, payload, reference)
        return actions

    def _change_index(self, now: int, why: str) -> list:
        old = self.my_index
        self.my_index = self.choose_new_index()
        self.index_changes += 1
        return [("log", "INDEX_CHANGE", f"old={old} new={self.my_index} reason={why}")]

    def choose_new_index(self) -> int:
        """Uniform draw over index values unused anywhere we can see.

        Excludes our own slot allocations, every cached neighbor bitmap,
        all neighbor sender indexes, and our current value.
        """
        free = codec.free_indexes(
            self.bitmap,
            [rec.cached_bitmap for rec in self.table.values()],
            self.index_counts,
        )
        free.discard(self.my_index)
        if not free:
            raise IndexSpaceExhausted(f"node {self.address}: no free index")
        choices = sorted(free)
        return choices[int(self.rng.integers(0, len(choices)))]

    def _plan_initiation(self, now, rec, payload, reference) -> list:
        """Commit to ranging in our slot of the sender's advertised window.

        At most one commitment per owner window; a window skipped because
        the radio is booked elsewhere is remembered so later copies of
        the same advertisement do not recount it.
        """
        if payload.v_us == 0:
            return []
        ordinal = codec.slot_ordinal(payload.bitmap, self.my_index)
        if ordinal is None:
            return []
        target = reference + payload.v_us * US
        slot_start = ranging.responder_slot_start(target, ordinal, self.cfg.slot)
        existing = self.planned.get(rec.address)
        if existing is not None and existing[0] > now:
            return []
        if slot_start - self.phy.uwb_wake_lead <= now:
            return []
        lo = slot_start - self.phy.uwb_wake_lead
        hi = slot_start + self.cfg.slot
        if self._booking_conflict(lo, hi):
            self.skipped_busy += 1
            self.planned[rec.address] = (slot_start, target, ordinal, False)
            return []
        self.planned[rec.address] = (slot_start, target, ordinal, True)
        self.bookings.append((lo, hi))
        return [("commit", rec.address, slot_start, ordinal, target)]

    def _booking_conflict(self, lo: int, hi: int) -> bool:
        for b_lo, b_hi in self.bookings:
            if lo < b_hi and hi > b_lo:
                return True
        return False

    def take_planned(self, owner: int, slot_start: int) -> bool:
        """Consume the pending initiation if it still matches; used by the
        executor right before transmitting the POLL."""
        entry = self.planned.get(owner)
        if (
            entry is None
            or entry[0] != slot_start
            or not entry[3]
            or self.mode != ACTIVE
        ):
            return False
        del self.planned[owner]
        return True

    # -- ranging windows --------------------------------------------------

    def on_window_end(self, now: int) -> list:
        """Re-allocate slots from the live neighbor set and place the next
        window.  Slot bits change only here."""
        desired = {rec.index for rec in self.table.values()}
        current = set(codec.bitmap_indexes(self.bitmap))
        self.bitmap = ranging.allocate_slots(
            self.bitmap, sorted(desired - current), sorted(current - desired)
        )
        self.next_window_start = None
        self.window_end = None
        if self.bitmap == 0:
            return []
        return self._schedule_window(now)

    def _schedule_window(self, now: int) -> list:
        """Place the next window one period ahead, dodging the neighborhood.

        The phase is held exactly (previous start plus the period) while
        no overlap with a predicted neighbor window or own commitment is
        foreseen; neighbors can then project our occurrences precisely
        and stay clear, so a converged neighborhood freezes into disjoint
        window phases.  On a predicted overlap the start is re-drawn with
        jitter and pushed past the busy intervals.
        """
        dur = ranging.window_duration(self.bitmap, self.cfg.slot)
        busy = self._busy_intervals(now)
        if self.prev_window_start is not None:
            hold = (self.prev_window_start + self.cfg.ranging_period) // US * US
            if hold > now + self.phy.uwb_wake_lead + _DODGE_MARGIN and \
                    self._may_hold(hold, dur, busy):
                return self._commit_window(now, hold, dur)
        fresh = ranging.schedule_next_window(
            now, self.cfg.ranging_period, self.cfg.jitter, self.rng
        ) // US * US
        start = fresh
        for b_lo, b_hi, _peer in busy:
            if self._window_hits(start, dur, b_lo, b_hi):
                start = (b_hi + self.phy.uwb_wake_lead + _DODGE_MARGIN) // US * US
        if start - fresh > self.cfg.ranging_period // 4:
            start = fresh
        return self._commit_window(now, start, dur)

    def _commit_window(self, now: int, start: int, dur: int) -> list:
        self.prev_window_start = start
        self.next_window_start = start
        self.window_end = start + dur
        self._prune_bookings(now)
        self.bookings.append((start - self.phy.uwb_wake_lead, start + dur))
        return [("window", start - self.phy.uwb_wake_lead, start, start + dur)]

    def _window_hits(self, start: int, dur: int, b_lo: int, b_hi: int) -> bool:
        return (
            start - self.phy.uwb_wake_lead - _DODGE_MARGIN < b_hi
            and start + dur + _DODGE_MARGIN > b_lo
        )

    def _may_hold(self, start: int, dur: int, busy) -> bool:
        """Keep the current phase unless a conflicting peer outranks us.

        On a predicted overlap, the node with the lower address keeps its
        phase and the other re-draws; both moving at once would chase
        each other's old positions indefinitely.
        """
        for b_lo, b_hi, peer in busy:
            if self._window_hits(start, dur, b_lo, b_hi) and peer < self.address:
                return False
        return True

    def _busy_intervals(self, now: int) -> list:
        """Predicted radio commitments around the next period: projected
        neighbor windows (their advertised starts repeated every period)
        and our own pending initiator slots, tagged with the peer address."""
        period = self.cfg.ranging_period
        horizon = now + period
        busy = []
        for rec in self.table.values():
            tau = rec.next_window_start
            n_dur = ranging.window_duration(rec.cached_bitmap, self.cfg.slot)
            m_c = (horizon - tau + period // 2) // period
            for m in (m_c - 1, m_c, m_c + 1):
                occ = tau + m * period
                pad = _DODGE_MARGIN if m <= 0 else 2 * _DODGE_MARGIN
                busy.append((occ - pad, occ + n_dur + pad, rec.address))
        for owner, entry in self.planned.items():
            if entry[0] > now and entry[3]:
                busy.append(
                    (entry[0] - _DODGE_MARGIN,
                     entry[0] + self.cfg.slot + _DODGE_MARGIN,
                     owner)
                )
        busy.sort()
        return busy

    def _prune_bookings(self, now: int) -> None:
        self.bookings = [b for b in self.bookings if b[1] > now]

    # -- epochs, expiry, crowd, alerts -------------------------------------

    def on_epoch_boundary(self, now: int) -> list:
        if self.mode != ACTIVE:
            return []
        self.epoch_count += 1
        actions = []
        for rec in expire_neighbors(self.table, self.cfg.neighbor_expiry_epochs):
            self._count_remove(rec.index)
            actions.append(("log", "EXPIRED", f"peer={rec.address} index={rec.index}"))
            self.planned.pop(rec.address, None)
        actions += self._crowd_actions()
        return actions

    def _crowd_actions(self) -> list:
        alarm = len(self.table) > self.cfg.crowd_threshold
        if alarm == self.crowd_alarm:
            return []
        self.crowd_alarm = alarm
        return [("log", "CROWD_ON" if alarm else "CROWD_OFF",
                 f"neighbors={len(self.table)}")]

    def on_range_sample(self, now: int, peer: int, distance_m: float) -> list:
        """Real-time proximity alert on a successful range; at most one
        alert per neighbor per epoch."""
        if distance_m >= self.cfg.alert_distance_m:
            return []
        if self.last_alert_epoch.get(peer) == self.epoch_count:
            return []
        self.last_alert_epoch[peer] = self.epoch_count
        return [
            ("alert", peer, distance_m),
            ("log", "ALERT", f"peer={peer} distance={distance_m:.3f}"),
        ]

    # -- inhibitor standby --------------------------------------------------

    def _enter_standby(self, now: int) -> list:
        until = now + self.cfg.standby
        self.mode = STANDBY
        self.standby_until = until
        self.next_window_start = None
        self.window_end = None
        self.prev_window_start = None
        self.planned.clear()
        self.bookings.clear()
        return [
            ("log", "STANDBY", f"until_us={until // US}"),
            ("standby_until", until),
        ]

    def on_standby_timer(self, now: int) -> list:
        """Standby elapsed: run one scan, only to look for the inhibitor."""
        self.mode = SCAN_ONLY
        self.inhibitor_seen_in_scan = False
        self.epoch_count += 1
        return [("scan_only",)]

    def on_scan_only_end(self, now: int) -> list:
        if self.mode != SCAN_ONLY:
            return []
        self.mode = ACTIVE
        actions = [("log", "RESUME", ""), ("resume",)]
        if self.table:
            desired = sorted({rec.index for rec in self.table.values()})
            self.bitmap = ranging.allocate_slots(0, desired, [])
            actions += self._schedule_window(now)
        return actions
