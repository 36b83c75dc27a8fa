"""Deterministic discrete-event execution of tag scenarios.

Mobility playback, BLE packet delivery with a no-capture collision rule,
UWB exchanges with range gating and air-overlap checks, RSSI synthesis,
per-node energy ledgers, and CSV outputs.  A run is a pure function of
(scenario, seed): the event queue is strictly time-ordered with a fixed
tie-break of (time, node address, event rank, sequence number), so
repeated runs produce byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import codec, discovery, energy, ranging
from .codec import AdvPayload
from .core import (
    MS,
    US,
    PhyConfig,
    ProtocolConfig,
    format_address,
    parse_address,
    phy_config_from_json_dict,
    protocol_config_from_json_dict,
    config_to_json_dict,
    preset,
)
from .engine import ACTIVE, STANDBY, TagEngine

VERSION = "0.1.0"

ROLES = ("tag", "fixed", "inhibitor")


class ScenarioInvalid(ValueError):
    pass


@dataclass
class NodeSpec:
    address: int
    role: str = "tag"
    waypoints: list = field(default_factory=lambda: [(0, 0.0, 0.0)])
    boot_offset: int | None = None
    init_index: int | None = None


@dataclass
class Scenario:
    duration: int
    seed: int
    protocol: ProtocolConfig
    phy: PhyConfig
    nodes: list
    name: str = "scenario"
    # Per-reception RSSI rows can dominate memory in large batch runs;
    # protocol behavior does not depend on them.
    record_rssi: bool = True

    def validate(self) -> None:
        if self.duration <= 0:
            raise ScenarioInvalid("duration must be positive")
        seen = set()
        for spec in self.nodes:
            if spec.role not in ROLES:
                raise ScenarioInvalid(f"unknown role {spec.role!r}")
            if spec.address in seen:
                raise ScenarioInvalid(f"duplicate address {spec.address}")
            seen.add(spec.address)
            if not spec.waypoints:
                raise ScenarioInvalid(f"node {spec.address} has no waypoints")
            times = [w[0] for w in spec.waypoints]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ScenarioInvalid(
                    f"node {spec.address}: waypoint times must strictly increase"
                )
            if spec.init_index is not None and not 0 <= spec.init_index < 104:
                raise ScenarioInvalid(f"node {spec.address}: init_index out of range")
        if not self.nodes:
            raise ScenarioInvalid("scenario has no nodes")


def scenario_from_json_dict(data: dict) -> Scenario:
    try:
        proto = data.get("protocol", {"preset": "2s"})
        protocol = protocol_config_from_json_dict(proto)
        phy = phy_config_from_json_dict(data.get("phy", {}))
        nodes = []
        for nd in data["nodes"]:
            waypoints = [
                (wp["t_us"] * US, float(wp["x_m"]), float(wp["y_m"]))
                for wp in nd.get("waypoints", [{"t_us": 0, "x_m": 0.0, "y_m": 0.0}])
            ]
            boot = nd.get("boot_offset_us")
            nodes.append(
                NodeSpec(
                    address=parse_address(nd["address"]),
                    role=nd.get("role", "tag"),
                    waypoints=waypoints,
                    boot_offset=None if boot is None else boot * US,
                    init_index=nd.get("init_index"),
                )
            )
        scenario = Scenario(
            duration=data["duration_us"] * US,
            seed=int(data.get("seed", 0)),
            protocol=protocol,
            phy=phy,
            nodes=nodes,
            name=data.get("name", "scenario"),
        )
    except ScenarioInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalid(f"malformed scenario: {exc}") from exc
    scenario.validate()
    return scenario


def scenario_to_json_dict(scenario: Scenario) -> dict:
    return {
        "name": scenario.name,
        "duration_us": scenario.duration // US,
        "seed": scenario.seed,
        "protocol": config_to_json_dict(scenario.protocol),
        "phy": config_to_json_dict(scenario.phy),
        "nodes": [
            {
                "address": spec.address,
                "role": spec.role,
                **({"boot_offset_us": spec.boot_offset // US}
                   if spec.boot_offset is not None else {}),
                **({"init_index": spec.init_index}
                   if spec.init_index is not None else {}),
                "waypoints": [
                    {"t_us": t // US, "x_m": x, "y_m": y}
                    for (t, x, y) in spec.waypoints
                ],
            }
            for spec in scenario.nodes
        ],
    }


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_json_dict(json.load(f))


def position_at(waypoints, t: int) -> tuple[float, float]:
    """Piecewise-linear interpolation, clamped outside the waypoint span."""
    if t <= waypoints[0][0]:
        return waypoints[0][1], waypoints[0][2]
    if t >= waypoints[-1][0]:
        return waypoints[-1][1], waypoints[-1][2]
    for (t0, x0, y0), (t1, x1, y1) in zip(waypoints, waypoints[1:]):
        if t0 <= t <= t1:
            f = (t - t0) / (t1 - t0)
            return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
    return waypoints[-1][1], waypoints[-1][2]


def rssi_at(true_distance_m: float, phy: PhyConfig, rng) -> float:
    """Log-distance path loss with Gaussian shadowing, dBm."""
    d = max(true_distance_m, 0.01)
    rssi = phy.rssi_p0_dbm - 10.0 * phy.rssi_path_loss_n * math.log10(d)
    if phy.rssi_shadow_sigma_db > 0:
        rssi += float(rng.normal(0.0, phy.rssi_shadow_sigma_db))
    return rssi


def uwb_exchange(
    true_distance_m: float,
    t: int,
    phy: PhyConfig,
    rng,
    initiator: int = 0,
    responder: int = 0,
    drift_initiator: float = 0.0,
    drift_responder: float = 0.0,
    channel_clear: bool = True,
) -> ranging.RangeSample:
    """Outcome of one scheduled exchange between awake, slot-aligned nodes.

    Succeeds iff within UWB range and no other transmission overlaps the
    packets.  The reported distance is produced by running the ranging
    arithmetic over timestamps synthesized from the noisy time of flight
    and both clocks' drifts, so it carries the expected reply-delay bias.
    """
    if true_distance_m > phy.uwb_range_m or not channel_clear:
        return ranging.RangeSample(initiator, responder, 0.0, t, False)
    noisy = true_distance_m
    if phy.uwb_noise_sigma_m > 0:
        noisy = max(0.0, noisy + float(rng.normal(0.0, phy.uwb_noise_sigma_m)))
    ts = ranging.synthesize_timestamps(
        ranging.distance_to_tof_ticks(noisy),
        t,
        phy.uwb_reply_delay,
        drift_initiator,
        drift_responder,
        sub_tick=True,
    )
    reported, clamped = ranging.sstwr_distance(ts, phy.propagation_speed_m_s)
    return ranging.RangeSample(initiator, responder, reported, t, True, clamped)


@dataclass
class PacketTx:
    sender: int
    channel: int
    start: int
    airtime: int
    position: tuple[float, float]


@dataclass
class ReceiverState:
    address: int
    position: tuple[float, float]
    scan_channel: int | None
    scan_start: int
    scan_end: int


def ble_deliver(tx: PacketTx, candidate_receivers, all_packets, ble_range_m: float):
    """Receivers that successfully capture the packet.

    A receiver gets the packet iff it is in range, its scan is active on
    the packet's channel for the packet's whole airtime, and no other
    in-range packet on the same channel overlaps that airtime (any
    overlap destroys both packets; there is no capture effect).
    """
    delivered = set()
    end = tx.start + tx.airtime
    for rx in candidate_receivers:
        if rx.address == tx.sender:
            continue
        if rx.scan_channel != tx.channel:
            continue
        if not (rx.scan_start <= tx.start and end <= rx.scan_end):
            continue
        if math.dist(rx.position, tx.position) > ble_range_m:
            continue
        clobbered = False
        for other in all_packets:
            if other is tx or other.channel != tx.channel:
                continue
            if other.start < end and other.start + other.airtime > tx.start:
                if math.dist(rx.position, other.position) <= ble_range_m:
                    clobbered = True
                    break
        if not clobbered:
            delivered.add(rx.address)
    return delivered


# Event ranks; the queue orders by (time, node address, rank, seq).
_EPOCH = 0
_SCAN_START = 1
_ADV = 2
_PKT = 3
_RX = 4
_SCAN_END = 5
_SCANONLY_END = 6
_WINDOW_WAKE = 7
_WINDOW_START = 8
_INIT_WAKE = 9
_POLL = 10
_RESPONSE = 11
_DONE = 12
_WINDOW_END = 13
_STANDBY_END = 14

_INHIBITOR_PAYLOAD = AdvPayload(
    sender_index=0, v_us=0, bitmap=0, flags=codec.FLAG_INHIBITOR
)


class _Node:
    __slots__ = (
        "spec", "engine", "ledger", "boot", "epoch_no", "gen",
        "scanning", "scan_channel", "scan_start", "scan_end", "scan_punctured",
        "pending", "air", "window_active", "off_since", "drift",
        "static_pos", "waypoints", "rng",
    )

    def __init__(self, spec, engine_, ledger, boot, drift, rng):
        self.spec = spec
        self.engine = engine_
        self.ledger = ledger
        self.boot = boot
        self.epoch_no = 0
        self.gen = 0
        self.scanning = False
        self.scan_channel = None
        self.scan_start = 0
        self.scan_end = 0
        self.scan_punctured = False
        self.pending = deque()  # (start, end, record) receptions in progress
        self.air = deque()      # (start, end) in-range same-channel airtime seen
        self.window_active = None
        self.off_since = None
        self.drift = drift
        self.static_pos = None
        self.waypoints = spec.waypoints
        self.rng = rng

    @property
    def address(self):
        return self.spec.address

    def position(self, t):
        if self.static_pos is not None:
            return self.static_pos
        return position_at(self.waypoints, t)


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.cfg = scenario.protocol
        self.phy = scenario.phy
        span = (
            self.phy.uwb_guard
            + 2 * self.phy.uwb_packet_airtime
            + self.phy.uwb_reply_delay
        )
        if span > self.cfg.slot:
            raise ScenarioInvalid(
                f"exchange span {span // US}us does not fit slot "
                f"{self.cfg.slot // US}us"
            )
        self._exchange_span = span

        master = np.random.SeedSequence(scenario.seed)
        sim_seed, noise_seed, rssi_seed, loss_seed = master.spawn(4)
        self._noise_rng = np.random.default_rng(noise_seed)
        self._rssi_rng = np.random.default_rng(rssi_seed)
        self._loss_rng = np.random.default_rng(loss_seed)
        init_rng = np.random.default_rng(sim_seed)

        self.nodes: dict[int, _Node] = {}
        for spec in sorted(scenario.nodes, key=lambda s: s.address):
            node_rng = np.random.default_rng(
                np.random.SeedSequence((scenario.seed, spec.address))
            )
            drift = float(
                init_rng.uniform(-self.phy.clock_drift_ppm, self.phy.clock_drift_ppm)
            ) * 1e-6
            boot = spec.boot_offset
            if boot is None:
                # Whole microseconds, so advertisement first-packet times
                # (the reference the countdown v is measured from) stay
                # exactly representable in the payload's microsecond field.
                boot = int(node_rng.integers(0, self.cfg.epoch)) // US * US
            eng = None
            if spec.role != "inhibitor":
                eng = TagEngine(
                    spec.address, self.cfg, self.phy, node_rng,
                    init_index=spec.init_index,
                )
            node = _Node(spec, eng, energy.EnergyLedger(), boot, drift, node_rng)
            if len(spec.waypoints) == 1:
                node.static_pos = (spec.waypoints[0][1], spec.waypoints[0][2])
            self.nodes[spec.address] = node

        self._static = all(n.static_pos is not None for n in self.nodes.values())
        self._dist: dict[tuple[int, int], float] = {}
        if self._static:
            addrs = sorted(self.nodes)
            for i, a in enumerate(addrs):
                pa = self.nodes[a].static_pos
                for b in addrs[i + 1:]:
                    d = math.dist(pa, self.nodes[b].static_pos)
                    self._dist[(a, b)] = d
                    self._dist[(b, a)] = d

        self._queue: list = []
        self._seq = 0
        self._now = 0
        self._scanners = {37: set(), 38: set(), 39: set()}
        self._uwb_txs: list = []  # (start, end, tx_addr, tx_id)
        self._uwb_id = 0
        self._polls_seen: set = set()

        # Output rows.
        self.range_rows: list = []
        self.rssi_rows: list = []
        self.event_rows: list = []
        self.latency_records: dict[tuple[int, int], int] = {}
        self.stats = {
            "commits": 0,
            "cancelled": 0,
            "successes": 0,
            "fail_collision": 0,
            "fail_no_responder": 0,
            "fail_out_of_range": 0,
            "slot_collisions": 0,
            "ble_packets_lost": 0,
            "alerts": 0,
            "skipped_busy": 0,
        }

    # -- plumbing ----------------------------------------------------------

    def _push(self, t, rank, addr, data):
        self._seq += 1
        heapq.heappush(self._queue, (t, addr, rank, self._seq, data))

    def _distance(self, a: int, b: int, t: int) -> float:
        if self._static:
            return self._dist[(a, b)]
        return math.dist(self.nodes[a].position(t), self.nodes[b].position(t))

    def _log(self, t, addr, kind, details):
        self.event_rows.append((t, addr, kind, details))

    # -- engine action dispatch ---------------------------------------------

    def _apply(self, node: _Node, actions, now: int):
        for act in actions:
            kind = act[0]
            if kind == "log":
                self._log(now, node.address, act[1], act[2])
            elif kind == "discovered":
                self.latency_records.setdefault((node.address, act[1]), now)
            elif kind == "window":
                _, wake_t, start, end = act
                self._push(wake_t, _WINDOW_WAKE, node.address, (start,))
                self._push(start, _WINDOW_START, node.address, (start, end))
                self._push(end, _WINDOW_END, node.address, (start, end))
            elif kind == "commit":
                _, owner, slot_start, ordinal, target = act
                self.stats["commits"] += 1
                self._push(
                    slot_start - self.phy.uwb_wake_lead, _INIT_WAKE,
                    node.address, (owner, slot_start),
                )
                self._push(
                    slot_start + self.phy.uwb_guard, _POLL,
                    node.address, (owner, slot_start, ordinal, target),
                )
            elif kind == "standby_until":
                self._begin_standby(node, now, act[1])
            elif kind == "scan_only":
                self._begin_scan_only(node, now)
            elif kind == "resume":
                self._push(now, _EPOCH, node.address, (node.gen,))
            elif kind == "alert":
                self.stats["alerts"] += 1

    def _begin_standby(self, node: _Node, now: int, until: int):
        if node.scanning:
            self._stop_scan(node, now)
        node.gen += 1
        node.window_active = None
        node.off_since = now
        self._push(until, _STANDBY_END, node.address, ())

    def _begin_scan_only(self, node: _Node, now: int):
        node.gen += 1
        gen = node.gen
        ch = discovery.scan_channel(node.epoch_no)
        node.epoch_no += 1
        self._start_scan(node, now, now + self.cfg.scan, ch)
        self._push(now + self.cfg.scan, _SCAN_END, node.address, (gen,))
        self._push(now + self.cfg.scan, _SCANONLY_END, node.address, (gen,))

    def _start_scan(self, node: _Node, start: int, end: int, channel: int):
        node.scanning = True
        node.scan_channel = channel
        node.scan_start = start
        node.scan_end = end
        node.scan_punctured = False
        node.pending = deque()
        node.air = deque()
        self._scanners[channel].add(node.address)

    def _stop_scan(self, node: _Node, now: int):
        """Unregister and accrue scan time; used for both normal scan end
        and mode-change interruption."""
        self._scanners[node.scan_channel].discard(node.address)
        node.scanning = False
        span = min(now, node.scan_end) - node.scan_start
        if node.scan_punctured:
            span -= self.cfg.adv
        node.ledger.add(energy.BLE_SCAN, max(0, span))
        node.ledger.scans += 1

    # -- event handlers ------------------------------------------------------

    def _on_epoch(self, node: _Node, t: int, gen: int):
        if gen != node.gen or node.engine is None:
            return
        if node.engine.mode != ACTIVE:
            return
        self._apply(node, node.engine.on_epoch_boundary(t), t)
        start = t + discovery.epoch_wobble(node.address, node.epoch_no)
        sched = discovery.build_epoch_schedule(
            self.cfg, start, node.epoch_no, node.address
        )
        node.epoch_no += 1
        g = node.gen
        addr = node.address
        self._push(sched.scan_start, _SCAN_START, addr,
                   (g, sched.scan_end, sched.scan_channel))
        self._push(sched.scan_end, _SCAN_END, addr, (g,))
        if sched.anchor_start is not None:
            self._push(sched.anchor_start, _ADV, addr, (g, True))
        for s in sched.adv_starts:
            self._push(s, _ADV, addr, (g, False))
        self._push(t + self.cfg.epoch, _EPOCH, addr, (g,))

    def _on_scan_start(self, node: _Node, t: int, gen: int, end: int, ch: int):
        if gen != node.gen:
            return
        self._start_scan(node, t, end, ch)

    def _on_scan_end(self, node: _Node, t: int, gen: int):
        if gen != node.gen or not node.scanning:
            return
        self._stop_scan(node, t)

    def _on_scanonly_end(self, node: _Node, t: int, gen: int):
        if gen != node.gen:
            return
        self._apply(node, node.engine.on_scan_only_end(t), t)

    def _on_standby_end(self, node: _Node, t: int):
        if node.off_since is not None:
            node.ledger.add_off(t - node.off_since)
            node.off_since = None
        self._apply(node, node.engine.on_standby_timer(t), t)

    def _on_adv(self, node: _Node, t: int, gen: int, anchor: bool):
        if node.engine is not None:
            if gen != node.gen or node.engine.mode != ACTIVE:
                return
        node.ledger.add(energy.BLE_ADV_TX, self.cfg.adv)
        node.ledger.advertisements += 1
        if node.scanning:
            # Transmitting suspends reception for the advertisement's span.
            node.scan_punctured = True
            self._interfere(node, t, t + self.cfg.adv)
        for i in range(3):
            self._push(t + i * self.cfg.packet_gap, _PKT, node.address, (t, 37 + i))
        if node.engine is None:
            # Inhibitors advertise at a fixed interval, no scans.
            nxt = t + self.cfg.adv_interval
            self._push(nxt, _ADV, node.address, (gen, False))

    def _interfere(self, node: _Node, start: int, end: int):
        air = node.air
        while air and air[0][1] <= start:
            air.popleft()
        air.append((start, end))
        pending = node.pending
        while pending and pending[0][1] <= start:
            pending.popleft()
        for p in pending:
            if p[0] < end and p[1] > start:
                p[2]["corrupt"] = True

    def _on_pkt(self, node: _Node, t: int, adv_start: int, channel: int):
        airtime = self.phy.ble_packet_airtime
        end = t + airtime
        sender = node.address
        rng_range = self.phy.ble_range_m
        for addr in sorted(self._scanners[channel]):
            if addr == sender:
                continue
            rx = self.nodes[addr]
            if self._distance(sender, addr, t) > rng_range:
                continue
            blocked = any(a0 < end and a1 > t for a0, a1 in rx.air)
            self._interfere(rx, t, end)
            if blocked:
                self.stats["ble_packets_lost"] += 1
                continue
            if end > rx.scan_end:
                continue
            record = {"corrupt": False}
            rx.pending.append((t, end, record))
            self._push(end, _RX, addr,
                       (record, sender, adv_start, t, channel, rx.gen))

    def _on_rx(self, node: _Node, t: int, record, sender: int,
               adv_start: int, pkt_start: int, channel: int, gen: int):
        if record["corrupt"]:
            self.stats["ble_packets_lost"] += 1
            return
        if gen != node.gen or node.engine is None:
            return
        if node.engine.mode == STANDBY:
            return
        if self.phy.loss_probability > 0:
            if self._loss_rng.random() < self.phy.loss_probability:
                self.stats["ble_packets_lost"] += 1
                return
        tx_node = self.nodes[sender]
        if tx_node.engine is not None:
            payload = tx_node.engine.make_payload(adv_start)
            if payload is None:
                return
        else:
            payload = _INHIBITOR_PAYLOAD
        rssi = 0.0
        if self.scenario.record_rssi:
            dist = self._distance(sender, node.address, pkt_start)
            rssi = rssi_at(dist, self.phy, self._rssi_rng)
            self.rssi_rows.append((t, node.address, sender, rssi))
        self._apply(
            node,
            node.engine.heard_advertisement(t, sender, payload, channel,
                                            pkt_start, rssi),
            t,
        )

    def _on_window_wake(self, node: _Node, t: int, start: int):
        eng = node.engine
        if eng.mode != ACTIVE or eng.next_window_start != start:
            return
        node.ledger.add(energy.UWB_WAKE, self.phy.uwb_wake_lead)

    def _on_window_start(self, node: _Node, t: int, start: int, end: int):
        eng = node.engine
        if eng.mode != ACTIVE or eng.next_window_start != start:
            return
        node.window_active = (start, end)

    def _on_window_end(self, node: _Node, t: int, start: int, end: int):
        eng = node.engine
        if eng.mode != ACTIVE or eng.next_window_start != start:
            return
        node.window_active = None
        node.ledger.add(energy.UWB_ACTIVE, end - start)
        self._apply(node, eng.on_window_end(t), t)

    def _on_init_wake(self, node: _Node, t: int, owner: int, slot_start: int):
        eng = node.engine
        if eng.mode != ACTIVE:
            return
        entry = eng.planned.get(owner)
        if entry is None or entry[0] != slot_start:
            return
        node.ledger.add(energy.UWB_WAKE, self.phy.uwb_wake_lead)

    def _on_poll(self, node: _Node, t: int, owner: int, slot_start: int,
                 ordinal: int, target: int):
        eng = node.engine
        if not eng.take_planned(owner, slot_start):
            self.stats["cancelled"] += 1
            return
        key = (owner, target, ordinal)
        if key in self._polls_seen:
            self.stats["slot_collisions"] += 1
            self._log(t, node.address, "SLOT_COLLISION",
                      f"owner={owner} ordinal={ordinal}")
        else:
            self._polls_seen.add(key)
        node.ledger.add(energy.UWB_ACTIVE, self._exchange_span)
        airtime = self.phy.uwb_packet_airtime
        self._uwb_id += 1
        tx_id = self._uwb_id
        self._register_uwb(t, t + airtime, node.address, tx_id)
        owner_node = self.nodes[owner]
        reply_real = round(self.phy.uwb_reply_delay / (1.0 + owner_node.drift))
        resp_start = t + airtime + reply_real
        exch = {
            "initiator": node.address,
            "owner": owner,
            "poll_t": t,
            "poll_end": t + airtime,
            "poll_id": tx_id,
            "resp_start": resp_start,
            "resp_end": resp_start + airtime,
            "resp_id": None,
            "slot_start": slot_start,
            "target": target,
            "responded": False,
        }
        self._push(resp_start, _RESPONSE, owner, (exch,))

    def _register_uwb(self, start: int, end: int, addr: int, tx_id: int):
        txs = self._uwb_txs
        txs.append((start, end, addr, tx_id))
        if len(txs) > 64:
            self._uwb_txs = [x for x in txs if x[1] > start - 50 * MS]

    def _uwb_clear(self, start: int, end: int, receiver: int,
                   exclude: tuple) -> bool:
        # Registered in start order and at most one packet airtime long, so
        # only a short tail of the registry can overlap [start, end).
        floor = start - self.phy.uwb_packet_airtime
        for s, e, addr, tx_id in reversed(self._uwb_txs):
            if s < floor:
                break
            if tx_id in exclude or e <= start or s >= end:
                continue
            if addr == receiver:
                # The receiver was itself transmitting: nothing decodable.
                return False
            if self._distance(addr, receiver, s) <= self.phy.uwb_range_m:
                return False
        return True

    def _on_response(self, node: _Node, t: int, exch: dict):
        # node is the window owner; it replies only if it was listening in
        # the advertised window and decoded the POLL.
        eng = node.engine
        initiator = exch["initiator"]
        wa = node.window_active
        if (
            eng is not None
            and eng.mode == ACTIVE
            and wa is not None
            and wa[0] == exch["target"]
            and exch["slot_start"] + self.cfg.slot <= wa[1]
            and self._distance(initiator, node.address, exch["poll_t"])
            <= self.phy.uwb_range_m
            and self._uwb_clear(exch["poll_t"], exch["poll_end"], node.address,
                                (exch["poll_id"],))
        ):
            exch["responded"] = True
            self._uwb_id += 1
            exch["resp_id"] = self._uwb_id
            self._register_uwb(t, exch["resp_end"], node.address, self._uwb_id)
        self._push(exch["resp_end"], _DONE, initiator, (exch,))

    def _on_done(self, node: _Node, t: int, exch: dict):
        initiator = node
        owner = exch["owner"]
        dist = self._distance(initiator.address, owner, exch["poll_t"])
        if dist > self.phy.uwb_range_m:
            self.stats["fail_out_of_range"] += 1
            self._record_range(t, initiator.address, owner, None)
            return
        if not exch["responded"]:
            self.stats["fail_no_responder"] += 1
            self._record_range(t, initiator.address, owner, None)
            return
        if not self._uwb_clear(
            exch["resp_start"], exch["resp_end"], initiator.address,
            (exch["resp_id"], exch["poll_id"]),
        ) or not self._uwb_clear(
            exch["poll_t"], exch["poll_end"], owner,
            (exch["poll_id"], exch["resp_id"]),
        ):
            self.stats["fail_collision"] += 1
            self._record_range(t, initiator.address, owner, None)
            return
        owner_node = self.nodes[owner]
        sample = uwb_exchange(
            dist, exch["poll_t"], self.phy, self._noise_rng,
            initiator=initiator.address, responder=owner,
            drift_initiator=initiator.drift, drift_responder=owner_node.drift,
        )
        self.stats["successes"] += 1
        initiator.ledger.rangings += 1
        self._record_range(t, initiator.address, owner, sample.distance_m)
        self._log(t, initiator.address, "RANGE",
                  f"peer={owner} distance={sample.distance_m:.3f}")
        self._apply(
            initiator,
            initiator.engine.on_range_sample(t, owner, sample.distance_m),
            t,
        )

    def _record_range(self, t, initiator, responder, distance):
        self.range_rows.append((initiator, responder, distance, t))

    # -- main loop -----------------------------------------------------------

    def run(self) -> "SimOutput":
        for node in sorted(self.nodes.values(), key=lambda n: n.address):
            if node.engine is None:
                self._push(node.boot, _ADV, node.address, (0, False))
            else:
                self._push(node.boot, _EPOCH, node.address, (0,))
        duration = self.scenario.duration
        queue = self._queue
        handlers = {
            _EPOCH: self._on_epoch,
            _SCAN_START: self._on_scan_start,
            _SCAN_END: self._on_scan_end,
            _SCANONLY_END: self._on_scanonly_end,
            _STANDBY_END: self._on_standby_end,
            _ADV: self._on_adv,
            _PKT: self._on_pkt,
            _RX: self._on_rx,
            _WINDOW_WAKE: self._on_window_wake,
            _WINDOW_START: self._on_window_start,
            _WINDOW_END: self._on_window_end,
            _INIT_WAKE: self._on_init_wake,
            _POLL: self._on_poll,
            _RESPONSE: self._on_response,
            _DONE: self._on_done,
        }
        nodes = self.nodes
        while queue:
            t, addr, rank, _seq, data = heapq.heappop(queue)
            if t > duration:
                break
            assert t >= self._now, "event queue went back in time"
            self._now = t
            handlers[rank](nodes[addr], t, *data)

        for node in nodes.values():
            if node.scanning:
                self._stop_scan(node, duration)
            if node.off_since is not None:
                node.ledger.add_off(duration - node.off_since)
                node.off_since = None
            node.ledger.finalize(duration)
            if node.engine is not None:
                self.stats["skipped_busy"] += node.engine.skipped_busy
        return SimOutput(self)


class SimOutput:
    """Collected results of one run, writable as the five CSV streams plus
    a manifest."""

    def __init__(self, sim: Simulation):
        self.scenario = sim.scenario
        self.stats = dict(sim.stats)
        self.range_rows = sim.range_rows
        self.rssi_rows = sim.rssi_rows
        self.event_rows = sim.event_rows
        self.latency_records = sim.latency_records
        self.ledgers = {
            addr: node.ledger for addr, node in sorted(sim.nodes.items())
        }
        self.boots = {addr: node.boot for addr, node in sim.nodes.items()}
        self._node_specs = {addr: n.spec for addr, n in sim.nodes.items()}

    # CSV renderers; formats are frozen (documented in the README).

    def ranges_csv(self) -> str:
        lines = ["initiator,responder,distance_m,time_us,success"]
        for initiator, responder, dist, t in self.range_rows:
            if dist is None:
                lines.append(
                    f"{format_address(initiator)},{format_address(responder)},"
                    f",{t // US},0"
                )
            else:
                lines.append(
                    f"{format_address(initiator)},{format_address(responder)},"
                    f"{dist:.3f},{t // US},1"
                )
        return "\n".join(lines) + "\n"

    def rssi_csv(self) -> str:
        lines = ["time_us,node,peer,rssi_dbm"]
        for t, node, peer, rssi in self.rssi_rows:
            lines.append(
                f"{t // US},{format_address(node)},{format_address(peer)},{rssi:.1f}"
            )
        return "\n".join(lines) + "\n"

    def events_csv(self) -> str:
        lines = ["time_us,node,event_type,details"]
        for t, node, kind, details in self.event_rows:
            lines.append(f"{t // US},{format_address(node)},{kind},{details}")
        return "\n".join(lines) + "\n"

    def energy_csv(self, table: energy.CurrentTable | None = None) -> str:
        table = table or energy.CurrentTable()
        battery = energy.Battery()
        lines = ["node,state,duration_us,avg_ma,lifetime_days"]
        elapsed = self.scenario.duration
        for addr, ledger in self.ledgers.items():
            avg = energy.average_current(ledger, table, elapsed)
            days = energy.lifetime_days(avg, battery)
            for state in energy.STATES:
                lines.append(
                    f"{format_address(addr)},{state},"
                    f"{ledger.durations[state] // US},{avg:.4f},{days:.2f}"
                )
        return "\n".join(lines) + "\n"

    def latency_csv(self) -> str:
        lines = ["node,peer,discovered_us,latency_us"]
        for (node, peer), t in sorted(self.latency_records.items()):
            t0 = self._pair_contact_start(node, peer)
            lines.append(
                f"{format_address(node)},{format_address(peer)},"
                f"{t // US},{(t - t0) // US}"
            )
        return "\n".join(lines) + "\n"

    def _pair_contact_start(self, a: int, b: int) -> int:
        """When discovery became possible: both booted and within BLE range."""
        boot = max(self.boots[a], self.boots[b])
        wa = self._node_specs[a].waypoints
        wb = self._node_specs[b].waypoints
        if len(wa) == 1 and len(wb) == 1:
            return boot
        t = boot
        step = 100 * MS
        limit = self.scenario.duration
        while t <= limit:
            d = math.dist(position_at(wa, t), position_at(wb, t))
            if d <= self.scenario.phy.ble_range_m:
                return t
            t += step
        return boot

    def csv_streams(self) -> dict[str, str]:
        return {
            "ranges.csv": self.ranges_csv(),
            "rssi.csv": self.rssi_csv(),
            "events.csv": self.events_csv(),
            "energy.csv": self.energy_csv(),
            "latency.csv": self.latency_csv(),
        }

    def output_hash(self) -> str:
        h = hashlib.sha256()
        for name, text in sorted(self.csv_streams().items()):
            h.update(name.encode())
            h.update(text.encode())
        return h.hexdigest()

    def manifest(self, scenario_ref: str, config_hash: str) -> dict:
        return {
            "scenario": scenario_ref,
            "seed": self.scenario.seed,
            "config_hash": config_hash,
            "version": VERSION,
            "outputs": sorted(self.csv_streams()) + ["manifest.json"],
        }

    def write(self, out_dir, scenario_ref: str = "", config_hash: str = "") -> list:
        import os

        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, text in sorted(self.csv_streams().items()):
            path = os.path.join(out_dir, name)
            with open(path, "w") as f:
                f.write(text)
            paths.append(path)
        mpath = os.path.join(out_dir, "manifest.json")
        with open(mpath, "w") as f:
            json.dump(self.manifest(scenario_ref, config_hash), f, indent=2,
                      sort_keys=True)
            f.write("\n")
        paths.append(mpath)
        return paths


def run(scenario: Scenario) -> SimOutput:
    """Execute a scenario; deterministic for a given (scenario, seed)."""
    return Simulation(scenario).run()
