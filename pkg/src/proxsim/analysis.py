"""Offline contact analytics over range-sample streams.

Raw samples are distance measurements between unordered pairs of users,
processed regardless of which side initiated the measurement.  A
continuous contact opens at the first sample within the distance
threshold (plus a small tolerance absorbing measurement error) and
closes once that condition has been continuously false for the close
gap; the last in-threshold sample remains part of the contact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .core import SEC, US, parse_address

OPEN_THRESHOLD_M = 2.0
TOLERANCE_M = 0.2
CLOSE_GAP = 90 * SEC

HIGH = "High"
MEDIUM = "Medium"
LOW = "Low"

_MIN = 60 * SEC


class BandOverlap(ValueError):
    pass


class MalformedRow(ValueError):
    def __init__(self, row_number: int, reason: str):
        self.row_number = row_number
        super().__init__(f"row {row_number}: {reason}")


@dataclass(frozen=True)
class Sample:
    pair: tuple[int, int]
    distance_m: float
    time: int

    def __post_init__(self):
        if self.pair[0] == self.pair[1]:
            raise ValueError("a sample needs two distinct users")


def make_sample(user_a: int, user_b: int, distance_m: float, time: int) -> Sample:
    a, b = sorted((user_a, user_b))
    return Sample(pair=(a, b), distance_m=distance_m, time=time)


@dataclass(frozen=True)
class ContactRecord:
    pair: tuple[int, int]
    t_open: int
    t_end: int
    avg_distance_m: float
    risk: str

    @property
    def duration(self) -> int:
        return self.t_end - self.t_open


def extract_contacts(
    samples,
    open_threshold_m: float = OPEN_THRESHOLD_M,
    tolerance_m: float = TOLERANCE_M,
    close_gap: int = CLOSE_GAP,
) -> list[ContactRecord]:
    """Continuous contacts of one pair from its time-sorted samples.

    A sample is in-threshold when its distance is at most threshold plus
    tolerance.  Consecutive in-threshold samples separated by less than
    the close gap belong to one contact; a gap of at least close_gap (or
    the stream end) closes the contact at the last in-threshold sample.
    The average distance is the mean over the contact's in-threshold
    samples only.
    """
    limit = open_threshold_m + tolerance_m
    ordered = sorted(samples, key=lambda s: s.time)
    contacts = []
    run: list = []
    for s in ordered:
        if s.distance_m > limit:
            continue
        if run and s.time - run[-1].time >= close_gap:
            contacts.append(_close(run))
            run = []
        run.append(s)
    if run:
        contacts.append(_close(run))
    return contacts


def _close(run) -> ContactRecord:
    avg = sum(s.distance_m for s in run) / len(run)
    c = ContactRecord(
        pair=run[0].pair,
        t_open=run[0].time,
        t_end=run[-1].time,
        avg_distance_m=avg,
        risk="",
    )
    return ContactRecord(c.pair, c.t_open, c.t_end, c.avg_distance_m, classify(c))


def classify(c: ContactRecord) -> str:
    """Risk class from average distance and duration.

    High: below 2 m for more than 15 minutes.  Medium: below 4 m for 5 to
    15 minutes, or between 2 m and 4 m for more than 15 minutes.  Low:
    anything else.  The 5-to-15-minute bounds are inclusive, so a contact
    of exactly 15 minutes is Medium.
    """
    avg = c.avg_distance_m
    dur = c.t_end - c.t_open
    if avg < 2.0 and dur > 15 * _MIN:
        return HIGH
    if avg < 4.0 and 5 * _MIN <= dur <= 15 * _MIN:
        return MEDIUM
    if 2.0 <= avg < 4.0 and dur > 15 * _MIN:
        return MEDIUM
    return LOW


def extract_contacts_reference(
    samples,
    open_threshold_m: float = OPEN_THRESHOLD_M,
    tolerance_m: float = TOLERANCE_M,
    close_gap: int = CLOSE_GAP,
) -> list[ContactRecord]:
    """Literal transcription of the open/close rule; the test oracle for
    extract_contacts.

    Walks every sample, in- or out-of-threshold, carrying explicit state:
    a contact is open or not, and t_last marks the newest in-threshold
    sample.  Whenever a sample shows that close_gap has elapsed since
    t_last with nothing in-threshold in between, the open contact closes
    at t_last; the sample at hand may then open a new one.
    """
    limit = open_threshold_m + tolerance_m
    ordered = sorted(samples, key=lambda s: s.time)
    contacts = []
    is_open = False
    t_last = 0
    members: list = []

    def close():
        avg = sum(s.distance_m for s in members) / len(members)
        c = ContactRecord(members[0].pair, members[0].time, members[-1].time, avg, "")
        contacts.append(
            ContactRecord(c.pair, c.t_open, c.t_end, c.avg_distance_m, classify(c))
        )

    for s in ordered:
        if is_open and s.time - t_last >= close_gap:
            close()
            is_open = False
            members = []
        if s.distance_m <= limit:
            if not is_open:
                is_open = True
                members = []
            members.append(s)
            t_last = s.time
    if is_open:
        close()
    return contacts


DAY = 24 * 3600 * SEC


def dyad_stats(contacts, day_window: int = DAY) -> dict:
    """Per-day, per-dyad contact totals.

    Returns {day_index: {pair: (total_duration, weighted_avg_distance)}}
    where the average distance is weighted by contact duration (falling
    back to a plain mean for zero-length contacts).
    """
    out: dict = {}
    for c in contacts:
        day = c.t_open // day_window
        per_day = out.setdefault(day, {})
        tot, w_sum, n, plain = per_day.get(c.pair, (0, 0.0, 0, 0.0))
        per_day[c.pair] = (
            tot + c.duration,
            w_sum + c.avg_distance_m * c.duration,
            n + 1,
            plain + c.avg_distance_m,
        )
    result = {}
    for day, per_day in out.items():
        result[day] = {}
        for pair, (tot, w_sum, n, plain) in per_day.items():
            avg = w_sum / tot if tot > 0 else plain / n
            result[day][pair] = (tot, avg)
    return result


def possible_dyads(n_participants: int) -> int:
    return n_participants * (n_participants - 1) // 2


def cumulative_exposure(samples, period: int, bands) -> dict:
    """Raw per-neighbor time at distance, for one user's sample stream.

    Every sample contributes one sampling period to the band containing
    its distance; bands are half-open [lo, hi) and must not overlap.
    Returns {neighbor: {band_index: total_time}}.
    """
    bands = sorted(bands)
    for (lo1, hi1), (lo2, hi2) in zip(bands, bands[1:]):
        if hi1 > lo2:
            raise BandOverlap(f"bands [{lo1},{hi1}) and [{lo2},{hi2}) overlap")
    out: dict = {}
    for user, dist, _t in samples:
        for i, (lo, hi) in enumerate(bands):
            if lo <= dist < hi:
                per = out.setdefault(user, {})
                per[i] = per.get(i, 0) + period
                break
    return out


# --- CSV interface --------------------------------------------------------


def parse_samples_csv(text: str) -> list[Sample]:
    """Range-sample CSV (the simulator output format, or any file with
    the same columns) to unordered pair samples; failed rows (success=0)
    are skipped."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"initiator", "responder", "distance_m", "time_us", "success"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise MalformedRow(1, f"header must contain {sorted(required)}")
    samples = []
    for i, row in enumerate(reader, start=2):
        try:
            if row["success"].strip() != "1":
                continue
            samples.append(
                make_sample(
                    parse_address(_addr(row["initiator"])),
                    parse_address(_addr(row["responder"])),
                    float(row["distance_m"]),
                    int(row["time_us"]) * US,
                )
            )
        except MalformedRow:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedRow(i, str(exc)) from exc
    return samples


def _addr(text):
    text = text.strip()
    if ":" in text:
        return text
    return int(text)


def group_by_pair(samples) -> dict:
    out: dict = {}
    for s in samples:
        out.setdefault(s.pair, []).append(s)
    for lst in out.values():
        lst.sort(key=lambda s: s.time)
    return out


def user_view(samples, user: int) -> list[tuple[int, float, int]]:
    """One user's (neighbor, distance, time) stream from pair samples."""
    out = []
    for s in samples:
        if user in s.pair:
            other = s.pair[0] if s.pair[1] == user else s.pair[1]
            out.append((other, s.distance_m, s.time))
    out.sort(key=lambda x: x[2])
    return out


def contacts_csv(contacts) -> str:
    lines = ["user_a,user_b,t_open_us,t_end_us,duration_s,avg_m,risk"]
    for c in sorted(contacts, key=lambda c: (c.t_open, c.pair)):
        lines.append(
            f"{c.pair[0]},{c.pair[1]},{c.t_open // US},{c.t_end // US},"
            f"{c.duration / SEC:.1f},{c.avg_distance_m:.3f},{c.risk}"
        )
    return "\n".join(lines) + "\n"


def dyads_csv(stats, n_participants: int) -> str:
    lines = [f"# possible_dyads,{possible_dyads(n_participants)}",
             "day,user_a,user_b,total_min,avg_m"]
    for day in sorted(stats):
        for pair in sorted(stats[day]):
            tot, avg = stats[day][pair]
            lines.append(
                f"{day},{pair[0]},{pair[1]},{tot / _MIN:.2f},{avg:.3f}"
            )
    return "\n".join(lines) + "\n"


def exposure_csv(exposure, bands) -> str:
    lines = ["neighbor,band_lo_m,band_hi_m,total_min"]
    bands = sorted(bands)
    for user in sorted(exposure):
        for i, (lo, hi) in enumerate(bands):
            tot = exposure[user].get(i, 0)
            if tot:
                lines.append(f"{user},{lo},{hi},{tot / _MIN:.2f}")
    return "\n".join(lines) + "\n"
