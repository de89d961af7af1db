"""Alignment of scan counters across several lidars.

The lidars share a trigger but their scan counters start at arbitrary values.
Offsets are found from runs of promptly received scans, after which scans are
grouped by ``counter - offset``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class NotInitialized(RuntimeError):
    """No qualifying run of prompt scans has been buffered yet."""


@dataclass(frozen=True)
class ScanHeader:
    lidar_id: int
    counter: int
    start_time: float
    receive_time: float


@dataclass
class SyncState:
    offsets: list[int] = field(default_factory=list)
    mean_latency: float = 0.0
    initialized: bool = False
    # trigger phase per lidar (asynchronous triggering); scans of different phases never share a group
    phases: list[int] = field(default_factory=list)


def latency(header: ScanHeader) -> float:
    dt = header.receive_time - header.start_time
    if dt < 0:
        raise ValueError(
            f"lidar {header.lidar_id} scan {header.counter} received before it started ({dt:.6f} s)"
        )
    return dt


def _first_run(stream: Sequence[ScanHeader], mean_latency: float, run_length: int,
               start: int = 0) -> int | None:
    count = 0
    for k in range(start, len(stream)):
        if latency(stream[k]) < mean_latency:
            count += 1
            if count == run_length:
                return k - run_length + 1
        else:
            count = 0
    return None


def _runs(stream, mean_latency, run_length):
    k = 0
    while True:
        s = _first_run(stream, mean_latency, run_length, k)
        if s is None:
            return
        yield stream[s:s + run_length]
        k = s + 1


def find_counter_offsets(streams: Sequence[Sequence[ScanHeader]], mean_latency: float,
                         run_length: int = 5, period: float | None = None) -> SyncState:
    """Counter offsets of every lidar relative to lidar 0.

    Runs of ``run_length`` consecutive scans with latency below
    ``mean_latency`` are searched per lidar. Each scan of a lidar's first run
    is matched to the scan of lidar 0's nearest run by start time; the
    counter difference, less the whole periods between the two start times,
    votes for the offset. Without a period estimate the runs must overlap in
    time.

    Raises:
        NotInitialized: if some lidar has no qualifying run yet.
    """
    if not streams:
        raise ValueError("need at least one stream")
    if period is None:
        period = _estimate_period(streams)
    if period is not None and mean_latency >= period:
        raise ValueError("offset search assumes the mean latency is below the scan period")
    runs = [list(_runs(list(s), mean_latency, run_length)) for s in streams]
    for lid, r in enumerate(runs):
        if not r:
            raise NotInitialized(f"lidar {lid} has no run of {run_length} prompt scans yet")
    ref = [h for run in runs[0] for h in run]
    ref_t = np.array([h.start_time for h in ref])
    offsets = [0]
    for lid in range(1, len(streams)):
        votes: dict[int, int] = {}
        for h in runs[lid][0]:
            k = int(np.argmin(np.abs(ref_t - h.start_time)))
            dt = h.start_time - ref_t[k]
            if period:
                # a half-period phase shift (asynchronous trigger) always rounds down
                steps = math.floor(dt / period + 0.25)
            elif abs(dt) > 1e-6:
                continue
            else:
                steps = 0
            d = h.counter - ref[k].counter - steps
            votes[d] = votes.get(d, 0) + 1
        if not votes:
            raise NotInitialized(f"lidar {lid} has no prompt run matching a prompt run of lidar 0")
        offsets.append(max(votes, key=votes.get))
    return SyncState(offsets, mean_latency, True, [0] * len(offsets))


def _estimate_period(streams) -> float | None:
    diffs = []
    for s in streams:
        s = sorted(s, key=lambda h: h.counter)
        for a, b in zip(s, s[1:]):
            if b.counter == a.counter + 1:
                diffs.append(b.start_time - a.start_time)
    if not diffs:
        return None
    diffs.sort()
    return diffs[len(diffs) // 2]


class LatencyEstimator:
    """Running mean of the last ``window`` latencies per lidar."""

    def __init__(self, window: int = 100):
        self.window = window
        self._buf: dict[int, deque] = {}

    def add(self, header: ScanHeader) -> None:
        self._buf.setdefault(header.lidar_id, deque(maxlen=self.window)).append(latency(header))

    @property
    def mean(self) -> float:
        vals = [v for b in self._buf.values() for v in b]
        return sum(vals) / len(vals) if vals else float("inf")

    def per_lidar(self) -> dict[int, float]:
        return {k: sum(b) / len(b) for k, b in self._buf.items() if b}


@dataclass
class ScanGroup:
    aligned_counter: int
    phase: int
    headers: dict[int, ScanHeader]
    complete: bool

    @property
    def start_time(self) -> float:
        return min(h.start_time for h in self.headers.values())


class ScanGrouper:
    """Groups headers sharing an aligned counter; single-writer.

    A group is emitted when every lidar (of its phase) contributed, or as a
    partial group once ``period`` has elapsed since its first scan arrived.
    """

    def __init__(self, state: SyncState, period: float):
        if not state.initialized:
            raise NotInitialized("scan grouping needs initialized counter offsets")
        self.state = state
        self.period = period
        self._pending: dict[tuple[int, int], tuple[float, dict[int, ScanHeader]]] = {}
        self._emitted: set[tuple[int, int]] = set()

    def _phase(self, lidar_id: int) -> int:
        ph = self.state.phases
        return ph[lidar_id] if lidar_id < len(ph) else 0

    def _members(self, phase: int) -> int:
        return sum(1 for k in range(len(self.state.offsets)) if self._phase(k) == phase)

    def push(self, header: ScanHeader) -> list[ScanGroup]:
        """Feed one header (in receive order); returns groups ready for processing."""
        out = self.flush(header.receive_time)
        aligned = header.counter - self.state.offsets[header.lidar_id]
        key = (aligned, self._phase(header.lidar_id))
        if key in self._emitted:
            log.warning("late scan %s for an already emitted group dropped", header)
            return out
        first, members = self._pending.setdefault(key, (header.receive_time, {}))
        if header.lidar_id in members:
            log.warning("duplicate counter %d from lidar %d rejected", header.counter, header.lidar_id)
            return out
        if members:
            t0 = next(iter(members.values())).start_time
            if abs(header.start_time - t0) > 0.5 * self.period:
                log.warning("scan %s does not match its group's trigger time; rejected", header)
                return out
        members[header.lidar_id] = header
        if len(members) == self._members(key[1]):
            del self._pending[key]
            self._emitted.add(key)
            out.append(ScanGroup(key[0], key[1], members, True))
        return out

    def flush(self, now: float) -> list[ScanGroup]:
        """Emit partial groups whose timeout has elapsed."""
        out = []
        for key in sorted(self._pending):
            first, members = self._pending[key]
            if now - first >= self.period:
                out.append(ScanGroup(key[0], key[1], members, False))
        for g in out:
            del self._pending[(g.aligned_counter, g.phase)]
            self._emitted.add((g.aligned_counter, g.phase))
        return out


def group_scans(headers: Iterable[ScanHeader], state: SyncState, period: float) -> list[ScanGroup]:
    """Group a whole recorded stream (receive order); leftovers are flushed as partial groups."""
    grouper = ScanGrouper(state, period)
    out = []
    for h in sorted(headers, key=lambda h: h.receive_time):
        out.extend(grouper.push(h))
    out.extend(grouper.flush(float("inf")))
    return out


def read_headers_csv(path: str | Path) -> list[ScanHeader]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["lidar_id", "counter", "start_time", "receive_time"]
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if reader.fieldnames and missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        return [
            ScanHeader(int(r["lidar_id"]), int(r["counter"]), float(r["start_time"]), float(r["receive_time"]))
            for r in reader
        ]


def write_headers_csv(path: str | Path, headers: Iterable[ScanHeader]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lidar_id", "counter", "start_time", "receive_time"])
        for h in headers:
            w.writerow([h.lidar_id, h.counter, repr(h.start_time), repr(h.receive_time)])
