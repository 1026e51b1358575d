"""Fixed-capacity byte arena simulating MCU SRAM.

Every activation allocation during inference goes through an Arena, which
enforces the budget and records the peak.  Weights are not charged here:
they model Flash residency.  Regions are zero-initialized and released
explicitly; the executors follow a LIFO discipline per schedule stage so
the peak is deterministic.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class OutOfMemory(RuntimeError):
    """The artifact's model of an MCU OOM."""

    def __init__(self, requested: int, live: int, budget: int, stage: str = ""):
        self.requested = requested
        self.live = live
        self.budget = budget
        self.stage = stage
        where = f" in stage '{stage}'" if stage else ""
        super().__init__(
            f"out of memory{where}: requested {requested} B with {live} B live "
            f"under a {budget} B budget"
        )


class ArenaError(RuntimeError):
    """Misuse of the arena (double release, bad size)."""


@dataclass
class AllocEvent:
    tag: str
    bytes: int  # positive alloc, negative release
    live: int  # live bytes after the event
    peak: int  # high-water mark after the event
    stage: str


@dataclass
class ArenaStats:
    budget_bytes: int
    live_bytes: int
    peak_bytes: int
    stage_peaks: dict
    alloc_events: list


class Region:
    """A live allocation.  `view(shape)` exposes it as an int8 array."""

    def __init__(self, arena: "Arena", region_id: int, nbytes: int, tag: str):
        self._arena = arena
        self.region_id = region_id
        self.nbytes = nbytes
        self.tag = tag
        self.buf = np.zeros(nbytes, dtype=np.int8)
        self.live = True

    def view(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if n != self.nbytes:
            raise ArenaError(f"region '{self.tag}' holds {self.nbytes} B, asked to view {n}")
        return self.buf.reshape(shape)


class Arena:
    def __init__(self, budget_bytes: int):
        if budget_bytes <= 0:
            raise ArenaError(f"budget must be positive, got {budget_bytes}")
        self.budget_bytes = int(budget_bytes)
        self.live_bytes = 0
        self.peak_bytes = 0
        self.events: list[AllocEvent] = []
        self.stage_peaks: dict[str, int] = {}
        self._stage = ""
        self._next_id = 0
        self._live_regions: dict[int, Region] = {}

    # -- stage scoping ---------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        prev = self._stage
        self._stage = name
        # live bytes carried into the stage count toward its peak
        self.stage_peaks[name] = max(self.stage_peaks.get(name, 0), self.live_bytes)
        try:
            yield self
        finally:
            self._stage = prev

    # -- allocation ------------------------------------------------------

    def alloc(self, nbytes: int, tag: str) -> Region:
        if nbytes <= 0:
            raise ArenaError(f"allocation size must be positive, got {nbytes}")
        nbytes = int(nbytes)
        if self.live_bytes + nbytes > self.budget_bytes:
            raise OutOfMemory(nbytes, self.live_bytes, self.budget_bytes, self._stage)
        region = Region(self, self._next_id, nbytes, tag)
        self._next_id += 1
        self._live_regions[region.region_id] = region
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        if self._stage:
            self.stage_peaks[self._stage] = max(
                self.stage_peaks.get(self._stage, 0), self.live_bytes
            )
        self.events.append(AllocEvent(tag, nbytes, self.live_bytes, self.peak_bytes, self._stage))
        return region

    def release(self, region: Region) -> None:
        if not region.live or region.region_id not in self._live_regions:
            raise ArenaError(f"double release of region '{region.tag}'")
        region.live = False
        del self._live_regions[region.region_id]
        self.live_bytes -= region.nbytes
        self.events.append(
            AllocEvent(region.tag, -region.nbytes, self.live_bytes, self.peak_bytes, self._stage)
        )

    # -- reporting -------------------------------------------------------

    def stats(self) -> ArenaStats:
        return ArenaStats(
            budget_bytes=self.budget_bytes,
            live_bytes=self.live_bytes,
            peak_bytes=self.peak_bytes,
            stage_peaks=dict(self.stage_peaks),
            alloc_events=list(self.events),
        )

    def trace_jsonl(self) -> str:
        lines = []
        for ev in self.events:
            lines.append(
                json.dumps(
                    {
                        "tag": ev.tag,
                        "bytes": ev.bytes,
                        "live": ev.live,
                        "peak": ev.peak,
                        "stage": ev.stage,
                    }
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")


def replay_peak(events) -> int:
    """Recompute the high-water mark from the event log (test oracle)."""
    live = 0
    peak = 0
    for ev in events:
        live += ev.bytes
        peak = max(peak, live)
    return peak
