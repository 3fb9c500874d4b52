"""Trace-segment library and the online replay scheduler.

A segment is the atomic replay unit: an ordered run of file calls driven
by one input event, annotated with the plausible secret it encodes. The
library tracks the secret multiset's cardinality and Shannon entropy
(plug-in estimate) so corpus authors can judge how much cover the
segments provide. The scheduler samples whole segments uniformly with
replacement, rewrites every intra-segment gap to the maximum gap ever
observed, and paces emissions so the sybil stream's call and byte rates
track the actual stream's running statistics.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

from .simfs import (FLAG_CREATE, FileCall, SimFs)
from .util import derive_seed

US_PER_S = 1_000_000


class TraceError(Exception):
    pass


@dataclass(slots=True)
class TraceSegment:
    calls: list
    secret_label: str
    source: str = "recorded"          # recorded | deployment
    input_event_id: int = 0

    def __post_init__(self):
        if not self.calls:
            raise TraceError("segment must contain calls")

    def intra_gaps(self) -> list[int]:
        ts = [c.timestamp for c in self.calls]
        return [b - a for a, b in zip(ts, ts[1:])]

    def read_bytes(self) -> int:
        return sum(c.size for c in self.calls if c.kind == "read")

    def write_bytes(self) -> int:
        return sum(c.size for c in self.calls if c.kind == "write")


class TraceLibrary:
    """Segment pool plus secret-set metrics and the running max gap."""

    def __init__(self, renew_fraction: float = 0.5):
        self.segments: list[TraceSegment] = []
        self.renew_fraction = renew_fraction
        self.max_intercall_interval = 0
        self._labels = Counter()
        self._deployment_count = 0

    def __len__(self) -> int:
        return len(self.segments)

    def ingest_segment(self, segment: TraceSegment) -> None:
        self.segments.append(segment)
        self._labels[segment.secret_label] += 1
        gaps = segment.intra_gaps()
        if gaps:
            self.max_intercall_interval = max(self.max_intercall_interval,
                                              max(gaps))
        if segment.source == "deployment":
            self._deployment_count += 1
            # Deployment traffic gradually renews the recorded corpus.
            if self._deployment_count > self.renew_fraction * len(self.segments):
                self._evict_oldest_recorded()

    def _evict_oldest_recorded(self) -> None:
        for i, seg in enumerate(self.segments):
            if seg.source == "recorded":
                self._labels[seg.secret_label] -= 1
                if not self._labels[seg.secret_label]:
                    del self._labels[seg.secret_label]
                del self.segments[i]
                return

    @property
    def cardinality(self) -> int:
        return len(self._labels)

    def entropy(self) -> float:
        """Plug-in (maximum-likelihood) Shannon entropy of the empirical
        secret distribution, in bits. Biased low for small samples."""
        if not self.segments:
            raise TraceError("entropy of an empty library")
        n = sum(self._labels.values())
        h = 0.0
        for count in self._labels.values():
            p = count / n
            h -= p * math.log2(p)
        return h

    def mean_segment_calls(self) -> float:
        return sum(len(s.calls) for s in self.segments) / len(self.segments)

    def stats_report(self) -> str:
        lines = [
            f"segments = {len(self.segments)}",
            f"secret_cardinality = {self.cardinality}",
            f"secret_entropy_bits = {self.entropy():.4f}",
            f"max_intercall_interval_us = {self.max_intercall_interval}",
            f"mean_segment_calls = {self.mean_segment_calls():.2f}",
        ]
        return "\n".join(lines) + "\n"


@dataclass(slots=True)
class StreamStats:
    """Running statistics of the actual stream the replay must shadow."""
    call_rate: float = 10.0          # calls per second
    read_rate: float = 0.0           # bytes per second
    write_rate: float = 0.0


@dataclass(slots=True)
class ReplayPlan:
    band: float = 0.2                # allowed relative rate deviation
    window_us: int = 5 * US_PER_S    # tracking window
    min_gap_us: int = 1


class ReplayScheduler:
    """Per-sybil-image emitter of whole segments at adapted random gaps.

    Pacing keeps the cumulative emitted-call count on the actual stream's
    rate line; an exponential jitter keeps individual intervals random.
    """

    def __init__(self, library: TraceLibrary, plan: ReplayPlan, rng,
                 token_source=None):
        self.library = library
        self.plan = plan
        self.rng = rng
        self.tokens = token_source
        self.emission_counts = Counter()
        self.emitted_calls = 0
        self.started_at: int | None = None

    def _fresh_ref(self) -> int:
        return self.tokens.issue() if self.tokens else self.rng.getrandbits(64)

    def next_sybil_batch(self, actual_stats: StreamStats,
                         now: int) -> tuple[int, list[FileCall]]:
        """Returns (start_time, calls): one whole segment, never split,
        sampled uniformly with replacement; every intra-segment gap is
        rewritten to the library's running maximum."""
        if not self.library.segments:
            raise TraceError("replay from an empty library")
        if self.started_at is None:
            self.started_at = now
        idx = self.rng.randrange(len(self.library.segments))
        self.emission_counts[idx] += 1
        segment = self.library.segments[idx]

        rate_us = max(actual_stats.call_rate, 1e-9) / US_PER_S
        ideal = self.started_at + self.emitted_calls / rate_us
        mean_jitter = max(self.plan.min_gap_us,
                          0.2 * len(segment.calls) / rate_us)
        start = max(now, int(ideal)) + 1 + int(
            self.rng.expovariate(1.0 / mean_jitter))

        gap = self.library.max_intercall_interval
        calls = []
        t = start
        for i, call in enumerate(segment.calls):
            if i:
                t += gap
            ref = self._fresh_ref() if call.buffer_ref is not None else None
            calls.append(replace(call, timestamp=t, buffer_ref=ref))
        self.emitted_calls += len(calls)
        return start, calls


def adjust_for_image(call: FileCall, fs: SimFs) -> FileCall:
    """Rewrite a replayed call so it is guaranteed executable on the
    target image: redirect missing paths, clamp out-of-bound offsets,
    cap writes to the free space. Unresolvable calls degrade to an
    fstat on the image root."""
    kind, path = call.kind, call.path

    if kind == "close":
        return call
    if kind == "mkdir":
        if fs.exists(path):
            return _degrade(call, path)
        parent, name = SimFs._split(path)
        if not fs.is_dir(parent):
            call = replace(call, path="/" + name)
        return call if fs.free_blocks() >= 2 else _degrade(call, "/")
    if kind == "create" or (kind == "open" and call.flags & FLAG_CREATE):
        if fs.is_dir(path):
            return _degrade(call, path)
        parent, name = SimFs._split(path)
        if not fs.is_dir(parent):
            call = replace(call, path="/" + name)
        if not fs.exists(call.path) and (fs.free_blocks() < 2
                                         or fs.free_inodes() < 1):
            return _degrade(call, "/")
        return call

    if not fs.exists(path) or fs.is_dir(path):
        target = _redirect_target(fs, path)
        if target is None:
            return _degrade(call, "/")
        call = replace(call, path=target)
        path = target

    if kind == "read":
        size = fs.file_size(path)
        offset = min(call.offset, size)
        return replace(call, offset=offset, size=min(call.size, size - offset))
    if kind == "write":
        offset = min(call.offset, fs.file_size(path))
        need = -(-max(0, offset + call.size) // fs.layout.block_size) + 2
        if call.size and fs.free_blocks() < need:
            capped = max(0, (fs.free_blocks() - 2)) * fs.layout.block_size
            if capped <= 0:
                return _degrade(call, "/")
            return replace(call, offset=offset, size=min(call.size, capped))
        return replace(call, offset=offset)
    if kind == "truncate":
        return replace(call, size=min(call.size, fs.file_size(path)))
    return call


def _degrade(call: FileCall, path: str) -> FileCall:
    return FileCall("fstat", path, timestamp=call.timestamp)


def _redirect_target(fs: SimFs, path: str) -> str | None:
    """Deterministic same-directory redirect for a missing path."""
    parent, name = SimFs._split(path)
    candidates = fs.list_files(parent) if fs.is_dir(parent) else []
    if not candidates:
        candidates = fs.list_files("/")
    if not candidates:
        return None
    return candidates[derive_seed(0, path) % len(candidates)]


# -- library file format -------------------------------------------------
# Line-delimited structured text, one call per line; segment boundaries
# are sentinel lines: "#segment <input_event_id> <source> <secret_label>".
# Call lines: "<timestamp_us> <kind> <path> <offset> <size> <flags> <buf>"
# where <buf> is 1 if the call moves filedata (the concrete opaque
# reference is minted at replay time).

def save_library(library: TraceLibrary, path) -> None:
    with open(path, "w") as f:
        for seg in library.segments:
            f.write(f"#segment {seg.input_event_id} {seg.source} "
                    f"{seg.secret_label}\n")
            for c in seg.calls:
                f.write(f"{c.timestamp} {c.kind} {c.path} {c.offset} "
                        f"{c.size} {c.flags} "
                        f"{1 if c.buffer_ref is not None else 0}\n")


def load_library(path, renew_fraction: float = 0.5) -> TraceLibrary:
    lib = TraceLibrary(renew_fraction)
    cur: list[FileCall] = []
    header = None

    def flush():
        if header is not None:
            lib.ingest_segment(TraceSegment(
                list(cur), header[2], header[1], int(header[0])))
        cur.clear()

    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#segment "):
                flush()
                header = line.split(" ", 3)[1:]
                continue
            ts, kind, cpath, offset, size, flags, buf = line.split(" ")
            cur.append(FileCall(
                kind, cpath, int(offset), int(size), int(flags),
                buffer_ref=0 if buf == "1" else None, timestamp=int(ts)))
    flush()
    return lib
