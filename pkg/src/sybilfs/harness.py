"""Experiment orchestration: virtual-time event loop, end-to-end runs,
metric collection and persistence.

A run wires everything together: K images are initialized identically
(one actual, K-1 sybils), the trustlet driver replays corpus segments on
the actual image while independent schedulers emit sybil streams paced to
the actual stream's rates, the identity shuffler triggers by time and
activity, and the observer pass computes leakage metrics afterwards. The
whole run is a deterministic function of its config: a fixed seed yields
byte-identical output files.
"""

from __future__ import annotations

import heapq
import json
import os
import threading
from dataclasses import dataclass, field, replace

from .backstore import Backstore, ObservationLog, quantile
from .btt import BttStore
from .corpus import build_corpus
from .fids import FidsConfig, FidsController
from .observer import (anonymity_curve, extinct_lineage_audit, guess_formula,
                       metadata_delays, mutual_information,
                       observation_windows, random_guess_attack)
from .simfs import DATA, FileCall, SimFs
from .tracegen import ReplayPlan, ReplayScheduler, StreamStats, adjust_for_image
from .util import SimClock, TokenSource, derive_rng, pattern_bytes

US_PER_MS = 1_000


class HarnessError(Exception):
    pass


@dataclass
class ExperimentConfig:
    k: int = 5
    t_us: int = 1_000_000
    n_calls: int = 2_000
    seed: int = 1
    workload: str = "query"
    disk_blocks: int = 8192
    padding_percentile: float = 0.99
    duration_us: int = 3_000_000
    output_dir: str = "out"
    cow: bool = True
    padding: bool = True
    input_gap_us: int = 60_000          # mean gap between trustlet inputs
    mi_samples: int = 2_000

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise HarnessError(f"unknown config keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class MetricsReport:
    fields: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.fields):
            val = self.fields[key]
            if isinstance(val, float):
                val = f"{val:.6g}"
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


class EventLoop:
    """Deterministic virtual-time scheduler."""

    def __init__(self, clock: SimClock):
        self.clock = clock
        self._heap: list = []
        self._seq = 0

    def at(self, t: int, fn) -> None:
        heapq.heappush(self._heap, (t, self._seq, fn))
        self._seq += 1

    def run_until(self, end: int) -> None:
        while self._heap and self._heap[0][0] <= end:
            t, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            fn()
        self.clock.advance_to(end)


class StreamTracker:
    """Running call/byte rates of one stream."""

    def __init__(self, t0: int):
        self.t0 = t0
        self.calls = 0
        self.read_bytes = 0
        self.write_bytes = 0

    def note(self, call: FileCall) -> None:
        self.calls += 1
        if call.kind == "read":
            self.read_bytes += call.size
        elif call.kind == "write":
            self.write_bytes += call.size

    def stats(self, now: int, default_rate: float = 10.0) -> StreamStats:
        dt = max(1, now - self.t0) / 1_000_000
        if not self.calls:
            return StreamStats(default_rate, 0.0, 0.0)
        return StreamStats(self.calls / dt, self.read_bytes / dt,
                           self.write_bytes / dt)


class Experiment:
    """One end-to-end run under a fixed config."""

    def __init__(self, config: ExperimentConfig):
        self.cfg = config
        self.clock = SimClock()
        self.loop = EventLoop(self.clock)
        self.corpus = build_corpus(config.workload, config.seed)
        key = pattern_bytes(f"key:{config.seed}".encode(), 32)
        self.btt = BttStore(config.disk_blocks, key,
                            derive_rng(config.seed, "btt"),
                            cow=config.cow)
        self.log = ObservationLog()
        self.backstore = Backstore(self.btt, self.clock,
                                   derive_rng(config.seed, "latency"),
                                   log=self.log)
        self.tokens = TokenSource(derive_rng(config.seed, "tokens"))
        self.fs: dict[int, SimFs] = {}
        self.controller: FidsController | None = None
        self.actual_id = derive_rng(config.seed, "role").randrange(config.k)
        self.trackers: dict[int, StreamTracker] = {}
        self.calls_log: list[str] = []
        self.call_errors = 0

    # -- setup ------------------------------------------------------------

    def setup_images(self) -> None:
        cfg = self.cfg
        name_rng = derive_rng(cfg.seed, "fids")
        if cfg.k > 1:
            self.controller = FidsController(
                FidsConfig(cfg.k, cfg.t_us, cfg.n_calls),
                self.backstore, name_rng,
                on_fork=self._on_fork, on_retire=self._on_retire)
        for image_id in range(cfg.k):
            actual = image_id == self.actual_id
            name = (self.controller.fresh_name() if self.controller
                    else f"{name_rng.getrandbits(64):016x}")
            self.backstore.register_image(image_id, name, actual=actual)
            fs = SimFs(image_id, cfg.disk_blocks)
            self.fs[image_id] = fs
            self.trackers[image_id] = StreamTracker(0)
            for req in fs.mkfs_requests:
                self.backstore.handle_request(req)
            for call in self.corpus.setup_calls:
                self.execute_call(image_id, replace(call), log_call=False)
            if self.controller:
                self.controller.adopt_initial(image_id, name, image_id,
                                              actual, 0)
        # Initialization traffic does not count toward stream rates.
        self.trackers = {i: StreamTracker(0) for i in self.trackers}
        if self.controller:
            for img in self.controller.images.values():
                img.calls_served = 0
            self.controller.log_init(0)
        if cfg.padding:
            self.backstore.profile_from_model(
                percentile=cfg.padding_percentile)

    # -- call execution -----------------------------------------------------

    def execute_call(self, image_id: int, call: FileCall,
                     log_call: bool = True) -> None:
        actual = image_id == self.actual_id
        if call.buffer_ref is not None:
            token = self.tokens.issue()
            call = replace(call, buffer_ref=token)
            if call.kind == "write" and actual:
                tag = f"{self.cfg.seed}:{call.path}:{call.offset}".encode()
                self.backstore.buffers[token] = bytearray(
                    pattern_bytes(tag, call.size))
            else:
                self.backstore.buffers[token] = bytearray(call.size)
        if log_call:
            self.calls_log.append(json.dumps(
                {"t": call.timestamp, "img": self.backstore.names[image_id],
                 "kind": call.kind, "path": call.path, "off": call.offset,
                 "size": call.size, "flags": call.flags},
                sort_keys=True, separators=(",", ":")))
        try:
            for req in self.fs[image_id].exec_file_call(call):
                self.backstore.handle_request(req)
        finally:
            if call.buffer_ref is not None:
                self.tokens.retire(call.buffer_ref)
                del self.backstore.buffers[call.buffer_ref]
        self.trackers[image_id].note(call)
        if (self.controller and image_id in self.controller.images
                and self.controller.note_call(image_id)):
            self.loop.at(self.clock.now + 1, self._fids_once)

    # -- actors -----------------------------------------------------------------

    def _pad_gaps(self, calls: list[FileCall], start: int) -> list[FileCall]:
        gap = self.corpus.library.max_intercall_interval
        out = []
        t = start
        for i, c in enumerate(calls):
            if i:
                t += gap
            out.append(replace(c, timestamp=t))
        return out

    def _start_actual_driver(self) -> None:
        rng = derive_rng(self.cfg.seed, "trustlet")

        def fire():
            segs = self.corpus.library.segments
            seg = segs[rng.randrange(len(segs))]
            calls = self._pad_gaps(seg.calls, self.clock.now)
            for c in calls:
                self.loop.at(c.timestamp,
                             lambda c=c: self.execute_call(self.actual_id, c))
            done = calls[-1].timestamp
            nxt = max(done, self.clock.now + int(
                rng.expovariate(1.0 / self.cfg.input_gap_us))) + 1
            self.loop.at(nxt, fire)

        self.loop.at(1 + int(rng.expovariate(1.0 / self.cfg.input_gap_us)),
                     fire)

    def _start_sybil_drivers(self) -> None:
        for image_id in range(self.cfg.k):
            if image_id != self.actual_id:
                self._start_sybil_driver(image_id, start_at=1)

    def _start_sybil_driver(self, image_id: int, start_at: int) -> None:
        sched = ReplayScheduler(
            self.corpus.library, ReplayPlan(),
            derive_rng(self.cfg.seed, f"sybil:{image_id}"))

        def emit():
            if image_id not in self.fs:
                return                    # image retired: stop the chain
            stats = self.trackers[self.actual_id].stats(
                self.clock.now,
                default_rate=1_000_000 / self.cfg.input_gap_us * 8)
            _, calls = sched.next_sybil_batch(stats, self.clock.now)
            for c in calls:
                self.loop.at(c.timestamp, lambda c=c: self._execute_sybil(
                    image_id, c))
            self.loop.at(calls[-1].timestamp + 1, emit)

        self.loop.at(start_at, emit)

    def _execute_sybil(self, image_id: int, call: FileCall) -> None:
        if image_id not in self.fs:
            return                       # retired while the call was in flight
        adjusted = adjust_for_image(call, self.fs[image_id])
        self.execute_call(image_id, adjusted)

    def _fids_once(self) -> None:
        if self.controller:
            self.controller.maintain(self.clock.now)

    def _on_fork(self, parent_id: int, child_id: int) -> None:
        self.fs[child_id] = self.fs[parent_id].clone(child_id)
        self.trackers[child_id] = StreamTracker(self.clock.now)
        self._start_sybil_driver(child_id, start_at=self.clock.now + 1)

    def _on_retire(self, image_id: int) -> None:
        del self.fs[image_id]

    def _start_fids_actor(self) -> None:
        if not self.controller:
            return

        def wake():
            self.controller.maintain(self.clock.now)
            nxt = max(self.clock.now + 1, self.controller.next_due())
            self.loop.at(nxt, wake)

        self.loop.at(self.controller.next_due(), wake)

    # -- main -----------------------------------------------------------------------

    def run(self) -> MetricsReport:
        cfg = self.cfg
        self.setup_images()
        self._start_actual_driver()
        if cfg.k > 1:
            self._start_sybil_drivers()
            self._start_fids_actor()
        self.loop.run_until(cfg.duration_us)
        return self.collect()

    # -- metrics ------------------------------------------------------------------------

    def collect(self) -> MetricsReport:
        cfg = self.cfg
        m: dict = {
            "config.k": cfg.k, "config.seed": cfg.seed,
            "config.workload": cfg.workload, "config.t_us": cfg.t_us,
            "config.n_calls": cfg.n_calls,
            "config.duration_us": cfg.duration_us,
            "config.cow": cfg.cow,
        }
        actual_tr = self.trackers[self.actual_id]
        m["stream.actual_calls"] = actual_tr.calls
        m["stream.sybil_calls"] = sum(
            t.calls for i, t in self.trackers.items() if i != self.actual_id)

        m["disk.actual_region_bytes"] = len(self.btt.dev0.content) * 4096
        m["disk.sybil_blob_bytes"] = self.btt.blob_bytes()
        sybils = max(1, cfg.k - 1)
        m["disk.blob_bytes_per_sybil_image"] = self.btt.blob_bytes() / sybils
        m["disk.blob_bytes_reconciled"] = (
            self.btt.blob.allocated_blocks * 4096 == self.btt.blob_bytes())
        m["disk.sybil_filedata_physical_blocks"] = self._sybil_filedata_blocks()
        m["disk.sybil_filedata_discarded_requests"] = \
            self.backstore.counters["sybil_filedata_discarded"]

        n = self.corpus.library.cardinality
        m["attack.library_cardinality"] = n
        m["attack.library_entropy_bits"] = self.corpus.library.entropy()
        if cfg.k > 1:
            m["attack.guess_rate"] = random_guess_attack(
                cfg.k, n, seed=cfg.seed)
            m["attack.guess_formula"] = guess_formula(cfg.k, n)
        else:
            m["attack.guess_rate"] = 1.0
            m["attack.guess_formula"] = 1.0

        delays = [d for _, d in metadata_delays(self.log.records)]
        if delays:
            m["delay.meta_mean_us"] = sum(delays) / len(delays)
            m["delay.meta_p99_us"] = quantile(delays, 0.99)
        if self.backstore.delay_model:
            m["delay.pad_threshold_us"] = \
                self.backstore.delay_model.pad_threshold

        mi_pre, mi_post = timing_mi_pair(cfg.seed, cfg.mi_samples,
                                         cfg.padding_percentile)
        m["mi.unpadded_bits"] = mi_pre
        m["mi.padded_bits"] = mi_post

        if self.controller:
            events = self.controller.events
            for op, count in sorted(self.controller.op_counts.items()):
                m[f"fids.{op}_count"] = count
            m["fids.quiesce_total_us"] = self.controller.total_quiesce_us
            verdict = extinct_lineage_audit(events)
            m["fids.extinct_audit_pass"] = verdict.passed
            windows = observation_windows(events, cfg.duration_us)
            m["fids.max_observation_window_us"] = max(windows.values())
            target = self.controller.images[self.actual_id].disk_name
            self._p_curve = [(r.r, r.m, r.p)
                             for r in anonymity_curve(events, target)]
            m["anonymity.rounds"] = len(self._p_curve) - 1
            m["anonymity.final_p"] = self._p_curve[-1][2]
        else:
            self._p_curve = [(0, 1, 1.0)]
            m["fids.shuffle_count"] = 0
            m["fids.fork_count"] = 0
            m["fids.retire_count"] = 0
        m["errors.call_errors"] = self.call_errors
        return MetricsReport(m)

    def _sybil_filedata_blocks(self) -> int:
        count = 0
        for (image_id, _), st in self.backstore.states.items():
            if image_id != self.actual_id and st.tag == DATA and st.materialized:
                count += 1
        return count

    # -- persistence -----------------------------------------------------------------------

    def write_outputs(self, report: MetricsReport) -> None:
        out = self.cfg.output_dir
        os.makedirs(out, exist_ok=True)
        _atomic_write(os.path.join(out, "report.txt"), report.to_text())
        _atomic_write(os.path.join(out, "observations.log"),
                      "".join(line + "\n" for line in self.log.lines()))
        _atomic_write(os.path.join(out, "calls.log"),
                      "".join(line + "\n" for line in self.calls_log))
        if self.controller:
            _atomic_write(os.path.join(out, "lineage.log"),
                          "".join(line + "\n"
                                  for line in self.controller.event_lines()))
        else:
            _atomic_write(os.path.join(out, "lineage.log"), "")
        _atomic_write(os.path.join(out, "p_curve.dat"),
                      "".join(f"{r} {mv} {p:.6g}\n"
                              for r, mv, p in self._p_curve))
        _atomic_write(
            os.path.join(out, "mi.dat"),
            f"0 {report.fields['mi.unpadded_bits']:.6g}\n"
            f"1 {report.fields['mi.padded_bits']:.6g}\n")
        names = {i: int(self.backstore.names[i], 16)
                 for i in sorted(self.btt.tables)}
        _atomic_write_bytes(os.path.join(out, "btts.bin"),
                            self.btt.serialize(names))


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def run(config: ExperimentConfig) -> MetricsReport:
    """Execute one experiment and write its outputs."""
    exp = Experiment(config)
    report = exp.run()
    exp.write_outputs(report)
    return report


def compare_cow(config: ExperimentConfig) -> dict:
    """Same run with CoW on and off; reports blob sizes and their ratio."""
    if config.k < 5:
        raise HarnessError("compare_cow requires k >= 5")
    on = Experiment(replace(config, cow=True,
                            output_dir=config.output_dir + "/cow_on")).run()
    off = Experiment(replace(config, cow=False,
                             output_dir=config.output_dir + "/cow_off")).run()
    cow_on = on.fields["disk.sybil_blob_bytes"]
    cow_off = off.fields["disk.sybil_blob_bytes"]
    return {"cow_on": cow_on, "cow_off": cow_off,
            "ratio": cow_off / max(1, cow_on)}


# -- timing side-channel experiment ---------------------------------------------

def timing_mi_pair(seed: int, samples: int = 2000,
                   percentile: float = 0.99) -> tuple[float, float]:
    """MI between reported metadata delay and the image's covert role,
    with and without padding, on a minimal two-image setup."""
    results = []
    for padded in (False, True):
        clock = SimClock()
        store = BttStore(1024, pattern_bytes(b"mi-key", 32),
                         derive_rng(seed, "mi-btt"))
        bs = Backstore(store, clock, derive_rng(seed, "mi-lat"))
        bs.register_image(0, "act0", actual=True)
        bs.register_image(1, "syb0")
        for image_id in (0, 1):
            fs = SimFs(image_id, 1024)
            for req in fs.mkfs_requests:
                bs.handle_request(req)
        if padded:
            bs.profile_from_model(percentile=percentile)
        rng = derive_rng(seed, "mi-probe")
        delays, labels = [], []
        for _ in range(samples):
            image_id = rng.randrange(2)
            vblock = rng.randrange(3)    # metadata blocks written at mkfs
            data = bs.os_read_block(image_id, vblock)
            assert data is not None
            delays.append(bs.log.records[-1]["d"])
            labels.append(image_id)
        results.append(mutual_information(delays, labels,
                                          min_samples=min(1000, samples)))
    return results[0], results[1]


# -- stress mode -------------------------------------------------------------------

def run_stress(config: ExperimentConfig) -> MetricsReport:
    """Drive every image from its own OS worker thread against the shared
    backstore; timing metrics are disabled, the run checks the
    concurrency contracts (per-image ordering, refcount conservation,
    zero sybil filedata storage)."""
    cfg = config
    clock = SimClock()
    key = pattern_bytes(f"key:{cfg.seed}".encode(), 32)
    store = BttStore(cfg.disk_blocks, key, derive_rng(cfg.seed, "btt"))
    bs = Backstore(store, clock, derive_rng(cfg.seed, "latency"))
    corpus = build_corpus(cfg.workload, cfg.seed)
    images = {}
    for image_id in range(cfg.k):
        bs.register_image(image_id, f"{image_id:016x}",
                          actual=image_id == 0)
        fs = SimFs(image_id, cfg.disk_blocks)
        images[image_id] = fs
        for req in fs.mkfs_requests:
            bs.handle_request(req)

    errors: list[str] = []

    def worker(image_id: int):
        fs = images[image_id]
        rng = derive_rng(cfg.seed, f"stress:{image_id}")
        try:
            for call in corpus.setup_calls:
                _stress_call(bs, fs, replace(call), rng)
            for _ in range(40):
                seg = corpus.library.segments[
                    rng.randrange(len(corpus.library.segments))]
                for call in seg.calls:
                    adjusted = adjust_for_image(call, fs)
                    _stress_call(bs, fs, adjusted, rng)
        except Exception as exc:          # surfaced via the report
            errors.append(f"image {image_id}: {exc!r}")

    threads = [threading.Thread(target=worker, args=(i,))
               for i in sorted(images)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    m = {
        "stress.k": cfg.k,
        "stress.errors": len(errors),
        "stress.refcounts_conserved":
            store.refcount_total() == store.total_entries(),
        "stress.sybil_filedata_discarded":
            bs.counters["sybil_filedata_discarded"],
    }
    if errors:
        m["stress.first_error"] = errors[0]
    return MetricsReport(m)


def _stress_call(bs: Backstore, fs: SimFs, call: FileCall, rng) -> None:
    if call.buffer_ref is not None:
        token = rng.getrandbits(64) | (fs.image_id << 48)
        call = replace(call, buffer_ref=token)
        bs.buffers[token] = bytearray(call.size)
    try:
        for req in fs.exec_file_call(call):
            bs.handle_request(req)
    finally:
        if call.buffer_ref is not None:
            bs.buffers.pop(call.buffer_ref, None)
