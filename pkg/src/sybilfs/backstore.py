"""Secure-backstore mediator for K concurrent filesystem images.

One registered image is actual: its requests execute against the physical
region. All others are sybils, emulated metadata-only: their filedata
writes are silently discarded and their filedata reads return zeros into
the opaque-reference buffer, with acceptance responses that are field-for-
field identical to the actual image's. Metadata requests of every image
are translated through the per-image BTT and their reported delays padded
to a profiled threshold so timing does not reveal where a block lives.

OS-facing block access obeys one rule: the OS reads back only blocks it
previously wrote. Reading anything else returns a zero block, uniformly
for actual and sybil images; writing over a filedata block erases it
before the grant and retags it as metadata.

Observation log schema (the adversary's only input), one JSON object per
line with keys: t (virtual time, us), ev ("req" | "os_read" | "os_write"),
img (disk name, hex), op ("read" | "write"), v (vblock), c (class), d
(reported delay in us, null for filedata acceptance), dig (8-hex digest
of the OS-visible response payload).
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

from .btt import BttStore
from .simfs import DATA, META, MIXED, DiskRequest
from .util import BLOCK_SIZE, digest16

ZERO_BLOCK = b"\x00" * BLOCK_SIZE


class BackstoreError(Exception):
    pass


@dataclass(slots=True)
class BlockState:
    """Per-(image, vblock) classification driving the access rules."""
    vblock: int
    tag: str                      # metadata | filedata | mixed
    os_written: bool = False
    materialized: bool = False
    pblock: int | None = None
    inline_ranges: list = field(default_factory=list)


@dataclass(slots=True)
class Response:
    accepted: bool = True
    delay: float | None = None
    data: bytes | None = None


class DelayModel:
    """Padding threshold at a configured percentile of profiled delays."""

    def __init__(self, pad_threshold: float, percentile: float, samples: int):
        self.pad_threshold = pad_threshold
        self.percentile = percentile
        self.samples = samples

    def report(self, raw: float) -> float:
        # The tail above the threshold passes through raw; the threshold
        # covers "most" delays, not all.
        return max(raw, self.pad_threshold)


class DiskLatencyModel:
    """Raw service times in microseconds, bounded noise.

    The contiguous region is slower than the compact blob, which is the
    leak the padding exists to close. Bounded noise keeps a finite worst
    case so padding at the cap silences the channel completely.
    """

    PARAMS = {"region": (1.0, 0.8), "blob": (0.3, 0.25)}

    def __init__(self, rng):
        self.rng = rng

    def sample(self, zone: str) -> float:
        base, scale = self.PARAMS[zone]
        return base + scale * self.rng.triangular(0.0, 1.0, 0.2)

    def cap(self, zone: str = "region") -> float:
        base, scale = self.PARAMS[zone]
        return base + scale


def quantile(samples, q: float) -> float:
    """Empirical quantile as an order statistic: ceil(q * n)-th value."""
    if not samples:
        raise BackstoreError("empty sample set")
    s = sorted(samples)
    idx = max(0, min(len(s) - 1, math.ceil(q * len(s)) - 1))
    return s[idx]


class ObservationLog:
    """Append-only record stream; everything the OS-side adversary sees."""

    def __init__(self):
        self.records: list[dict] = []

    def emit(self, **rec) -> None:
        self.records.append(rec)

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":"))
                for r in self.records]

    def dump(self, path) -> None:
        with open(path, "w") as f:
            for line in self.lines():
                f.write(line + "\n")


class Backstore:
    """Mediates every disk request from the K images."""

    def __init__(self, btt_store: BttStore, clock, rng,
                 latency: DiskLatencyModel | None = None,
                 log: ObservationLog | None = None):
        self.btt = btt_store
        self.clock = clock
        self.latency = latency or DiskLatencyModel(rng)
        self.log = log if log is not None else ObservationLog()
        self.delay_model: DelayModel | None = None
        self.states: dict[tuple[int, int], BlockState] = {}
        self.names: dict[int, str] = {}
        self.actual_image: int | None = None
        self.buffers: dict[int, bytearray] = {}
        self.inline_shadow: dict[tuple[int, int], bytearray] = {}
        self.counters = {
            "sybil_filedata_discarded": 0,
            "actual_filedata_executed": 0,
            "metadata_executed": 0,
            "rogue_reads_zeroed": 0,
            "repurposed_erased": 0,
        }
        self.quiesce_count = 0
        self._lock = threading.RLock()

    # -- registration -------------------------------------------------------

    def register_image(self, image_id: int, disk_name: str,
                       actual: bool = False) -> None:
        with self._lock:
            self.names[image_id] = disk_name
            self.btt.create_table(image_id, actual=actual)
            if actual:
                self.actual_image = image_id

    def clone_image(self, src_id: int, new_id: int, disk_name: str) -> None:
        with self._lock:
            self.names[new_id] = disk_name
            self.btt.fork_table(src_id, new_id)
            for (img, vb), st in list(self.states.items()):
                if img == src_id:
                    self.states[(new_id, vb)] = BlockState(
                        vb, st.tag, st.os_written,
                        st.materialized and st.tag != DATA,
                        self.btt.tables[new_id].plain.get(vb),
                        list(st.inline_ranges))

    def drop_image(self, image_id: int) -> None:
        with self._lock:
            self.btt.retire_table(image_id)
            del self.names[image_id]
            for key in [k for k in self.states if k[0] == image_id]:
                del self.states[key]

    def rename_image(self, image_id: int, new_name: str) -> None:
        with self._lock:
            self.names[image_id] = new_name

    def quiesce(self):
        """Global barrier for identity-shuffling operations."""
        self.quiesce_count += 1
        return self._lock

    # -- padding --------------------------------------------------------------

    def profile_and_set_padding(self, samples,
                                percentile: float = 0.99) -> DelayModel:
        if len(samples) < 100:
            raise BackstoreError(
                f"need >=100 profiling samples, got {len(samples)}")
        thr = quantile(samples, percentile)
        self.delay_model = DelayModel(thr, percentile, len(samples))
        return self.delay_model

    def profile_from_model(self, n: int = 1000,
                           percentile: float = 0.99) -> DelayModel:
        """Profile padding from the region's own latency model, as done
        when the filesystem is mounted."""
        samples = [self.latency.sample("region") for _ in range(n)]
        return self.profile_and_set_padding(samples, percentile)

    def set_padding_to_cap(self) -> DelayModel:
        self.delay_model = DelayModel(self.latency.cap(), 1.0, 0)
        return self.delay_model

    def _reported_delay(self, pblock: int | None) -> float:
        zone = "region" if (pblock is not None
                            and pblock < self.btt.disk_blocks) else "blob"
        raw = self.latency.sample(zone)
        return round(self.delay_model.report(raw), 3) if self.delay_model \
            else round(raw, 3)

    # -- request handling --------------------------------------------------------

    def handle_request(self, req: DiskRequest) -> Response:
        with self._lock:
            if req.image_id not in self.names:
                raise BackstoreError(f"unregistered image {req.image_id}")
            if req.clazz == DATA:
                return self._handle_filedata(req)
            return self._handle_metadata(req)

    def _is_actual(self, image_id: int) -> bool:
        return image_id == self.actual_image

    def _buffer(self, token: int) -> bytearray:
        buf = self.buffers.get(token)
        if buf is None:
            raise BackstoreError(f"unknown opaque reference {token:#x}")
        return buf

    def _handle_filedata(self, req: DiskRequest) -> Response:
        actual = self._is_actual(req.image_id)
        if req.op == "write":
            if actual:
                self._region_write(req)
                self.counters["actual_filedata_executed"] += 1
            else:
                self.counters["sybil_filedata_discarded"] += 1
            for i in range(req.length):
                vb = req.vblock + i
                st = self.states.get((req.image_id, vb))
                if st is None or st.tag != DATA:
                    self.states[(req.image_id, vb)] = BlockState(
                        vb, DATA, materialized=actual,
                        pblock=vb if actual else None)
        else:
            buf = self._buffer(req.opaque_ref)
            if actual:
                self._region_read(req, buf)
                self.counters["actual_filedata_executed"] += 1
            # Sybil reads leave the zero-initialized buffer untouched:
            # the OS never sees content either way.
        self._log(req.image_id, "req", req.op, req.vblock, req.clazz,
                  None, b"")
        return Response(accepted=True, delay=None, data=None)

    def _window_slices(self, req: DiskRequest):
        """Yield (vblock, block_lo, block_hi, buf_lo) for the data window."""
        buf_start, file_pos, nbytes = req.data_window
        first_block = file_pos // BLOCK_SIZE
        for i in range(req.length):
            fb = first_block + i
            blo = max(file_pos, fb * BLOCK_SIZE)
            bhi = min(file_pos + nbytes, (fb + 1) * BLOCK_SIZE)
            if blo >= bhi:
                continue
            yield (req.vblock + i, blo - fb * BLOCK_SIZE, bhi - fb * BLOCK_SIZE,
                   buf_start + (blo - file_pos), bhi - blo)

    def _region_write(self, req: DiskRequest) -> None:
        buf = self._buffer(req.opaque_ref)
        if req.deinline is not None:
            # Old inline bytes migrate out of the inode shadow into the
            # head of file block 0 before the new data lands.
            inum, old_size = req.deinline
            shadow = self.inline_shadow.pop((req.image_id, inum), b"")
            head = bytes(shadow[:old_size])
            cur = bytearray(self.btt.dev0.read(req.vblock))
            cur[0:len(head)] = head
            self.btt.dev0.write(req.vblock, bytes(cur))
        for vb, blo, bhi, buf_lo, n in self._window_slices(req):
            cur = bytearray(self.btt.dev0.read(vb))
            cur[blo:bhi] = buf[buf_lo:buf_lo + n]
            self.btt.dev0.write(vb, bytes(cur))

    def _region_read(self, req: DiskRequest, buf: bytearray) -> None:
        for vb, blo, bhi, buf_lo, n in self._window_slices(req):
            cur = self.btt.dev0.read(vb)
            buf[buf_lo:buf_lo + n] = cur[blo:bhi]

    def _handle_metadata(self, req: DiskRequest) -> Response:
        if req.op == "write":
            resp = self._meta_write_core(
                req.image_id, req.vblock, req.payload, req.clazz,
                inline_meta=req.inline_meta, opaque_ref=req.opaque_ref)
        else:
            resp = self._meta_read_core(
                req.image_id, req.vblock, req.clazz,
                inline_meta=req.inline_meta, opaque_ref=req.opaque_ref)
        self._log(req.image_id, "req", req.op, req.vblock, req.clazz,
                  resp.delay, resp.data or b"")
        return resp

    def _meta_write_core(self, image_id, vblock, data, clazz,
                         inline_meta=None, opaque_ref=None) -> Response:
        st = self.states.get((image_id, vblock))
        if st is not None and st.tag == DATA:
            # Block repurposed by the OS: erase before the grant so no
            # filedata content can leak, then treat as metadata.
            if st.materialized and self._is_actual(image_id):
                self.btt.dev0.erase(vblock)
            self.counters["repurposed_erased"] += 1
        pblock = self.btt.write_meta(image_id, vblock, data)
        ranges = []
        if inline_meta is not None:
            _, off, size = inline_meta
            ranges = [(off, size)]
            if opaque_ref is not None and self._is_actual(image_id):
                self.splice_inline(image_id, inline_meta,
                                   bytes(self._buffer(opaque_ref)))
        self.states[(image_id, vblock)] = BlockState(
            vblock, clazz, os_written=True, materialized=True,
            pblock=pblock, inline_ranges=ranges)
        self.counters["metadata_executed"] += 1
        return Response(accepted=True, delay=self._reported_delay(pblock))

    def _meta_read_core(self, image_id, vblock, clazz,
                        inline_meta=None, opaque_ref=None) -> Response:
        st = self.states.get((image_id, vblock))
        if st is not None and st.os_written:
            data = self.btt.read_meta(image_id, vblock) or ZERO_BLOCK
            pblock = st.pblock
        else:
            data = ZERO_BLOCK
            pblock = None
            self.counters["rogue_reads_zeroed"] += 1
        if inline_meta is not None and opaque_ref is not None:
            buf = self._buffer(opaque_ref)
            inum, off, size = inline_meta
            if self._is_actual(image_id):
                shadow = self.inline_shadow.get((image_id, inum), b"")
                chunk = bytes(shadow[off:off + size])
                buf[0:len(chunk)] = chunk
            # Sybil inline reads: buffer stays zeroed.
        self.counters["metadata_executed"] += 1
        return Response(accepted=True, delay=self._reported_delay(pblock),
                        data=data)

    def splice_inline(self, image_id: int, inline_meta, payload: bytes) -> None:
        """Keep the actual image's inlined filedata in a TEE-side shadow;
        the stored block stays exactly what the OS wrote."""
        inum, off, size = inline_meta
        key = (image_id, inum)
        shadow = self.inline_shadow.setdefault(key, bytearray())
        if len(shadow) < off + size:
            shadow.extend(b"\x00" * (off + size - len(shadow)))
        shadow[off:off + size] = payload[:size]

    # -- OS probe paths ------------------------------------------------------------

    def os_read_block(self, image_id: int, vblock: int) -> bytes:
        """Probing read: stored bytes iff the OS previously wrote the
        block, else a zero block — uniformly for actual and sybil."""
        with self._lock:
            st = self.states.get((image_id, vblock))
            if st is not None and st.os_written:
                data = self.btt.read_meta(image_id, vblock) or ZERO_BLOCK
                pblock = st.pblock
            else:
                data = ZERO_BLOCK
                pblock = None
                self.counters["rogue_reads_zeroed"] += 1
            delay = self._reported_delay(pblock)
            self._log(image_id, "os_read", "read", vblock,
                      st.tag if st else "unwritten", delay, data)
            return data

    def os_write_block(self, image_id: int, vblock: int, data: bytes) -> Response:
        """Probing/repurposing write; grants after erasing filedata."""
        with self._lock:
            if len(data) < BLOCK_SIZE:
                data = data + b"\x00" * (BLOCK_SIZE - len(data))
            resp = self._meta_write_core(image_id, vblock, data, META)
            self._log(image_id, "os_write", "write", vblock, META,
                      resp.delay, b"")
            return resp

    # -- logging ------------------------------------------------------------------------

    def _log(self, image_id, ev, op, vblock, clazz, delay, payload: bytes):
        self.log.emit(
            t=self.clock.now, ev=ev, img=self.names[image_id], op=op,
            v=vblock, c=clazz, d=delay,
            dig=digest16(payload)[:4].hex())
