"""Synthetic trace corpora, one per workload shape worth protecting.

Each corpus is a deterministic function of its seed and consists of a
setup stream (builds the file universe, replayed identically on every
image at initialization) and a segment library (the replayable units,
each labeled with the plausible secret it encodes):

  query      - read-mostly point lookups over an indexed data file;
               the secret is the predicate column and selected rows.
  historian  - append bursts of sensor messages to rotating log files;
               the secret is the message type (sizes correlate with it).
  credential - whole-file loads of one of many key files; the secret is
               which key was used.
  churn      - create/write/unlink bursts over small files plus occasional
               directory creation; metadata-heavy on purpose.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .simfs import FLAG_APPEND, FileCall
from .tracegen import TraceLibrary, TraceSegment, load_library, save_library
from .util import BLOCK_SIZE, derive_rng

CORPUS_NAMES = ("query", "historian", "credential", "churn")

_REF = 0  # placeholder; concrete opaque references are minted at replay


@dataclass
class Corpus:
    name: str
    setup_calls: list
    library: TraceLibrary

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        setup_lib = TraceLibrary()
        setup_lib.ingest_segment(TraceSegment(self.setup_calls, "setup",
                                              source="recorded"))
        save_library(setup_lib, os.path.join(directory, f"{self.name}.setup"))
        save_library(self.library,
                     os.path.join(directory, f"{self.name}.segments"))

    @classmethod
    def load(cls, directory, name: str) -> "Corpus":
        setup_lib = load_library(os.path.join(directory, f"{name}.setup"))
        library = load_library(os.path.join(directory, f"{name}.segments"))
        return cls(name, setup_lib.segments[0].calls, library)


class _SegmentBuilder:
    def __init__(self, rng, base_ts: int = 0):
        self.rng = rng
        self.ts = base_ts
        self.calls: list[FileCall] = []

    def emit(self, kind, path, offset=0, size=0, flags=0, moves_data=False):
        self.ts += self.rng.randint(120, 4000)
        self.calls.append(FileCall(kind, path, offset, size, flags,
                                   buffer_ref=_REF if moves_data else None,
                                   timestamp=self.ts))

    def read(self, path, offset, size):
        self.emit("read", path, offset, size, moves_data=True)

    def write(self, path, offset, size, flags=0):
        self.emit("write", path, offset, size, flags, moves_data=True)


def _setup_write(calls, ts, path, size):
    calls.append(FileCall("create", path, timestamp=ts))
    calls.append(FileCall("write", path, 0, size, buffer_ref=_REF,
                          timestamp=ts + 1))
    return ts + 2


def gen_query(seed: int) -> Corpus:
    rng = derive_rng(seed, "corpus:query")
    setup: list[FileCall] = []
    ts = 0
    setup.append(FileCall("mkdir", "/db", timestamp=ts)); ts += 1
    ts = _setup_write(setup, ts, "/db/data", 64 * BLOCK_SIZE)
    ts = _setup_write(setup, ts, "/db/index", 16 * BLOCK_SIZE)

    library = TraceLibrary()
    secrets = [(rng.randint(0, 2), tuple(sorted(
        rng.sample(range(64), rng.randint(1, 4))))) for _ in range(50)]
    for event in range(60):
        col, rows = secrets[rng.randrange(len(secrets))]
        b = _SegmentBuilder(rng)
        b.emit("open", "/db/index")
        b.read("/db/index", col * 4 * BLOCK_SIZE, 256)
        b.emit("open", "/db/data")
        for row in rows:
            b.emit("seek", "/db/data", offset=row * BLOCK_SIZE)
            b.read("/db/data", row * BLOCK_SIZE, rng.choice((64, 128, 512)))
        b.emit("close", "/db/data")
        b.emit("close", "/db/index")
        label = f"c{col}-r{'.'.join(map(str, rows))}"
        library.ingest_segment(TraceSegment(b.calls, label,
                                            input_event_id=event))
    return Corpus("query", setup, library)


def gen_historian(seed: int) -> Corpus:
    rng = derive_rng(seed, "corpus:historian")
    setup: list[FileCall] = []
    ts = 0
    setup.append(FileCall("mkdir", "/log", timestamp=ts)); ts += 1
    for k in range(4):
        ts = _setup_write(setup, ts, f"/log/d{k}.bag", 2 * BLOCK_SIZE)

    # Message types with characteristic sizes: the append sizes are the
    # side channel this workload leaks.
    types = {f"t{i}": 64 * (i + 1) + 16 * i * i for i in range(40)}
    library = TraceLibrary()
    for event in range(80):
        mtype = rng.choice(sorted(types))
        log = f"/log/d{rng.randrange(4)}.bag"
        b = _SegmentBuilder(rng)
        b.emit("open", log)
        if event % 10 == 9:
            b.emit("truncate", log, size=0)      # log rotation
        for _ in range(rng.randint(3, 7)):
            b.write(log, 0, types[mtype] + rng.randint(0, 48), FLAG_APPEND)
        b.emit("close", log)
        library.ingest_segment(TraceSegment(b.calls, mtype,
                                            input_event_id=event))
    return Corpus("historian", setup, library)


def gen_credential(seed: int) -> Corpus:
    rng = derive_rng(seed, "corpus:credential")
    setup: list[FileCall] = []
    ts = 0
    setup.append(FileCall("mkdir", "/keys", timestamp=ts)); ts += 1
    sizes = {}
    for k in range(50):
        sizes[k] = rng.choice((1024, 2048, 3072, 4096))
        ts = _setup_write(setup, ts, f"/keys/id{k:03d}.key", sizes[k])

    library = TraceLibrary()
    for event in range(100):
        k = rng.randrange(50)
        path = f"/keys/id{k:03d}.key"
        b = _SegmentBuilder(rng)
        b.emit("open", path)
        b.emit("fstat", path)
        b.read(path, 0, sizes[k])
        b.emit("close", path)
        library.ingest_segment(TraceSegment(b.calls, f"key{k:03d}",
                                            input_event_id=event))
    return Corpus("credential", setup, library)


def gen_churn(seed: int) -> Corpus:
    rng = derive_rng(seed, "corpus:churn")
    setup: list[FileCall] = []
    ts = 0
    setup.append(FileCall("mkdir", "/work", timestamp=ts)); ts += 1
    for d in range(3):
        setup.append(FileCall("mkdir", f"/work/s{d}", timestamp=ts)); ts += 1

    library = TraceLibrary()
    for event in range(60):
        burst = rng.randrange(30)
        b = _SegmentBuilder(rng)
        d = burst % 3
        names = [f"/work/s{d}/f{burst}_{i}" for i in range(rng.randint(3, 6))]
        for name in names:
            b.emit("create", name)
            b.write(name, 0, rng.choice((96, 640, 4096, 12288)))
        for name in names[:-1]:
            b.emit("unlink", name)
        b.emit("fstat", names[-1])
        b.emit("unlink", names[-1])
        library.ingest_segment(TraceSegment(b.calls, f"burst{burst}",
                                            input_event_id=event))
    return Corpus("churn", setup, library)


GENERATORS = {
    "query": gen_query,
    "historian": gen_historian,
    "credential": gen_credential,
    "churn": gen_churn,
}


def build_corpus(name: str, seed: int) -> Corpus:
    if name not in GENERATORS:
        raise ValueError(f"unknown corpus {name!r}; have {CORPUS_NAMES}")
    return GENERATORS[name](seed)
