"""Filesystem identity shuffling: time- and activity-triggered shuffle,
fork and retire over images with identical metadata.

Shuffling renames every participant's backing virtual disk to a fresh
random name under a secret permutation, so the OS cannot connect new
identities to old ones; forking keeps shuffling available when an image
has no metadata-identical peer. Retiring respects two invariants: every
one of the K initial lineages always has a living holder (tracked by a
single inherited tag per image), and at least K images stay alive.

Trigger composition: when a maintenance pass finds both kinds pending,
time triggers are processed before activity triggers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .backstore import Backstore


class FidsError(Exception):
    pass


@dataclass(slots=True)
class FsImage:
    image_id: int                 # internal, never OS-visible
    disk_name: str                # OS-visible random identity
    lineage_tag: int              # which initial image this truly stems from
    last_shuffle: int             # virtual time of last identity change
    calls_served: int = 0
    metadata_digest: bytes = b""  # recomputed only at quiesce points
    actual: bool = False


@dataclass(slots=True)
class LineageEvent:
    kind: str                     # init | fork | shuffle | retire
    time: int
    participants: list
    products: list

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "time": self.time,
             "participants": sorted(self.participants),
             "products": sorted(self.products)},
            sort_keys=True, separators=(",", ":"))


@dataclass(slots=True)
class FidsConfig:
    K: int                        # image count / anonymity parameter
    T: int                        # max continuous observation, virtual us
    N_calls: int = 10_000         # activity trigger threshold
    fork_fanout: int = 2
    high_water: int = 0           # retire above this population; 0 -> 2K
    quiesce_latency: tuple = (80_000, 180_000)   # unmount+remount, us

    def __post_init__(self):
        if self.K < 2:
            raise FidsError("K must be >= 2")
        if self.T <= 0:
            raise FidsError("T must be positive")
        if not self.high_water:
            self.high_water = 2 * self.K


def parse_event_log(lines) -> list[LineageEvent]:
    events = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        d = json.loads(line)
        events.append(LineageEvent(d["kind"], d["time"],
                                   d["participants"], d["products"]))
    return events


class FidsController:
    """Background actor serialized against the backstore quiesce barrier."""

    def __init__(self, config: FidsConfig, backstore: Backstore, rng,
                 on_fork=None, on_retire=None):
        self.config = config
        self.backstore = backstore
        self.rng = rng
        self.images: dict[int, FsImage] = {}
        self.events: list[LineageEvent] = []
        self.op_counts = {"shuffle": 0, "fork": 0, "retire": 0}
        self.total_quiesce_us = 0
        self.on_fork = on_fork          # (parent_id, child_id) after cloning
        self.on_retire = on_retire      # (image_id) after removal
        self._next_id = 0

    # -- naming / registration -------------------------------------------

    def fresh_name(self) -> str:
        return f"{self.rng.getrandbits(64):016x}"

    def alloc_image_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def adopt_initial(self, image_id: int, disk_name: str, lineage_tag: int,
                      actual: bool, now: int) -> FsImage:
        img = FsImage(image_id, disk_name, lineage_tag, now, actual=actual)
        self.images[image_id] = img
        self._next_id = max(self._next_id, image_id + 1)
        return img

    def log_init(self, now: int) -> None:
        self.events.append(LineageEvent(
            "init", now, [], [i.disk_name for i in self._sorted_images()]))

    def _sorted_images(self) -> list[FsImage]:
        return [self.images[i] for i in sorted(self.images)]

    def note_call(self, image_id: int) -> bool:
        """Count a served file call; True once the activity trigger fires."""
        img = self.images[image_id]
        img.calls_served += 1
        return img.calls_served >= self.config.N_calls

    # -- triggers -----------------------------------------------------------

    def check_triggers(self, now: int) -> list[int]:
        """Images due for identity change: by time first, then activity."""
        by_time = [i.image_id for i in self._sorted_images()
                   if now - i.last_shuffle >= self.config.T]
        by_activity = [i.image_id for i in self._sorted_images()
                       if i.calls_served >= self.config.N_calls
                       and i.image_id not in by_time]
        return by_time + by_activity

    def next_due(self) -> int:
        return min(i.last_shuffle + self.config.T
                   for i in self.images.values())

    # -- operations ------------------------------------------------------------

    def refresh_digests(self) -> None:
        for img in self._sorted_images():
            img.metadata_digest = self.backstore.btt.metadata_digest(
                img.image_id)

    def shuffle(self, image_ids: list[int], now: int) -> dict[str, str]:
        """Rename all participants under a secret permutation; returns the
        old-name -> new-name truth mapping (TEE-side only)."""
        if len(image_ids) < 2:
            raise FidsError("shuffle requires at least 2 images")
        imgs = [self.images[i] for i in sorted(image_ids)]
        digests = {i.metadata_digest for i in imgs}
        if len(digests) != 1:
            raise FidsError("shuffle participants must have identical metadata")
        with self.backstore.quiesce():
            self.backstore.btt.shuffle_tables([i.image_id for i in imgs])
            old_names = [i.disk_name for i in imgs]
            new_names = [self.fresh_name() for _ in imgs]
            assignment = list(new_names)
            self.rng.shuffle(assignment)        # the secret binding
            for img, name in zip(imgs, assignment):
                img.disk_name = name
                img.last_shuffle = now
                img.calls_served = 0
                self.backstore.rename_image(img.image_id, name)
            self.events.append(LineageEvent("shuffle", now,
                                            old_names, new_names))
        self.op_counts["shuffle"] += 1
        self.total_quiesce_us += self._quiesce_cost()
        return dict(zip(old_names, assignment))

    def fork(self, image_id: int, now: int) -> list[int]:
        """Clone the image (sharing all metadata blocks) and give every
        resulting image a fresh name; zero blob growth with CoW on."""
        parent = self.images[image_id]
        with self.backstore.quiesce():
            old_name = parent.disk_name
            family = [parent]
            for _ in range(self.config.fork_fanout - 1):
                child_id = self.alloc_image_id()
                child = FsImage(child_id, "", parent.lineage_tag, now,
                                metadata_digest=parent.metadata_digest)
                self.backstore.clone_image(parent.image_id, child_id,
                                           "pending")
                self.images[child_id] = child
                family.append(child)
                if self.on_fork:
                    self.on_fork(parent.image_id, child_id)
            new_names = [self.fresh_name() for _ in family]
            assignment = list(new_names)
            self.rng.shuffle(assignment)
            for img, name in zip(family, assignment):
                img.disk_name = name
                img.last_shuffle = now
                img.calls_served = 0
                self.backstore.rename_image(img.image_id, name)
            self.events.append(LineageEvent("fork", now,
                                            [old_name], new_names))
        self.op_counts["fork"] += 1
        self.total_quiesce_us += self._quiesce_cost()
        return [i.image_id for i in family]

    def select_retire_candidates(self) -> list[int]:
        """Sybils whose lineage keeps another living holder and whose
        removal leaves at least K images; youngest first."""
        tag_holders = {}
        for img in self.images.values():
            tag_holders[img.lineage_tag] = tag_holders.get(
                img.lineage_tag, 0) + 1
        if len(self.images) - 1 < self.config.K:
            return []
        out = [img.image_id for img in self._sorted_images()
               if not img.actual and tag_holders[img.lineage_tag] >= 2]
        return sorted(out, reverse=True)

    def retire(self, image_id: int, now: int) -> None:
        img = self.images[image_id]
        if img.actual:
            raise FidsError("the actual image cannot be retired")
        with self.backstore.quiesce():
            self.backstore.drop_image(image_id)
            del self.images[image_id]
            self.events.append(LineageEvent("retire", now,
                                            [img.disk_name], []))
        if self.on_retire:
            self.on_retire(image_id)
        self.op_counts["retire"] += 1

    def _quiesce_cost(self) -> int:
        lo, hi = self.config.quiesce_latency
        return self.rng.randint(lo, hi)

    # -- the maintenance pass -----------------------------------------------------

    def maintain(self, now: int) -> int:
        """Process due triggers (time first, then activity), then trim the
        population to the high-water mark. Returns ops performed."""
        pending = self.check_triggers(now)
        if not pending:
            return 0
        self.refresh_digests()
        handled: set[int] = set()
        ops = 0
        for image_id in pending:
            if image_id in handled or image_id not in self.images:
                continue
            img = self.images[image_id]
            peers = [o.image_id for o in self._sorted_images()
                     if o.metadata_digest == img.metadata_digest]
            if len(peers) >= 2:
                # Shuffle the maximal digest-equivalence class: larger
                # sets shrink the adversary's certainty faster.
                self.shuffle(peers, now)
                handled.update(peers)
            else:
                handled.update(self.fork(image_id, now))
            ops += 1
        while len(self.images) > self.config.high_water:
            cands = self.select_retire_candidates()
            if not cands:
                break
            self.retire(cands[0], now)
            ops += 1
        return ops

    # -- export ------------------------------------------------------------------------

    def event_lines(self) -> list[str]:
        return [e.to_json() for e in self.events]

    def dump_events(self, path) -> None:
        with open(path, "w") as f:
            for line in self.event_lines():
                f.write(line + "\n")
