"""Per-image block translation tables over a shared copy-on-write blob.

Every image maps OS-visible virtual block numbers of its metadata blocks
to physical blocks: the actual image to fixed slots in its contiguous
region (dev0), sybil images into a sequentially allocated metadata blob
(dev1). Identical metadata blocks are deduplicated by content at
allocation time, so forked and identically initialized images share
physical copies until they diverge.

Entries are encrypted at rest with a keyed pseudorandom permutation over
64-bit block numbers, tweaked by a per-table salt, the virtual block
number, and a per-entry epoch. Re-encryption is egalitarian: a CoW event
on a virtual block refreshes that block's entry in every table that maps
it, and a shuffle refreshes every entry of every participant, so an
observer diffing serialized tables cannot single out one image by its
churn pattern. The table-to-disk-name binding permutation drawn during a
shuffle belongs to the caller (the identity-shuffling layer).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .util import BLOCK_SIZE, digest16

BTT_MAGIC = b"SYBLBTT1"
_RECORD = struct.Struct("<QQI")
_IMAGE_HDR = struct.Struct("<QI")


class BttError(Exception):
    pass


class BlockCipher:
    """Test-grade keyed 4-round Feistel PRP over 64-bit block numbers.

    Not production crypto; the security argument only needs uniform,
    deterministic ciphertext churn under tweak changes.
    """

    ROUNDS = 4

    def __init__(self, key: bytes):
        self.key = key

    def _round(self, r: int, half: int, tweak: bytes) -> int:
        h = hashlib.blake2b(
            struct.pack("<BI", r, half) + tweak, key=self.key, digest_size=4)
        return int.from_bytes(h.digest(), "little")

    def encrypt(self, pblock: int, tweak: bytes) -> int:
        left, right = pblock >> 32, pblock & 0xFFFFFFFF
        for r in range(self.ROUNDS):
            left, right = right, left ^ self._round(r, right, tweak)
        return (left << 32) | right

    def decrypt(self, ct: int, tweak: bytes) -> int:
        left, right = ct >> 32, ct & 0xFFFFFFFF
        for r in reversed(range(self.ROUNDS)):
            left, right = right ^ self._round(r, left, tweak), left
        return (left << 32) | right


def _tweak(salt: int, vblock: int, epoch: int) -> bytes:
    return struct.pack("<QQI", salt, vblock, epoch)


@dataclass(slots=True)
class BttEntry:
    vblock: int
    ciphertext: int
    epoch: int


class Btt:
    """One image's translation table (metadata/mixed blocks only)."""

    def __init__(self, image_id: int, salt: int):
        self.image_id = image_id
        self.salt = salt
        self.entries: dict[int, BttEntry] = {}
        self.plain: dict[int, int] = {}      # TEE-side decrypted mirror

    def __len__(self) -> int:
        return len(self.entries)


class PhysicalStore:
    """A flat block store (the actual image's contiguous region)."""

    def __init__(self, blocks: int):
        self.blocks = blocks
        self.content: dict[int, bytes] = {}

    def read(self, p: int) -> bytes:
        return self.content.get(p, b"\x00" * BLOCK_SIZE)

    def write(self, p: int, data: bytes) -> None:
        if not 0 <= p < self.blocks:
            raise BttError(f"physical block {p} outside region")
        self.content[p] = data

    def erase(self, p: int) -> None:
        self.content[p] = b"\x00" * BLOCK_SIZE


class MetadataBlob:
    """Sequentially allocated shared store for sybil metadata.

    Retired blocks go on a free list reused before the cursor grows;
    a content index enables copy-on-write dedup at allocation time.
    """

    def __init__(self, base: int, capacity: int):
        self.base = base
        self.capacity = capacity
        self.next_free = base
        self.free_list: list[int] = []
        self.content: dict[int, bytes] = {}
        self.content_index: dict[bytes, int] = {}

    def contains(self, p: int) -> bool:
        return self.base <= p < self.base + self.capacity

    def alloc(self) -> int:
        if self.free_list:
            return self.free_list.pop()
        if self.next_free >= self.base + self.capacity:
            raise BttError("metadata blob exhausted")
        p = self.next_free
        self.next_free += 1
        return p

    def free(self, p: int) -> None:
        old = self.content.pop(p, None)
        if old is not None:
            d = digest16(old)
            if self.content_index.get(d) == p:
                del self.content_index[d]
        self.free_list.append(p)

    def read(self, p: int) -> bytes:
        return self.content.get(p, b"\x00" * BLOCK_SIZE)

    def write(self, p: int, data: bytes) -> None:
        old = self.content.get(p)
        if old is not None:
            d_old = digest16(old)
            if self.content_index.get(d_old) == p:
                del self.content_index[d_old]
        self.content[p] = data
        self.content_index.setdefault(digest16(data), p)

    @property
    def allocated_blocks(self) -> int:
        return len(self.content)


class BttStore:
    """All tables plus the physical stores and the shared refcounts."""

    def __init__(self, disk_blocks: int, key: bytes, rng,
                 blob_capacity: int | None = None, cow: bool = True):
        self.disk_blocks = disk_blocks
        self.cipher = BlockCipher(key)
        self.rng = rng
        self.cow = cow
        self.dev0 = PhysicalStore(disk_blocks)
        self.blob = MetadataBlob(disk_blocks, blob_capacity or disk_blocks * 8)
        self.tables: dict[int, Btt] = {}
        self.refcount: dict[int, int] = {}
        self.actual_image: int | None = None

    # -- table lifecycle ---------------------------------------------------

    def create_table(self, image_id: int, actual: bool = False) -> Btt:
        if image_id in self.tables:
            raise BttError(f"table exists for image {image_id}")
        if actual:
            if self.actual_image is not None:
                raise BttError("actual image already registered")
            self.actual_image = image_id
        table = Btt(image_id, self.rng.getrandbits(64))
        self.tables[image_id] = table
        return table

    def fork_table(self, src_image: int, new_image: int) -> Btt:
        """Duplicate src's mappings for a new (always sybil) image.

        With CoW on this allocates nothing; with CoW off every block is
        copied into a private blob block.
        """
        src = self.tables[src_image]
        new = Btt(new_image, self.rng.getrandbits(64))
        self.tables[new_image] = new
        for vb in sorted(src.plain):
            p = src.plain[vb]
            if self.cow:
                q = p
                self.refcount[q] = self.refcount.get(q, 0) + 1
            else:
                q = self.blob.alloc()
                self.blob.write(q, self._read_phys(p))
                self.refcount[q] = 1
            self._set_entry(new, vb, q)
        return new

    def retire_table(self, image_id: int) -> None:
        if image_id == self.actual_image:
            raise BttError("the actual image cannot be retired")
        table = self.tables.pop(image_id)
        for vb in sorted(table.plain):
            self._drop_ref(table.plain[vb])

    def shuffle_tables(self, image_ids: list[int]) -> None:
        """Re-encrypt every entry of every participant.

        Participants must currently hold identical metadata; the fresh
        random table-to-name binding is drawn by the caller.
        """
        if len(image_ids) < 2:
            raise BttError("shuffle requires at least 2 images")
        digests = {i: self.metadata_digest(i) for i in image_ids}
        if len(set(digests.values())) != 1:
            raise BttError("shuffle participants have non-identical metadata")
        for i in image_ids:
            table = self.tables[i]
            for vb in sorted(table.entries):
                self._set_entry(table, vb, table.plain[vb],
                                epoch=table.entries[vb].epoch + 1)

    # -- lookup / IO ---------------------------------------------------------

    def lookup(self, image_id: int, vblock: int) -> int | None:
        """Physical block on hit; None signals filedata-or-invalid."""
        table = self.tables[image_id]
        entry = table.entries.get(vblock)
        if entry is None:
            return None
        return table.plain[vblock]

    def decrypt_entry(self, image_id: int, vblock: int) -> int:
        table = self.tables[image_id]
        e = table.entries[vblock]
        return self.cipher.decrypt(
            e.ciphertext, _tweak(table.salt, vblock, e.epoch))

    def read_meta(self, image_id: int, vblock: int) -> bytes | None:
        p = self.lookup(image_id, vblock)
        return None if p is None else self._read_phys(p)

    def write_meta(self, image_id: int, vblock: int, data: bytes) -> int:
        """Materialize or CoW-update one metadata block; returns its pblock."""
        table = self.tables[image_id]
        if vblock not in table.entries:
            return self._materialize(table, vblock, data)
        p = table.plain[vblock]
        if self.refcount[p] == 1:
            self._write_phys(p, data)
            return p
        return self._cow_write(table, vblock, p, data)

    def drop_meta(self, image_id: int, vblock: int) -> None:
        """Remove a vblock's entry (block repurposed away from metadata)."""
        table = self.tables[image_id]
        if vblock in table.entries:
            self._drop_ref(table.plain[vblock])
            del table.entries[vblock]
            del table.plain[vblock]

    # -- internals ------------------------------------------------------------

    def _set_entry(self, table: Btt, vblock: int, pblock: int,
                   epoch: int | None = None) -> None:
        if epoch is None:
            prev = table.entries.get(vblock)
            epoch = prev.epoch + 1 if prev else 0
        ct = self.cipher.encrypt(pblock, _tweak(table.salt, vblock, epoch))
        table.entries[vblock] = BttEntry(vblock, ct, epoch)
        table.plain[vblock] = pblock

    def _read_phys(self, p: int) -> bytes:
        return self.dev0.read(p) if p < self.disk_blocks else self.blob.read(p)

    def _write_phys(self, p: int, data: bytes) -> None:
        if p < self.disk_blocks:
            self.dev0.write(p, data)
        else:
            self.blob.write(p, data)

    def _alloc_shared(self, data: bytes) -> int:
        """Blob allocation with content dedup (the CoW compression)."""
        if self.cow:
            existing = self.blob.content_index.get(digest16(data))
            if existing is not None and self.refcount.get(existing, 0) > 0:
                self.refcount[existing] += 1
                return existing
        p = self.blob.alloc()
        self.blob.write(p, data)
        self.refcount[p] = 1
        return p

    def _drop_ref(self, p: int) -> None:
        self.refcount[p] -= 1
        if self.refcount[p] == 0:
            del self.refcount[p]
            if self.blob.contains(p):
                self.blob.free(p)

    def _materialize(self, table: Btt, vblock: int, data: bytes) -> int:
        if table.image_id == self.actual_image:
            p = vblock                      # fixed slot in the contiguous region
            if self.refcount.get(p, 0):
                raise BttError(f"actual image slot {p} unexpectedly shared")
            self.dev0.write(p, data)
            self.refcount[p] = 1
        else:
            p = self._alloc_shared(data)
        self._set_entry(table, vblock, p)
        return p

    def _cow_write(self, table: Btt, vblock: int, p: int, data: bytes) -> int:
        """Unshare a shared block, then re-encrypt egalitarially.

        The entry for this virtual block is refreshed in every image that
        maps it, so ciphertext churn never reveals which image wrote.
        """
        sharers = [(img, vb)
                   for img in sorted(self.tables)
                   for vb, q in self.tables[img].plain.items() if q == p]
        if table.image_id == self.actual_image:
            # The actual image never leaves its region slot: the old copy
            # moves out to the blob for the remaining sharers.
            moved = self._alloc_shared(self._read_phys(p))
            self.refcount[moved] += len(sharers) - 2  # alloc counted one
            for img, vb in sharers:
                if img == table.image_id:
                    continue
                self._set_entry(self.tables[img], vb, moved)
                self._drop_ref(p)
            self.dev0.write(p, data)
            new_p = p
        else:
            self._drop_ref(p)
            new_p = self._alloc_shared(data)
            self._set_entry(table, vblock, new_p)
        for img in sorted(self.tables):
            t = self.tables[img]
            if vblock in t.entries:
                self._set_entry(t, vblock, t.plain[vblock])
        return new_p

    # -- digests / accounting ---------------------------------------------------

    def metadata_digest(self, image_id: int) -> bytes:
        table = self.tables[image_id]
        acc = hashlib.blake2b(digest_size=16)
        for vb in sorted(table.plain):
            acc.update(struct.pack("<Q", vb))
            acc.update(digest16(self._read_phys(table.plain[vb])))
        return acc.digest()

    def blob_blocks(self) -> int:
        return self.blob.allocated_blocks

    def blob_bytes(self) -> int:
        return self.blob.allocated_blocks * BLOCK_SIZE

    def total_entries(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def refcount_total(self) -> int:
        return sum(self.refcount.values())

    # -- serialization (normal-world at-rest format) -----------------------------

    def serialize(self, names: dict[int, int]) -> bytes:
        """Length-prefixed fixed-width records; leaks only entry counts.

        Format, little-endian: magic "SYBLBTT1", u32 image count, then per
        image: u64 disk-name id, u32 entry count, entry records of
        (vblock u64, ciphertext u64, epoch u32) sorted by vblock.
        """
        out = [BTT_MAGIC, struct.pack("<I", len(names))]
        for image_id in sorted(names):
            table = self.tables[image_id]
            out.append(_IMAGE_HDR.pack(names[image_id], len(table.entries)))
            for vb in sorted(table.entries):
                e = table.entries[vb]
                out.append(_RECORD.pack(e.vblock, e.ciphertext, e.epoch))
        return b"".join(out)


def deserialize(data: bytes) -> dict[int, list[tuple[int, int, int]]]:
    """Parse the at-rest format back into name -> entry tuples."""
    if data[:8] != BTT_MAGIC:
        raise BttError("bad magic")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    images: dict[int, list[tuple[int, int, int]]] = {}
    for _ in range(count):
        name, n = _IMAGE_HDR.unpack_from(data, off)
        off += _IMAGE_HDR.size
        recs = []
        for _ in range(n):
            recs.append(_RECORD.unpack_from(data, off))
            off += _RECORD.size
        images[name] = recs
    return images
