"""Deterministic toy filesystem standing in for a real kernel filesystem.

Translates file calls into ordered streams of classified disk requests
(metadata vs filedata vs mixed). Only the metadata/filedata dichotomy and
the request-stream shape matter to the rest of the system; journaling,
crash consistency and caching are deliberately absent.

Layout convention: vblock 0 is the superblock, followed by the inode
table, the allocation bitmap, then the dynamic area shared by directory
blocks (metadata) and file data blocks (filedata). Allocation is first-fit
over the bitmap, so freed file blocks can later be claimed for metadata,
which exercises the backstore's erase-on-repurpose rule.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .util import BLOCK_SIZE, digest16

INODE_SIZE = 128
INODES_PER_BLOCK = BLOCK_SIZE // INODE_SIZE
BITS_PER_BITMAP_BLOCK = BLOCK_SIZE * 8
DIR_ENTRIES_PER_BLOCK = 64
DEFAULT_INLINE_THRESHOLD = 160

FLAG_CREATE = 1
FLAG_APPEND = 2
FLAG_TRUNC = 4

CALL_KINDS = (
    "open", "create", "read", "write", "seek",
    "fstat", "truncate", "unlink", "mkdir", "close",
)

META = "metadata"
DATA = "filedata"
MIXED = "mixed"


class SimFsError(Exception):
    pass


@dataclass(slots=True)
class FileCall:
    kind: str
    path: str
    offset: int = 0
    size: int = 0
    flags: int = 0
    buffer_ref: int | None = None
    timestamp: int = 0

    def __post_init__(self):
        if self.kind not in CALL_KINDS:
            raise SimFsError(f"unknown call kind {self.kind!r}")
        moves_data = self.kind in ("read", "write")
        if moves_data and self.buffer_ref is None:
            raise SimFsError(f"{self.kind} call requires a buffer_ref")
        if not moves_data and self.buffer_ref is not None:
            raise SimFsError(f"{self.kind} call must not carry a buffer_ref")


@dataclass(slots=True)
class DiskRequest:
    image_id: int
    op: str                      # read | write
    vblock: int
    clazz: str                   # metadata | filedata | mixed
    length: int = 1              # blocks
    payload: bytes | None = None     # OS buffer content (metadata/mixed writes)
    opaque_ref: int | None = None    # filedata/mixed transfers
    inline_meta: tuple | None = None  # (inum, file_offset, size) for mixed
    data_window: tuple | None = None  # (buf_start, file_pos, nbytes) for filedata
    deinline: tuple | None = None     # (inum, old_inline_size) on de-inlining

    @property
    def payload_source(self) -> str:
        return "opaque_ref" if self.clazz == DATA else "os_buffer"


@dataclass(slots=True)
class SimFsLayout:
    image_id: int
    disk_blocks: int
    block_size: int = BLOCK_SIZE
    inline_threshold: int = DEFAULT_INLINE_THRESHOLD
    superblock_range: tuple = (0, 1)
    inode_table_range: tuple = (0, 0)
    bitmap_range: tuple = (0, 0)
    data_start: int = 0
    max_inodes: int = 0

    @property
    def inode_table_blocks(self) -> int:
        return self.inode_table_range[1] - self.inode_table_range[0]

    @property
    def bitmap_blocks(self) -> int:
        return self.bitmap_range[1] - self.bitmap_range[0]


@dataclass(slots=True)
class Inode:
    inum: int
    kind: str                    # file | dir
    size: int = 0
    extents: list = field(default_factory=list)  # [(start, nblocks)]
    inline: bool = True
    version: int = 0

    def blocks(self):
        for start, n in self.extents:
            yield from range(start, start + n)


class Directory:
    __slots__ = ("inum", "blocks", "entries")

    def __init__(self, inum: int, blocks: list[int]):
        self.inum = inum
        self.blocks = blocks            # metadata-class vblocks, in order
        self.entries: dict[str, int] = {}


def _spanned(offset: int, size: int) -> list[int]:
    """File-block indices covered by the byte range [offset, offset+size)."""
    if size <= 0:
        return []
    first = offset // BLOCK_SIZE
    last = (offset + size - 1) // BLOCK_SIZE
    return list(range(first, last + 1))


class SimFs:
    """One mounted filesystem image, single-threaded.

    Distinct instances share no state and may be driven concurrently.
    """

    def __init__(self, image_id: int, disk_blocks: int,
                 inline_threshold: int = DEFAULT_INLINE_THRESHOLD):
        self.image_id = image_id
        self.layout = self._plan_layout(image_id, disk_blocks, inline_threshold)
        self.bitmap = [False] * disk_blocks
        self.inodes: dict[int, Inode] = {}
        self.dirs: dict[str, Directory] = {}
        self.paths: dict[str, int] = {}      # file path -> inum
        self.file_blocks: dict[int, list[int]] = {}  # inum -> vblocks, file order
        self._mkfs_requests: list[DiskRequest] = []
        self._mkfs()

    # -- layout / mkfs --------------------------------------------------

    @staticmethod
    def _plan_layout(image_id, disk_blocks, inline_threshold) -> SimFsLayout:
        max_inodes = max(64, disk_blocks // 64)
        table_blocks = -(-max_inodes // INODES_PER_BLOCK)
        bitmap_blocks = -(-disk_blocks // BITS_PER_BITMAP_BLOCK)
        minimum = 1 + table_blocks + bitmap_blocks + 1
        if disk_blocks < minimum:
            raise SimFsError(
                f"disk too small: {disk_blocks} blocks < minimum {minimum}")
        table_start = 1
        bitmap_start = table_start + table_blocks
        data_start = bitmap_start + bitmap_blocks
        return SimFsLayout(
            image_id=image_id,
            disk_blocks=disk_blocks,
            inline_threshold=inline_threshold,
            superblock_range=(0, 1),
            inode_table_range=(table_start, bitmap_start),
            bitmap_range=(bitmap_start, data_start),
            data_start=data_start,
            max_inodes=max_inodes,
        )

    def _mkfs(self):
        lo = self.layout
        for v in range(lo.data_start):
            self.bitmap[v] = True
        reqs = [self._meta_write(0, self._superblock_payload())]
        for v in range(*lo.inode_table_range):
            reqs.append(self._meta_write(v, self._inode_block_payload(v)))
        root = self._alloc_inode("dir")
        dirblk = self._alloc_block()
        self.dirs["/"] = Directory(root.inum, [dirblk])
        reqs.append(self._meta_write(dirblk, self._dir_block_payload("/", 0)))
        reqs.append(self._meta_write(self._inode_vblock(root.inum),
                                     self._inode_block_payload_of(root.inum)))
        for v in range(*lo.bitmap_range):
            reqs.append(self._meta_write(v, self._bitmap_block_payload(v)))
        self._mkfs_requests = reqs

    @property
    def mkfs_requests(self) -> list[DiskRequest]:
        """The metadata write stream that initialization produced."""
        return list(self._mkfs_requests)

    def clone(self, new_image_id: int) -> "SimFs":
        """Logical copy for a forked image (identical metadata state)."""
        twin = copy.deepcopy(self)
        twin.image_id = new_image_id
        twin.layout = replace_layout(twin.layout, new_image_id)
        return twin

    # -- payload fabrication --------------------------------------------
    # Block content is a 16-byte digest of the canonical logical state,
    # zero-padded to one block: enough for read-back equality and CoW
    # content matching without packing real on-disk structures.

    def _pad(self, head: bytes) -> bytes:
        return head + b"\x00" * (BLOCK_SIZE - len(head))

    def _superblock_payload(self) -> bytes:
        lo = self.layout
        state = ("super", lo.disk_blocks, lo.inode_table_range,
                 lo.bitmap_range, lo.inline_threshold)
        return self._pad(digest16(repr(state).encode()))

    def _inode_block_payload(self, vblock: int) -> bytes:
        lo = self.layout
        base = (vblock - lo.inode_table_range[0]) * INODES_PER_BLOCK
        slots = []
        for inum in range(base, base + INODES_PER_BLOCK):
            ino = self.inodes.get(inum)
            if ino is None:
                slots.append(None)
            else:
                slots.append((ino.inum, ino.kind, ino.size,
                              tuple(ino.extents), ino.inline, ino.version))
        return self._pad(digest16(repr(slots).encode()))

    def _inode_block_payload_of(self, inum: int) -> bytes:
        return self._inode_block_payload(self._inode_vblock(inum))

    def _bitmap_block_payload(self, vblock: int) -> bytes:
        lo = self.layout
        lobit = (vblock - lo.bitmap_range[0]) * BITS_PER_BITMAP_BLOCK
        seg = self.bitmap[lobit:lobit + BITS_PER_BITMAP_BLOCK]
        raw = bytes(
            sum(1 << i for i, b in enumerate(seg[k:k + 8]) if b)
            for k in range(0, len(seg), 8)
        )
        return self._pad(digest16(raw))

    def _dir_block_payload(self, dirpath: str, blkidx: int) -> bytes:
        d = self.dirs[dirpath]
        names = sorted(d.entries)
        lo = blkidx * DIR_ENTRIES_PER_BLOCK
        chunk = [(n, d.entries[n]) for n in names[lo:lo + DIR_ENTRIES_PER_BLOCK]]
        return self._pad(digest16(repr((dirpath, blkidx, chunk)).encode()))

    # -- request helpers -------------------------------------------------

    def _meta_write(self, vblock: int, payload: bytes) -> DiskRequest:
        return DiskRequest(self.image_id, "write", vblock, META, payload=payload)

    def _meta_read(self, vblock: int) -> DiskRequest:
        return DiskRequest(self.image_id, "read", vblock, META)

    def _inode_vblock(self, inum: int) -> int:
        return self.layout.inode_table_range[0] + inum // INODES_PER_BLOCK

    def _bitmap_vblock(self, vblock: int) -> int:
        return self.layout.bitmap_range[0] + vblock // BITS_PER_BITMAP_BLOCK

    # -- allocation -------------------------------------------------------

    def _alloc_inode(self, kind: str) -> Inode:
        for inum in range(self.layout.max_inodes):
            if inum not in self.inodes:
                ino = Inode(inum, kind)
                self.inodes[inum] = ino
                return ino
        raise SimFsError("inode table full")

    def _alloc_block(self) -> int:
        for v in range(self.layout.data_start, self.layout.disk_blocks):
            if not self.bitmap[v]:
                self.bitmap[v] = True
                return v
        raise SimFsError("disk full")

    def _free_block(self, v: int) -> None:
        self.bitmap[v] = False

    # -- path handling ----------------------------------------------------

    @staticmethod
    def _split(path: str) -> tuple[str, str]:
        path = path.rstrip("/") or "/"
        i = path.rfind("/")
        parent = path[:i] or "/"
        return parent, path[i + 1:]

    def exists(self, path: str) -> bool:
        return path in self.paths or path in self.dirs

    def is_dir(self, path: str) -> bool:
        return path in self.dirs

    def file_size(self, path: str) -> int:
        inum = self.paths.get(path)
        return self.inodes[inum].size if inum is not None else 0

    def free_blocks(self) -> int:
        return self.bitmap.count(False)

    def free_inodes(self) -> int:
        return self.layout.max_inodes - len(self.inodes)

    def list_files(self, dirpath: str) -> list[str]:
        d = self.dirs.get(dirpath)
        if d is None:
            return []
        sep = "" if dirpath == "/" else "/"
        return sorted(dirpath + sep + n for n, inum in d.entries.items()
                      if self.inodes[inum].kind == "file")

    def _walk(self, path: str, reqs: list[DiskRequest]) -> None:
        """Directory-resolution metadata reads along the path components."""
        parts = [p for p in path.split("/") if p]
        cur = "/"
        for idx, part in enumerate(parts):
            d = self.dirs.get(cur)
            if d is None:
                raise SimFsError(f"no such directory {cur}")
            names = sorted(d.entries)
            if part in d.entries:
                blkidx = names.index(part) // DIR_ENTRIES_PER_BLOCK
            else:
                blkidx = len(d.blocks) - 1
            for b in d.blocks[:blkidx + 1]:
                reqs.append(self._meta_read(b))
            if part not in d.entries:
                raise SimFsError(f"no such path {path}")
            cur = cur.rstrip("/") + "/" + part if cur != "/" else "/" + part

    def _resolve_file(self, path: str, reqs: list[DiskRequest]) -> Inode:
        self._walk(path, reqs)
        inum = self.paths.get(path)
        if inum is None:
            raise SimFsError(f"not a file: {path}")
        reqs.append(self._meta_read(self._inode_vblock(inum)))
        return self.inodes[inum]

    def _add_dir_entry(self, dirpath: str, name: str, inum: int,
                       reqs: list[DiskRequest]) -> None:
        d = self.dirs[dirpath]
        d.entries[name] = inum
        needed = -(-len(d.entries) // DIR_ENTRIES_PER_BLOCK)
        allocated = False
        while len(d.blocks) < needed:
            d.blocks.append(self._alloc_block())
            allocated = True
        blkidx = sorted(d.entries).index(name) // DIR_ENTRIES_PER_BLOCK
        reqs.append(self._meta_write(d.blocks[blkidx],
                                     self._dir_block_payload(dirpath, blkidx)))
        if allocated:
            reqs.append(self._meta_write(self._bitmap_vblock(d.blocks[-1]),
                                         self._bitmap_block_payload(
                                             self._bitmap_vblock(d.blocks[-1]))))

    # -- file call execution ----------------------------------------------

    def exec_file_call(self, call: FileCall) -> list[DiskRequest]:
        """Execute one call, mutating the image; returns its disk requests."""
        handler = getattr(self, f"_do_{call.kind}")
        return handler(call)

    def _do_open(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        if not self.exists(call.path):
            if call.flags & FLAG_CREATE:
                return self._do_create(call)
            raise SimFsError(f"no such path {call.path}")
        if call.path in self.dirs:
            self._walk(call.path, reqs)
            return reqs
        ino = self._resolve_file(call.path, reqs)
        if call.flags & FLAG_TRUNC and ino.size:
            reqs.extend(self._shrink(ino, 0))
        return reqs

    def _do_create(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        if call.path in self.dirs:
            raise SimFsError(f"is a directory: {call.path}")
        if call.path in self.paths:
            return self._do_open(
                FileCall("open", call.path, flags=call.flags & ~FLAG_CREATE,
                         timestamp=call.timestamp))
        parent, name = self._split(call.path)
        if parent != "/":
            self._walk(parent, reqs)
        if parent not in self.dirs:
            raise SimFsError(f"no such directory {parent}")
        ino = self._alloc_inode("file")
        self.paths[call.path] = ino.inum
        self.file_blocks[ino.inum] = []
        self._add_dir_entry(parent, name, ino.inum, reqs)
        reqs.append(self._meta_write(self._inode_vblock(ino.inum),
                                     self._inode_block_payload_of(ino.inum)))
        return reqs

    def _do_mkdir(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        if self.exists(call.path):
            raise SimFsError(f"path exists: {call.path}")
        parent, name = self._split(call.path)
        if parent != "/":
            self._walk(parent, reqs)
        if parent not in self.dirs:
            raise SimFsError(f"no such directory {parent}")
        ino = self._alloc_inode("dir")
        blk = self._alloc_block()
        self.dirs[call.path] = Directory(ino.inum, [blk])
        self._add_dir_entry(parent, name, ino.inum, reqs)
        reqs.append(self._meta_write(blk, self._dir_block_payload(call.path, 0)))
        reqs.append(self._meta_write(self._inode_vblock(ino.inum),
                                     self._inode_block_payload_of(ino.inum)))
        reqs.append(self._meta_write(self._bitmap_vblock(blk),
                                     self._bitmap_block_payload(
                                         self._bitmap_vblock(blk))))
        return reqs

    def _do_fstat(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        if call.path == "/":
            reqs.append(self._meta_read(self.dirs["/"].blocks[0]))
            return reqs
        if call.path in self.dirs:
            self._walk(call.path, reqs)
            return reqs
        self._resolve_file(call.path, reqs)
        return reqs

    def _do_seek(self, call: FileCall) -> list[DiskRequest]:
        if call.path not in self.paths:
            raise SimFsError(f"not a file: {call.path}")
        return []

    def _do_close(self, call: FileCall) -> list[DiskRequest]:
        return []

    def _do_read(self, call: FileCall) -> list[DiskRequest]:
        inum = self.paths.get(call.path)
        if inum is None:
            raise SimFsError(f"not a file: {call.path}")
        ino = self.inodes[inum]
        if call.offset + call.size > ino.size:
            raise SimFsError(
                f"read out of bounds: {call.offset}+{call.size} > {ino.size}")
        if call.size == 0:
            return []
        if ino.inline:
            return [DiskRequest(self.image_id, "read",
                                self._inode_vblock(inum), MIXED,
                                opaque_ref=call.buffer_ref,
                                inline_meta=(inum, call.offset, call.size))]
        return self._data_runs("read", inum, call.offset, call.size,
                               call.buffer_ref)

    def _do_write(self, call: FileCall) -> list[DiskRequest]:
        inum = self.paths.get(call.path)
        if inum is None:
            raise SimFsError(f"not a file: {call.path}")
        ino = self.inodes[inum]
        offset = ino.size if call.flags & FLAG_APPEND else call.offset
        if offset > ino.size:
            raise SimFsError(f"write beyond EOF: {offset} > {ino.size}")
        if call.size == 0:
            return []
        new_size = max(ino.size, offset + call.size)
        thr = self.layout.inline_threshold

        if ino.inline and new_size <= thr:
            # Stays inlined in the inode block: one mixed-class request.
            ino.size = new_size
            ino.version += 1
            return [DiskRequest(self.image_id, "write",
                                self._inode_vblock(inum), MIXED,
                                payload=self._inode_block_payload_of(inum),
                                opaque_ref=call.buffer_ref,
                                inline_meta=(inum, offset, call.size))]

        reqs: list[DiskRequest] = []
        # De-inlining: offset <= old size <= threshold < block size, so the
        # call's span always covers file block 0 where the old inline bytes
        # migrate; the backstore splices them ahead of the new data.
        deinline = (inum, ino.size) if ino.inline and ino.size > 0 else None
        file_span = _spanned(offset, call.size)
        new_blocks = self._ensure_blocks(inum, max(file_span) + 1)
        ino.inline = False
        ino.size = new_size
        ino.version += 1
        reqs.append(self._meta_write(self._inode_vblock(inum),
                                     self._inode_block_payload_of(inum)))
        for bv in sorted({self._bitmap_vblock(v) for v in new_blocks}):
            reqs.append(self._meta_write(bv, self._bitmap_block_payload(bv)))
        reqs.extend(self._data_runs("write", inum, offset, call.size,
                                    call.buffer_ref, deinline))
        return reqs

    def _do_truncate(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        ino = self._resolve_file(call.path, reqs)
        if call.size > ino.size:
            raise SimFsError("truncate cannot extend")
        reqs.extend(self._shrink(ino, call.size))
        return reqs

    def _do_unlink(self, call: FileCall) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        inum = self.paths.get(call.path)
        if inum is None:
            raise SimFsError(f"not a file: {call.path}")
        parent, name = self._split(call.path)
        self._walk(call.path, reqs)
        ino = self.inodes[inum]
        freed = list(self.file_blocks[inum])
        for v in freed:
            self._free_block(v)
        d = self.dirs[parent]
        blkidx = sorted(d.entries).index(name) // DIR_ENTRIES_PER_BLOCK
        del d.entries[name]
        del self.paths[call.path]
        del self.inodes[inum]
        del self.file_blocks[inum]
        reqs.append(self._meta_write(d.blocks[min(blkidx, len(d.blocks) - 1)],
                                     self._dir_block_payload(parent, blkidx)))
        reqs.append(self._meta_write(self._inode_vblock(inum),
                                     self._inode_block_payload(
                                         self._inode_vblock(inum))))
        for bv in sorted({self._bitmap_vblock(v) for v in freed}):
            reqs.append(self._meta_write(bv, self._bitmap_block_payload(bv)))
        return reqs

    # -- write plumbing -----------------------------------------------------

    def _ensure_blocks(self, inum: int, nblocks: int) -> list[int]:
        """Extend the file's block list to nblocks; returns fresh vblocks."""
        blocks = self.file_blocks[inum]
        fresh = []
        while len(blocks) < nblocks:
            v = self._alloc_block()
            blocks.append(v)
            fresh.append(v)
        ino = self.inodes[inum]
        ino.extents = _to_extents(blocks)
        return fresh

    def _shrink(self, ino: Inode, new_size: int) -> list[DiskRequest]:
        reqs: list[DiskRequest] = []
        keep = -(-new_size // BLOCK_SIZE) if not ino.inline else 0
        blocks = self.file_blocks[ino.inum]
        freed = blocks[keep:] if not ino.inline else []
        for v in freed:
            self._free_block(v)
        del blocks[keep:]
        ino.extents = _to_extents(blocks)
        ino.size = new_size
        ino.version += 1
        if new_size == 0:
            ino.inline = True
        reqs.append(self._meta_write(self._inode_vblock(ino.inum),
                                     self._inode_block_payload_of(ino.inum)))
        for bv in sorted({self._bitmap_vblock(v) for v in freed}):
            reqs.append(self._meta_write(bv, self._bitmap_block_payload(bv)))
        return reqs

    def _data_runs(self, op: str, inum: int, offset: int, size: int,
                   ref: int | None, deinline: tuple | None = None
                   ) -> list[DiskRequest]:
        """Coalesce the spanned file blocks into filedata requests, each
        carrying the byte window it moves within the call's buffer."""
        indices = _spanned(offset, size)
        blocks = self.file_blocks[inum]
        reqs = []
        i = 0
        while i < len(indices):
            j = i
            while (j + 1 < len(indices)
                   and blocks[indices[j + 1]] == blocks[indices[j]] + 1):
                j += 1
            lo = max(offset, indices[i] * BLOCK_SIZE)
            hi = min(offset + size, (indices[j] + 1) * BLOCK_SIZE)
            reqs.append(DiskRequest(
                self.image_id, op, blocks[indices[i]], DATA,
                length=j - i + 1, opaque_ref=ref,
                data_window=(lo - offset, lo, hi - lo),
                deinline=deinline if indices[i] == 0 else None))
            i = j + 1
        return reqs


def replace_layout(layout: SimFsLayout, image_id: int) -> SimFsLayout:
    out = copy.copy(layout)
    out.image_id = image_id
    return out


def _to_extents(blocks: list[int]) -> list:
    extents = []
    for v in blocks:
        if extents and extents[-1][0] + extents[-1][1] == v:
            extents[-1] = (extents[-1][0], extents[-1][1] + 1)
        else:
            extents.append((v, 1))
    return extents


def mkfs(image_id: int, disk_blocks: int,
         inline_threshold: int = DEFAULT_INLINE_THRESHOLD) -> SimFs:
    """Create a fresh image; its initialization request stream is on
    `.mkfs_requests`. Identical arguments yield identical layouts and
    identical streams."""
    return SimFs(image_id, disk_blocks, inline_threshold)
