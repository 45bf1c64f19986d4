"""Column-major pool allocation over checksum pages.

Objects are bump-allocated down the columns of a page's 7x7 data matrix in
allocation order.  Everything starts on a 64-byte boundary, small objects are
packed inside one column, and anything bigger than a column takes whole
consecutive columns of a single page.  Column tails that are skipped stay
zero.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .checksum import BLOCK, COLUMN_BYTES, DATA_BYTES, DATA_COLS, PAGE_SIZE
from .errors import AllocError, ConfigError, OutOfMemoryError, UsageError

SUPER_MAGIC = b"PMTXSUPR"
_SUPER_HEAD = struct.Struct("<8sIQ")
_POOL_ENTRY = struct.Struct("<QI")
_CURSOR = struct.Struct("<II")
_POOL_TABLE_OFF = 64
_CURSOR_OFF = 512


class PoolKind(enum.IntEnum):
    KEY = 0
    FIELD_VALUE = 1
    LOG = 2


def _blocks_for(size: int) -> int:
    return -(-size // BLOCK)


@dataclass(eq=False)
class Region:
    addr: int
    blocks: int
    members: int = 1


@dataclass(eq=False)
class Allocation:
    addr: int
    size: int
    kind: PoolKind
    region: Region = field(repr=False, default=None)
    live: bool = field(default=True, repr=False)

    @property
    def blocks(self) -> int:
        return ((self.addr + self.size - 1) >> 6) - (self.addr >> 6) + 1

    def block_addrs(self) -> range:
        first = self.addr & ~(BLOCK - 1)
        return range(first, first + self.blocks * BLOCK, BLOCK)


class Pool:
    def __init__(self, kind: PoolKind, base: int, npages: int, emu, persist_cursor: bool = True):
        self.kind = kind
        self.base = base
        self.npages = npages
        self.emu = emu
        self.page = 0
        self.offset = 0  # byte offset inside the page's data region
        self.free_list: dict[int, list[Region]] = {}
        self.persist_cursor = persist_cursor
        self.meta_flushes = 0

    @property
    def end(self) -> int:
        return self.base + self.npages * PAGE_SIZE

    def pages(self):
        return range(self.base, self.end, PAGE_SIZE)

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def _place(self, blocks: int) -> int:
        nbytes = blocks * BLOCK
        page, off = self.page, self.offset
        if nbytes <= COLUMN_BYTES:
            if nbytes > COLUMN_BYTES - off % COLUMN_BYTES:
                off += COLUMN_BYTES - off % COLUMN_BYTES
            if off >= DATA_BYTES:
                page, off = page + 1, 0
            end = off + nbytes
        else:
            ncols = -(-nbytes // COLUMN_BYTES)
            if off % COLUMN_BYTES:
                off += COLUMN_BYTES - off % COLUMN_BYTES
            if off // COLUMN_BYTES + ncols > DATA_COLS:
                page, off = page + 1, 0
            end = off + ncols * COLUMN_BYTES
        if page >= self.npages:
            raise OutOfMemoryError(f"{self.kind.name.lower()} pool exhausted")
        addr = self.base + page * PAGE_SIZE + off
        if end >= DATA_BYTES:
            self.page, self.offset = page + 1, 0
        else:
            self.page, self.offset = page, end
        if self.persist_cursor:
            self._save_cursor()
        return addr

    def _save_cursor(self):
        at = _CURSOR_OFF + int(self.kind) * BLOCK
        self.emu.store(at, _CURSOR.pack(self.page, self.offset))
        self.emu.flush_line(at)
        self.meta_flushes += 1

    def _region(self, blocks: int) -> Region:
        bucket = self.free_list.get(blocks)
        if bucket:
            region = bucket.pop()
            region.members = 0
            return region
        try:
            return Region(self._place(blocks), blocks, 0)
        except OutOfMemoryError:
            # best fit among larger free regions; the slack stays with the
            # region and comes back with it
            for size in sorted(k for k, v in self.free_list.items() if k > blocks and v):
                region = self.free_list[size].pop()
                region.members = 0
                return region
            raise

    def available_blocks(self) -> int:
        """Blocks still obtainable: untouched bump space plus free regions."""
        bump = (self.npages - self.page) * (DATA_BYTES // BLOCK) - self.offset // BLOCK
        return max(bump, 0) + sum(k * len(v) for k, v in self.free_list.items())

    def pmalloc(self, size: int) -> Allocation:
        if not 0 < size <= DATA_BYTES:
            raise AllocError(f"allocation size {size} outside (0, {DATA_BYTES}]")
        region = self._region(_blocks_for(size))
        region.members = 1
        return Allocation(region.addr, size, self.kind, region)

    def pmalloc_pair(self, field_size: int, value_size: int) -> tuple[Allocation, Allocation]:
        if field_size <= 0 or value_size <= 0 or field_size + value_size > DATA_BYTES:
            raise AllocError(f"pair sizes ({field_size}, {value_size}) out of range")
        region = self._region(_blocks_for(field_size + value_size))
        region.members = 2
        f = Allocation(region.addr, field_size, self.kind, region)
        v = Allocation(region.addr + field_size, value_size, self.kind, region)
        return f, v

    def pfree(self, alloc: Allocation, zero: bool = True) -> None:
        if not alloc.live:
            raise UsageError(f"double free of {alloc.addr:#x}")
        if alloc.kind != self.kind or not self.contains(alloc.addr):
            raise UsageError("allocation does not belong to this pool")
        alloc.live = False
        if zero:
            self.emu.store(alloc.addr, bytes(alloc.size))
            self.emu.flush_range(alloc.addr, alloc.size)
        region = alloc.region
        region.members -= 1
        if region.members == 0:
            self.free_list.setdefault(region.blocks, []).append(region)

    def restore_cursor(self, page: int, offset: int) -> None:
        self.page, self.offset = page, offset


class PoolSet:
    """The key, field/value and log pools carved out of one emulator."""

    def __init__(self, emu, pools: dict):
        self.emu = emu
        self.pools = pools

    def __getitem__(self, kind: PoolKind) -> Pool:
        return self.pools[PoolKind(kind)]

    @property
    def key(self) -> Pool:
        return self.pools[PoolKind.KEY]

    @property
    def field_value(self) -> Pool:
        return self.pools[PoolKind.FIELD_VALUE]

    @property
    def log(self) -> Pool:
        return self.pools[PoolKind.LOG]

    def data_pools(self):
        return [self.pools[PoolKind.KEY], self.pools[PoolKind.FIELD_VALUE]]

    def pool_of(self, addr: int) -> Pool | None:
        for pool in self.pools.values():
            if pool.contains(addr):
                return pool
        return None

    def pmalloc(self, kind: PoolKind, size: int) -> Allocation:
        return self[kind].pmalloc(size)

    def pmalloc_pair(self, field_size: int, value_size: int):
        return self.field_value.pmalloc_pair(field_size, value_size)

    def pfree(self, alloc: Allocation) -> None:
        self[alloc.kind].pfree(alloc)

    @classmethod
    def from_superblock(cls, emu) -> "PoolSet":
        """Rebuild pools and bump cursors from the durable superblock."""
        magic, _version, capacity = _SUPER_HEAD.unpack_from(emu.durable(0, _SUPER_HEAD.size))
        if magic != SUPER_MAGIC:
            raise ConfigError("no pool superblock in image")
        pools = {}
        for kind in PoolKind:
            raw = emu.durable(_POOL_TABLE_OFF + int(kind) * _POOL_ENTRY.size, _POOL_ENTRY.size)
            base, npages = _POOL_ENTRY.unpack(raw)
            pool = Pool(kind, base, npages, emu, persist_cursor=kind != PoolKind.LOG)
            if kind != PoolKind.LOG:
                page, off = _CURSOR.unpack(emu.durable(_CURSOR_OFF + int(kind) * BLOCK, _CURSOR.size))
                pool.restore_cursor(page, off)
            pools[kind] = pool
        return cls(emu, pools)


def init_pools(emu, key_pool_bytes: int, field_value_pool_bytes: int, log_pool_bytes: int) -> PoolSet:
    """Carve the three pools after the superblock page and zero them."""
    sizes = {
        PoolKind.KEY: key_pool_bytes,
        PoolKind.FIELD_VALUE: field_value_pool_bytes,
        PoolKind.LOG: log_pool_bytes,
    }
    pools = {}
    base = PAGE_SIZE
    for kind, nbytes in sizes.items():
        npages = nbytes // PAGE_SIZE
        if npages <= 0:
            raise ConfigError(f"{kind.name.lower()} pool needs at least one page, got {nbytes} bytes")
        pools[kind] = Pool(kind, base, npages, emu, persist_cursor=kind != PoolKind.LOG)
        base += npages * PAGE_SIZE
    if base > emu.capacity:
        raise ConfigError(f"pools need {base} bytes but NVM has {emu.capacity}")
    emu.format(0, base)
    head = bytearray(PAGE_SIZE)
    _SUPER_HEAD.pack_into(head, 0, SUPER_MAGIC, 1, emu.capacity)
    for kind, pool in pools.items():
        _POOL_ENTRY.pack_into(head, _POOL_TABLE_OFF + int(kind) * _POOL_ENTRY.size, pool.base, pool.npages)
    emu.store(0, head[:_CURSOR_OFF])
    emu.flush_range(0, _CURSOR_OFF)
    emu.fence()
    return PoolSet(emu, pools)


def pool_bytes_for(nobjects: int, object_size: int, slack: float = 1.25) -> int:
    """Rough pool size needed to hold ``nobjects`` of ``object_size`` bytes."""
    blocks = _blocks_for(object_size)
    if blocks * BLOCK <= COLUMN_BYTES:
        per_col = COLUMN_BYTES // (blocks * BLOCK)
        per_page = per_col * DATA_COLS
    else:
        ncols = -(-blocks * BLOCK // COLUMN_BYTES)
        per_page = max(DATA_COLS // ncols, 1)
    pages = -(-nobjects // per_page)
    return int(pages * slack + 1) * PAGE_SIZE
