"""Undo- and redo-logging transactions with deferred object flushes.

A transaction is *logically* committed once all of its reads and writes are
done and its commit marker is durable.  It becomes *physically* committed
when every deferred object flush has either been carried out or skipped, and
the checksums of the pages holding skipped objects are durable.  Physical
commits happen in logical-commit order, which keeps the committed image a
prefix of the commit history.

Flushes and fences are tallied per category (log, object, marker, checksum,
reclaim, ...) so the classic per-transaction costs can be read off directly.
"""
from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field

from . import logrec
from .allocator import Allocation, PoolKind, PoolSet, init_pools
from .checksum import (BLOCK, DATA_COLS, DATA_ROWS, PAGE_SIZE, PROTECT_TAG,
                       TAIL_OFFSET, block_position, compute_checksums, cons_addr, corr_addr,
                       is_protected, lane_bytes, lanes, page_base, stored_checksums)
from .emulator import CacheConfig, NvmEmulator
from .errors import ConfigError, InternalError, OutOfMemoryError, TxnStateError, UsageError
from .logrec import RecordKind
from .tracker import LocalityTracker


class Mode(str, enum.Enum):
    UNDO = "undo"
    REDO = "redo"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown logging mode {value!r} (expected undo or redo)") from None


class TxnState(str, enum.Enum):
    ACTIVE = "active"
    LOGICAL = "logically_committed"
    PHYSICAL = "physically_committed"
    ABORTED = "aborted"


class Resolution(str, enum.Enum):
    FLUSHED = "flushed"
    SKIPPED = "skipped_with_checksum"


@dataclass(eq=False)
class TxnDescriptor:
    id: int
    mode: Mode
    archapt_enabled: bool
    state: TxnState = TxnState.ACTIVE
    write_set: list = field(default_factory=list)     # (obj, old, new)
    log_records: list = field(default_factory=list)   # data record allocations
    markers: list = field(default_factory=list)       # lcommit marker allocations
    pending: set = field(default_factory=set)         # object addresses
    skipped: set = field(default_factory=set)
    objects: dict = field(default_factory=dict)       # addr -> obj, first-write order
    redo_values: dict = field(default_factory=dict)   # addr -> new value

    @property
    def pending_count(self) -> int:
        return len(self.pending)

    def final_values(self) -> dict:
        if self.mode is Mode.REDO:
            return dict(self.redo_values)
        out = {}
        for obj, _old, new in self.write_set:
            out[obj.addr] = new
        return out


class Runtime:
    """Transaction manager over one emulator and its pools.

    ``archapt`` is the default for new transactions.  Checksum maintenance
    is a runtime-wide property (it has to be, since pages are shared) and is
    on whenever ``archapt`` is.
    """

    def __init__(self, emu: NvmEmulator, pools: PoolSet, mode="undo", archapt: bool = True,
                 tracker_capacity_blocks: int | None = None, checksums: bool | None = None):
        self.emu = emu
        self.pools = pools
        self.mode = Mode.parse(mode)
        self.archapt = bool(archapt)
        self.checksums = self.archapt if checksums is None else bool(checksums)
        cap = tracker_capacity_blocks or emu.config.capacity_blocks
        self.tracker = LocalityTracker(cap, on_flush=self._complete_flush, on_skip=self._skip_flush)
        self.shadow = bytearray(emu.peek(0, emu.capacity)) if self.checksums else None
        self.page_sums: dict[int, list] = {}
        self.txns: dict[int, TxnDescriptor] = {}
        self.commit_queue: deque[TxnDescriptor] = deque()
        self.flushes: Counter = Counter()
        self.barriers: Counter = Counter()
        self._next_id = 1
        self._seq = 1
        self._advancing = False
        self.log_reserve_blocks = min(4 * (PAGE_SIZE // BLOCK), pools.log.npages * 8)

    @classmethod
    def create(cls, nvm_bytes: int, key_pool_bytes: int, field_value_pool_bytes: int,
               log_pool_bytes: int, cache: CacheConfig | None = None, **kw) -> "Runtime":
        emu = NvmEmulator(nvm_bytes, cache)
        pools = init_pools(emu, key_pool_bytes, field_value_pool_bytes, log_pool_bytes)
        return cls(emu, pools, **kw)

    @classmethod
    def reopen(cls, emu: NvmEmulator, **kw) -> "Runtime":
        """Resume on a (recovered) image: pools and checksum state are read
        back from media.  Freed regions of the previous session are not
        remembered."""
        rt = cls(emu, PoolSet.from_superblock(emu), **kw)
        if rt.checksums:
            for pool in rt.pools.data_pools():
                for psa in pool.pages():
                    page = emu.durable(psa, PAGE_SIZE)
                    if is_protected(page):
                        rt.page_sums[psa] = list(stored_checksums(page))
        return rt

    # -- accounting helpers --------------------------------------------------

    def _flush(self, addr: int, n: int, kind: str) -> None:
        self.flushes[kind] += self.emu.flush_range(addr, n)

    def _fence(self, kind: str) -> None:
        self.emu.fence()
        self.barriers[kind] += 1

    def _next_seq(self) -> int:
        s = self._seq
        self._seq += 1
        return s

    def _write_record(self, txn: TxnDescriptor, kind: RecordKind, aux: int, payload: bytes,
                      category: str) -> Allocation:
        rec = logrec.encode(kind, txn.mode.value, txn.id, self._next_seq(), aux, payload)
        alloc = self._log_alloc(len(rec))
        self.emu.store(alloc.addr, rec)
        self._flush(alloc.addr, len(rec), category)
        return alloc

    def _log_alloc(self, size: int) -> Allocation:
        while True:
            try:
                return self.pools.log.pmalloc(size)
            except OutOfMemoryError:
                # log space comes back from physical commits; force the oldest
                # logically committed transaction through
                if not self.commit_queue or not self._force_oldest():
                    raise

    def _force_oldest(self) -> bool:
        head = self.commit_queue[0]
        before = len(self.commit_queue)
        self.tracker.drain(head.id)
        self._advance()
        return len(self.commit_queue) < before

    def _reclaim(self, allocs, category: str = "reclaim") -> None:
        if not allocs:
            return
        for a in allocs:
            self.emu.store(a.addr, bytes(a.size))
            self._flush(a.addr, a.size, category)
        self._fence(category)
        for a in allocs:
            self.pools.log.pfree(a, zero=False)

    # -- transactions --------------------------------------------------------

    def tx_start(self, mode=None, archapt_enabled: bool | None = None) -> TxnDescriptor:
        mode = self.mode if mode is None else Mode.parse(mode)
        if mode is not self.mode:
            raise ConfigError(f"runtime is in {self.mode.value} mode, cannot start a {mode.value} txn")
        archapt = self.archapt if archapt_enabled is None else bool(archapt_enabled)
        if archapt and not self.checksums:
            raise ConfigError("deferred flushes need checksum maintenance enabled")
        # keep headroom in the log so a physical commit never runs dry
        while self.commit_queue and self.pools.log.available_blocks() < self.log_reserve_blocks:
            self._force_oldest()
        txn = TxnDescriptor(self._next_id, mode, archapt)
        self._next_id += 1
        self.txns[txn.id] = txn
        return txn

    def _require(self, txn: TxnDescriptor, state: TxnState = TxnState.ACTIVE) -> None:
        if self.txns.get(txn.id) is not txn:
            raise TxnStateError(f"txn {txn.id} does not belong to this runtime")
        if txn.state is not state:
            raise TxnStateError(f"txn {txn.id} is {txn.state.value}, expected {state.value}")

    def _track(self, obj, is_write: bool, txn: TxnDescriptor) -> None:
        self.tracker.record_access(obj, is_write, txn.id)
        if is_write:
            txn.pending.add(obj.addr)

    def tx_write(self, txn: TxnDescriptor, obj: Allocation, new_value) -> None:
        self._require(txn)
        if obj is None or not obj.live:
            raise UsageError("write to an unallocated object")
        new = bytes(new_value)
        if len(new) != obj.size:
            raise UsageError(f"value of {len(new)} bytes for a {obj.size}-byte object")
        emu = self.emu
        if txn.mode is Mode.UNDO:
            old = emu.load(obj.addr, obj.size)
            txn.log_records.append(self._write_record(txn, RecordKind.UNDO, obj.addr, old, "log"))
            self._fence("log")
            if txn.archapt_enabled:
                # must precede the store: completing a prior pending flush of
                # this object has to persist the previous value
                self._track(obj, True, txn)
            emu.store(obj.addr, new)
            if not txn.archapt_enabled:
                self._flush(obj.addr, obj.size, "object")
                self._fence("object")
            txn.write_set.append((obj, old, new))
        else:
            txn.log_records.append(self._write_record(txn, RecordKind.REDO, obj.addr, new, "log"))
            txn.redo_values[obj.addr] = new
            txn.write_set.append((obj, None, new))
        txn.objects.setdefault(obj.addr, obj)

    def tx_read(self, txn: TxnDescriptor, obj: Allocation) -> bytes:
        self._require(txn)
        if obj is None or not obj.live:
            raise UsageError("read of an unallocated object")
        if txn.archapt_enabled:
            self.tracker.record_access(obj, False, txn.id)
        if txn.mode is Mode.REDO and obj.addr in txn.redo_values:
            return txn.redo_values[obj.addr]
        return self.emu.load(obj.addr, obj.size)

    def tx_lcommit(self, txn: TxnDescriptor) -> TxnState:
        self._require(txn)
        if not txn.write_set:
            txn.state = TxnState.LOGICAL
            txn.state = TxnState.PHYSICAL
            return txn.state
        emu = self.emu
        if txn.mode is Mode.REDO:
            # one fence covers every redo record flushed by tx_write
            self._fence("log")
            befores = [(addr, emu.load(addr, obj.size)) for addr, obj in txn.objects.items()]
            self._write_marker(txn, RecordKind.LCOMMIT, logrec.pack_images(befores))
            for addr, obj in txn.objects.items():
                if txn.archapt_enabled:
                    self._track(obj, True, txn)
                emu.store(addr, txn.redo_values[addr])
            if not txn.archapt_enabled:
                # all stores land before the flushes, so a block shared by
                # two objects of the txn is written back once
                for addr, obj in txn.objects.items():
                    self._flush(addr, obj.size, "object")
                    self._fence("object")
        else:
            self._write_marker(txn, RecordKind.LCOMMIT, [b""])
        txn.state = TxnState.LOGICAL
        self.commit_queue.append(txn)
        self._advance()
        return txn.state

    def tx_end(self, txn: TxnDescriptor) -> TxnState:
        """Finish a transaction: logically commit it if still active."""
        if txn.state is TxnState.ACTIVE:
            return self.tx_lcommit(txn)
        return txn.state

    def _write_marker(self, txn: TxnDescriptor, kind: RecordKind, payloads: list) -> list:
        n = len(payloads)
        allocs = [self._write_record(txn, kind, (i << 16) | n, p, "marker")
                  for i, p in enumerate(payloads)]
        self._fence("marker")
        if kind is RecordKind.LCOMMIT:
            txn.markers.extend(allocs)
        return allocs

    def tx_abort(self, txn: TxnDescriptor) -> None:
        self._require(txn)
        if txn.mode is Mode.UNDO and txn.write_set:
            for obj, old, _new in reversed(txn.write_set):
                if txn.archapt_enabled and self.tracker.pending_owner(obj.addr) == txn.id:
                    self.tracker.forget(obj, complete=False)
                txn.pending.discard(obj.addr)
                self.emu.store(obj.addr, old)
                self._flush(obj.addr, obj.size, "abort")
            self._fence("abort")
        txn.state = TxnState.ABORTED
        self._reclaim(txn.log_records)
        txn.log_records = []

    # -- pending flush resolution -------------------------------------------

    def _complete_flush(self, obj, owner) -> None:
        self._flush(obj.addr, obj.size, "object")
        self._fence("object")
        self.resolve_pending(self.txns[owner], obj, Resolution.FLUSHED)

    def _skip_flush(self, obj, owner) -> None:
        self.emu.counters.flushes_skipped += obj.blocks
        self.resolve_pending(self.txns[owner], obj, Resolution.SKIPPED)

    def resolve_pending(self, txn: TxnDescriptor, obj, how=Resolution.FLUSHED) -> None:
        if txn.state not in (TxnState.ACTIVE, TxnState.LOGICAL) or obj.addr not in txn.pending:
            raise InternalError(f"object {obj.addr:#x} is not pending in txn {txn.id}")
        txn.pending.discard(obj.addr)
        if Resolution(how) is Resolution.SKIPPED:
            txn.skipped.add(obj.addr)
        if txn.state is TxnState.LOGICAL and not txn.pending:
            self._advance()

    def drain(self, txn: TxnDescriptor) -> None:
        """Skip every pending flush of ``txn`` (checksums take over)."""
        self.tracker.drain(txn.id)
        self._advance()

    def drain_all(self) -> None:
        for txn in list(self.commit_queue):
            self.tracker.drain(txn.id)
        self._advance()
        if self.commit_queue:
            raise InternalError("commit queue not empty after drain")

    def _advance(self) -> None:
        if self._advancing:
            return
        self._advancing = True
        try:
            q = self.commit_queue
            while q and not q[0].pending:
                self._physical_commit(q.popleft())
        finally:
            self._advancing = False

    # -- physical commit -----------------------------------------------------

    def _physical_commit(self, txn: TxnDescriptor) -> None:
        meta = self._checksum_writes(txn) if self.checksums else []
        pmarkers = self._write_marker(txn, RecordKind.PCOMMIT, logrec.pack_meta(meta))
        txn.state = TxnState.PHYSICAL
        if meta:
            for addr, data in meta:
                self.emu.store(addr, data)
                self._flush(addr, BLOCK, "checksum")
            self._fence("checksum")
        self._reclaim(txn.log_records + txn.markers)
        self._reclaim(pmarkers)
        txn.log_records, txn.markers = [], []

    def _checksum_writes(self, txn: TxnDescriptor) -> list:
        """Fold the txn's final values into the shadow and collect the
        checksum blocks that must change."""
        shadow = self.shadow
        dirty: dict[int, set] = {}
        protect = set()
        for addr, new in txn.final_values().items():
            obj = txn.objects[addr]
            psa = page_base(addr)
            sums = self.page_sums.get(psa)
            if sums is not None:
                first = addr & ~(BLOCK - 1)
                last = (addr + obj.size - 1) & ~(BLOCK - 1)
                olds = bytes(shadow[first:last + BLOCK])
                shadow[addr:addr + obj.size] = new
                news = bytes(shadow[first:last + BLOCK])
                for b in range(first, last + BLOCK, BLOCK):
                    i = b - first
                    if olds[i:i + BLOCK] == news[i:i + BLOCK]:
                        continue
                    delta = lanes(news[i:i + BLOCK]) - lanes(olds[i:i + BLOCK])
                    r, c = block_position(b)
                    sums[0][c] += delta
                    sums[1][r] += delta
                    d = dirty.setdefault(psa, set())
                    d.add(("cons", c))
                    d.add(("corr", r))
            else:
                shadow[addr:addr + obj.size] = new
                if addr in txn.skipped:
                    protect.add(psa)
        meta = []
        for psa in sorted(protect):
            cons, corr = compute_checksums(bytes(shadow[psa:psa + PAGE_SIZE]))
            self.page_sums[psa] = [cons, corr]
            meta.extend((cons_addr(psa, c), lane_bytes(cons[c])) for c in range(DATA_COLS))
            meta.extend((corr_addr(psa, r), lane_bytes(corr[r])) for r in range(DATA_ROWS))
            meta.append((psa + TAIL_OFFSET, PROTECT_TAG))
        for psa in sorted(dirty):
            sums = self.page_sums[psa]
            for kind, i in sorted(dirty[psa]):
                if kind == "cons":
                    meta.append((cons_addr(psa, i), lane_bytes(sums[0][i])))
                else:
                    meta.append((corr_addr(psa, i), lane_bytes(sums[1][i])))
        return meta

    def protected_pages(self) -> list:
        return sorted(self.page_sums)

    # -- non-transactional helpers ------------------------------------------

    def _in_flight(self, obj) -> bool:
        return any(obj.addr in t.objects for t in self.txns.values()
                   if t.state in (TxnState.ACTIVE, TxnState.LOGICAL))

    def _direct_write(self, obj: Allocation, value: bytes, category: str) -> None:
        """Write outside any transaction, keeping checksums in step first."""
        if self.checksums:
            psa = page_base(obj.addr)
            sums = self.page_sums.get(psa)
            first = obj.addr & ~(BLOCK - 1)
            last = (obj.addr + obj.size - 1) & ~(BLOCK - 1)
            olds = bytes(self.shadow[first:last + BLOCK])
            self.shadow[obj.addr:obj.addr + obj.size] = value
            if sums is not None:
                news = bytes(self.shadow[first:last + BLOCK])
                touched = {}
                for b in range(first, last + BLOCK, BLOCK):
                    i = b - first
                    delta = lanes(news[i:i + BLOCK]) - lanes(olds[i:i + BLOCK])
                    if not delta.any():
                        continue
                    r, c = block_position(b)
                    sums[0][c] += delta
                    sums[1][r] += delta
                    touched[cons_addr(psa, c)] = sums[0][c]
                    touched[corr_addr(psa, r)] = sums[1][r]
                for a in sorted(touched):
                    self.emu.store(a, lane_bytes(touched[a]))
                    self._flush(a, BLOCK, "checksum")
        self.emu.store(obj.addr, value)
        self._flush(obj.addr, obj.size, category)

    def malloc(self, size: int, kind: PoolKind = PoolKind.KEY) -> Allocation:
        return self.pools.pmalloc(kind, size)

    def malloc_pair(self, field_size: int, value_size: int):
        return self.pools.pmalloc_pair(field_size, value_size)

    def free(self, obj: Allocation) -> None:
        if not obj.live:
            raise UsageError(f"double free of {obj.addr:#x}")
        if self._in_flight(obj):
            raise UsageError(f"object {obj.addr:#x} is used by an unfinished transaction")
        self.tracker.forget(obj, complete=True)
        self._direct_write(obj, bytes(obj.size), "alloc")
        self._fence("alloc")
        self.pools[obj.kind].pfree(obj, zero=False)

    def populate(self, obj: Allocation, value, fence: bool = True) -> None:
        """Initial non-transactional load of an object."""
        value = bytes(value)
        if len(value) != obj.size:
            raise UsageError(f"value of {len(value)} bytes for a {obj.size}-byte object")
        if self._in_flight(obj):
            raise UsageError(f"object {obj.addr:#x} is used by an unfinished transaction")
        self._direct_write(obj, value, "populate")
        if fence:
            self._fence("populate")

    def sync(self) -> None:
        self._fence("populate")

    # -- reporting -----------------------------------------------------------

    def txn_counts(self) -> dict:
        counts = Counter(t.state.value for t in self.txns.values())
        return {s.value: counts.get(s.value, 0) for s in TxnState}

    def object_flushes(self) -> int:
        return self.flushes["object"]

    def metrics(self) -> dict:
        c = self.emu.counters
        return {
            "mode": self.mode.value,
            "archapt": self.archapt,
            "counters": c.as_dict(),
            "dirtiness_histogram": c.histogram(10),
            "flushes_by_kind": dict(sorted(self.flushes.items())),
            "barriers_by_kind": dict(sorted(self.barriers.items())),
            "txn_counts": self.txn_counts(),
            "protected_pages": len(self.page_sums),
            "tracker": {k: getattr(self.tracker.stats, k) for k in vars(self.tracker.stats)},
        }


def init(nvm_bytes: int, key_pool_bytes: int, field_value_pool_bytes: int, log_pool_bytes: int,
         cache: CacheConfig | None = None, mode="undo", archapt: bool = True, **kw) -> Runtime:
    """Build emulator, pools and runtime in one go."""
    return Runtime.create(nvm_bytes, key_pool_bytes, field_value_pool_bytes, log_pool_bytes,
                          cache=cache, mode=mode, archapt=archapt, **kw)
