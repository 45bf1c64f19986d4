"""LRU-based estimate of which persistent objects are still cache resident.

The queue is sized in 64-byte blocks to match the last-level cache.  A write
does not flush its object right away; the flush stays pending until either
the object is touched again (it is probably still cached, so the flush is
completed then) or it falls off the end of the queue (it has probably been
written back already, so the flush is skipped and checksums take over).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .errors import UsageError


@dataclass(eq=False)
class TrackedObject:
    obj: object
    blocks: int
    pending: bool = False
    owner: int | None = None


@dataclass
class AccessDecision:
    completed_prior_flush: bool = False
    new_pending: bool = False


@dataclass
class TrackerStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    completed: int = 0
    skipped: int = 0
    drained: int = 0


class LocalityTracker:
    """LRU queue plus object table.

    ``on_flush(obj, owner)`` is called when a pending flush must be carried
    out; ``on_skip(obj, owner)`` when it is abandoned because the object left
    the queue.  Objects are keyed by their address.
    """

    def __init__(self, capacity_blocks: int, on_flush=None, on_skip=None):
        if capacity_blocks <= 0:
            raise UsageError("tracker capacity must be positive")
        self.capacity_blocks = capacity_blocks
        self.occupancy_blocks = 0
        self.entries: OrderedDict[int, TrackedObject] = OrderedDict()
        self.pending_by_owner: dict[int, set] = {}
        self.on_flush = on_flush or (lambda obj, owner: None)
        self.on_skip = on_skip or (lambda obj, owner: None)
        self.stats = TrackerStats()

    def __contains__(self, addr: int) -> bool:
        return addr in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def _clear_pending(self, entry: TrackedObject) -> int:
        owner = entry.owner
        entry.pending = False
        entry.owner = None
        owned = self.pending_by_owner.get(owner)
        if owned is not None:
            owned.discard(entry.obj.addr)
            if not owned:
                del self.pending_by_owner[owner]
        return owner

    def _set_pending(self, entry: TrackedObject, txn: int) -> None:
        entry.pending = True
        entry.owner = txn
        self.pending_by_owner.setdefault(txn, set()).add(entry.obj.addr)

    def record_access(self, obj, is_write: bool, txn: int | None = None) -> AccessDecision:
        if obj is None or not getattr(obj, "live", True):
            raise UsageError("access to an unallocated object")
        decision = AccessDecision()
        entry = self.entries.get(obj.addr)
        if entry is not None:
            self.stats.hits += 1
            if entry.pending:
                owner = self._clear_pending(entry)
                self.stats.completed += 1
                decision.completed_prior_flush = True
                self.on_flush(entry.obj, owner)
            self.entries.move_to_end(obj.addr)
        else:
            self.stats.misses += 1
            entry = TrackedObject(obj, obj.blocks)
            self.entries[obj.addr] = entry
            self.occupancy_blocks += entry.blocks
        if is_write:
            self._set_pending(entry, txn)
            decision.new_pending = True
        self.evict_to_fit()
        return decision

    def _drop(self, entry: TrackedObject) -> None:
        self.occupancy_blocks -= entry.blocks
        if entry.pending:
            owner = self._clear_pending(entry)
            self.stats.skipped += 1
            self.on_skip(entry.obj, owner)

    def evict_to_fit(self) -> list:
        evicted = []
        # the most recent entry is never evicted, even if it alone overflows
        while self.occupancy_blocks > self.capacity_blocks and len(self.entries) > 1:
            _, entry = self.entries.popitem(last=False)
            self.stats.evictions += 1
            evicted.append(entry.obj)
            self._drop(entry)
        return evicted

    def drain(self, txn: int) -> int:
        """Resolve every pending flush owned by ``txn`` by skipping it."""
        addrs = sorted(self.pending_by_owner.get(txn, ()))
        for addr in addrs:
            entry = self.entries.pop(addr)
            self.stats.drained += 1
            self._drop(entry)
        return len(addrs)

    def forget(self, obj, complete: bool = True) -> None:
        """Remove an object (e.g. before it is freed).

        A pending flush is completed when ``complete`` is true, otherwise it
        is simply dropped without notifying anyone.
        """
        entry = self.entries.pop(obj.addr, None)
        if entry is None:
            return
        self.occupancy_blocks -= entry.blocks
        if entry.pending:
            owner = self._clear_pending(entry)
            if complete:
                self.stats.completed += 1
                self.on_flush(entry.obj, owner)

    def pending_owner(self, addr: int) -> int | None:
        entry = self.entries.get(addr)
        return entry.owner if entry is not None and entry.pending else None

    def pending_count(self, txn: int) -> int:
        return len(self.pending_by_owner.get(txn, ()))
