"""Post-crash processing of a durable image.

Recovery works on an emulator built from a crash snapshot:

1. scan the log pool for intact records and classify transactions by the
   commit markers that made it to media;
2. replay the checksum writes carried in physical-commit markers;
3. cancel every transaction that did not physically commit (undo records or
   logical-commit before-images restore the old values), or optionally roll
   logically committed redo transactions forward;
4. verify and correct every checksum-protected data page;
5. clear the log and rebuild allocator cursors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import logrec
from .allocator import PoolSet
from .checksum import (BLOCK, PAGE_SIZE, TAIL_OFFSET, PROTECT_TAG, block_addr, cons_addr,
                       corr_addr, correct, page_base, update_object_checksums, verify)
from .errors import RecoveryError
from .logrec import RecordKind


@dataclass
class TxnRecords:
    txn: int
    mode: str
    data: list = field(default_factory=list)       # undo/redo records
    lcommit: list = field(default_factory=list)
    pcommit: list = field(default_factory=list)

    @staticmethod
    def _complete(parts) -> bool:
        if not parts:
            return False
        n = parts[0].part[1]
        return n > 0 and {p.part[0] for p in parts} == set(range(n)) and \
            all(p.part[1] == n for p in parts)

    @property
    def physical(self) -> bool:
        # a partial physical marker with the logical marker gone means the
        # crash hit log reclamation, which only starts after physical commit
        return self._complete(self.pcommit) or (bool(self.pcommit) and not self.lcommit)

    @property
    def logical(self) -> bool:
        return self._complete(self.lcommit)

    @property
    def first_seq(self) -> int:
        return min(r.seq for r in self.data + self.lcommit + self.pcommit)

    def commit_seq(self) -> int:
        return min(r.seq for r in self.lcommit)


@dataclass
class Classification:
    physical: list = field(default_factory=list)
    logical_only: list = field(default_factory=list)
    active: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"physical": self.physical, "logical_only": self.logical_only, "active": self.active}


@dataclass
class RecoveryReport:
    inconsistent_objects: int | None = None   # filled in by the harness
    detected: int = 0
    uncorrected: int = 0
    corrected: int = 0
    rolled_back_txns: list = field(default_factory=list)
    committed_txns: list = field(default_factory=list)
    physical_txns: list = field(default_factory=list)
    rolled_forward_txns: list = field(default_factory=list)
    repaired_blocks: list = field(default_factory=list)
    uncorrectable_blocks: list = field(default_factory=list)
    checksums_rewritten: int = 0
    pages: dict = field(default_factory=dict)
    records_scanned: int = 0
    changed: bool = False
    pools: object = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "I_obj": self.inconsistent_objects or 0,
            "DI_obj": self.detected,
            "CC_obj": self.uncorrected,
            "corrected": self.corrected,
            "rolled_back": list(self.rolled_back_txns),
            "committed": list(self.committed_txns),
            "pages": {str(k): v for k, v in sorted(self.pages.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def scan_log(emu, pools: PoolSet | None = None) -> list:
    """Every intact record in the log pool, in address order."""
    pools = pools or PoolSet.from_superblock(emu)
    out = []
    for psa in pools.log.pages():
        page = emu.durable(psa, PAGE_SIZE)
        if not any(page):
            continue
        out.extend(logrec.scan_region(page, psa, logrec.MAX_RECORD))
    return out


def group_records(records) -> dict:
    txns: dict[int, TxnRecords] = {}
    for rec in records:
        t = txns.get(rec.txn)
        if t is None:
            t = txns[rec.txn] = TxnRecords(rec.txn, rec.mode)
        elif t.mode != rec.mode:
            raise RecoveryError(f"txn {rec.txn} has records in both undo and redo mode")
        if rec.kind in (RecordKind.UNDO, RecordKind.REDO):
            expected = RecordKind.UNDO if rec.mode == "undo" else RecordKind.REDO
            if rec.kind != expected:
                raise RecoveryError(f"{rec.kind.name} record in a {rec.mode} txn {rec.txn}")
            t.data.append(rec)
        elif rec.kind == RecordKind.LCOMMIT:
            t.lcommit.append(rec)
        else:
            t.pcommit.append(rec)
    for t in txns.values():
        for parts in (t.lcommit, t.pcommit):
            if parts and any(p.part[1] == 0 or p.part[0] >= p.part[1] for p in parts):
                raise RecoveryError(f"txn {t.txn} has a commit marker with bad part numbering")
    return txns


def classify_txns(emu, pools: PoolSet | None = None) -> Classification:
    return _classify(group_records(scan_log(emu, pools)))


def _classify(txns: dict) -> Classification:
    c = Classification()
    for tid in sorted(txns):
        t = txns[tid]
        if t.physical:
            c.physical.append(tid)
        elif t.logical:
            c.logical_only.append(tid)
        else:
            c.active.append(tid)
    return c


def _is_protected(emu, psa: int) -> bool:
    return emu.durable(psa + TAIL_OFFSET, BLOCK) == PROTECT_TAG


def _write(emu, addr: int, data: bytes) -> None:
    emu.store(addr, data)
    emu.flush_range(addr, len(data))


def _roll_forward(emu, t: TxnRecords) -> None:
    befores = {}
    for part in sorted(t.lcommit, key=lambda r: r.part[0]):
        for addr, chunk in logrec.unpack_images(part.payload):
            befores[addr] = chunk
    news = {}
    for rec in sorted(t.data, key=lambda r: r.seq):
        news[rec.aux] = rec.payload
    # rebuild full before-images (they may have been split across parts)
    before_by_obj = {}
    for addr in news:
        size = len(news[addr])
        buf = bytearray(size)
        for a, chunk in befores.items():
            if addr <= a < addr + size:
                buf[a - addr:a - addr + len(chunk)] = chunk
        before_by_obj[addr] = bytes(buf)
    for addr, new in news.items():
        if _is_protected(emu, page_base(addr)):
            update_object_checksums(emu, addr, before_by_obj[addr], new)
        _write(emu, addr, new)


def _cancel(emu, txns) -> bool:
    """Restore old values, newest first; returns True if anything was written."""
    restores = []
    for t in txns:
        if t.mode == "undo":
            restores.extend((r.seq, [(r.aux, r.payload)]) for r in t.data)
        elif t.logical:
            # redo updates reach objects only after the logical marker, which
            # carries their before-images
            for part in t.lcommit:
                restores.append((part.seq, logrec.unpack_images(part.payload)))
    for _seq, images in sorted(restores, key=lambda x: x[0], reverse=True):
        for addr, data in images:
            _write(emu, addr, data)
    return bool(restores)


def recover(emu, roll_forward_redo: bool = False) -> RecoveryReport:
    """Bring the durable image of ``emu`` back to a transaction-consistent
    state.  ``emu`` should be freshly built from a crash snapshot."""
    pools = PoolSet.from_superblock(emu)
    records = scan_log(emu, pools)
    txns = group_records(records)
    cls = _classify(txns)
    report = RecoveryReport(records_scanned=len(records))
    report.physical_txns = list(cls.physical)

    # 1. checksum writes of physically committed txns, oldest first
    meta = []
    for tid in cls.physical:
        for rec in txns[tid].pcommit:
            meta.extend((rec.seq, a, d) for a, d in logrec.unpack_meta(rec.payload))
    for _seq, addr, data in sorted(meta, key=lambda m: m[0]):
        if emu.durable(addr, BLOCK) != data:
            report.changed = True
        _write(emu, addr, data)

    # 2. cancel or roll forward the rest
    unfinished = [txns[t] for t in cls.logical_only + cls.active]
    forward = [t for t in unfinished if roll_forward_redo and t.mode == "redo" and t.logical]
    forward_ids = {t.txn for t in forward}
    backward = [t for t in unfinished if t.txn not in forward_ids]
    if _cancel(emu, backward):
        report.changed = True
    report.rolled_back_txns = [t.txn for t in backward]
    for t in sorted(forward, key=lambda t: t.commit_seq()):
        _roll_forward(emu, t)
        report.changed = True
        report.rolled_forward_txns.append(t.txn)
    report.rolled_back_txns.sort()
    report.committed_txns = sorted(cls.physical + report.rolled_forward_txns)

    # 3. verify and correct protected pages
    for pool in pools.data_pools():
        for psa in pool.pages():
            if not _is_protected(emu, psa):
                continue
            page = bytearray(emu.durable(psa, PAGE_SIZE))
            vr = verify(page)
            if vr.clean:
                continue
            cr = correct(page)
            for r, c in cr.repaired:
                a = block_addr(psa, r, c)
                _write(emu, a, bytes(page[a - psa:a - psa + BLOCK]))
                report.repaired_blocks.append(a)
            for kind, i in cr.checksums_rewritten:
                a = cons_addr(psa, i) if kind == "cons" else corr_addr(psa, i)
                _write(emu, a, bytes(page[a - psa:a - psa + BLOCK]))
            bad = sorted(block_addr(psa, r, c) for r, c in cr.uncorrectable)
            report.uncorrectable_blocks.extend(bad)
            report.corrected += len(cr.repaired)
            report.checksums_rewritten += len(cr.checksums_rewritten)
            report.pages[psa] = {
                "bad_columns": sorted(vr.bad_columns),
                "bad_rows": sorted(vr.bad_rows),
                "corrected": len(cr.repaired),
                "uncorrectable": len(bad),
            }
            report.changed = True
    report.detected = len(report.repaired_blocks) + len(report.uncorrectable_blocks)
    report.uncorrected = len(report.uncorrectable_blocks)

    # 4. clear the log
    for rec in records:
        _write(emu, rec.addr, bytes(rec.length))
    if records:
        report.changed = True
    emu.fence()
    report.pools = pools
    return report
