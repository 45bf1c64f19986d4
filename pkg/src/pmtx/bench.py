"""Workload runs, crash campaigns and the checksum micro-benchmark."""
from __future__ import annotations

import csv
import io
import json
import random
import time
from dataclasses import asdict, dataclass, field

from .allocator import PoolKind, init_pools, pool_bytes_for
from .checksum import (BLOCK, COLUMN_BYTES, DATA_BYTES, DATA_ROWS, PAGE_SIZE, block_position,
                       cons_addr, corr_addr, compute_checksums, lane_bytes,
                       update_object_checksums, verify_page)
from .emulator import CacheConfig, FlushCounters, NvmEmulator
from .errors import ConfigError, CrashInjected
from .recovery import recover
from .runtime import Mode, Runtime, TxnState
from .workload import OperationStream, WorkloadSpec

POLICIES = ("lru", "plru", "bip", "random")

# documented CSV schema (one row per run or crash run)
CSV_COLUMNS = [
    "kind", "workload", "mode", "archapt", "policy", "seed", "ops",
    "flushes_issued", "flushes_skipped", "barriers_issued", "lines_flushed",
    "dirty_bytes_flushed", "writebacks_by_eviction", "average_dirtiness",
    "object_flushes", "skipped_fraction", "crash_op",
    "I_obj", "DI_obj", "CC_obj", "corrected", "violations",
]


@dataclass
class SystemConfig:
    """Machine knobs that are not part of the workload."""
    cache_bytes: int = 2 * 1024 * 1024
    cache_sets: int | None = None      # overrides cache_bytes
    ways: int = 11
    tracker_blocks: int | None = None  # defaults to the cache size in blocks
    log_pool_bytes: int | None = None
    roll_forward_redo: bool = False

    def cache(self, policy: str, seed: int) -> CacheConfig:
        if self.cache_sets:
            return CacheConfig(sets=self.cache_sets, ways=self.ways, policy=policy, seed=seed)
        return CacheConfig.from_capacity(self.cache_bytes, self.ways, policy, seed)


class Store:
    """Key-value records laid out in the pools, plus the reference history."""

    def __init__(self, rt: Runtime, spec: WorkloadSpec, seed: int):
        self.rt = rt
        self.spec = spec
        self.rng = random.Random(f"values:{seed}")
        nkeys = spec.object_count + spec.insert_reserve
        self.records = [self._alloc() for _ in range(nkeys)]
        self.initial = {}
        for key, rec in enumerate(self.records):
            for obj in rec:
                value = self.rng.randbytes(obj.size) if key < spec.object_count else bytes(obj.size)
                self.initial[obj.addr] = value
                if key < spec.object_count:
                    rt.populate(obj, value, fence=False)
        rt.sync()
        self.objects = [obj for rec in self.records for obj in rec]
        self.history: list[tuple[int, dict]] = []

    def _alloc(self):
        spec, rt = self.spec, self.rt
        if spec.field_size:
            if spec.pair_alloc:
                return rt.malloc_pair(spec.field_size, spec.object_size)
            return (rt.malloc(spec.field_size, PoolKind.FIELD_VALUE),
                    rt.malloc(spec.object_size, PoolKind.FIELD_VALUE))
        return (rt.malloc(spec.object_size, PoolKind.KEY),)

    def _write(self, txn, writes, obj, value):
        writes[obj.addr] = value
        self.rt.tx_write(txn, obj, value)

    def execute(self, op) -> None:
        rt = self.rt
        txn = rt.tx_start()
        writes: dict = {}
        self.history.append((txn.id, writes))
        rec = self.records[op.key]
        kind = op.op
        if kind == "read":
            for obj in rec:
                rt.tx_read(txn, obj)
        elif kind == "scan":
            for k in range(op.key, op.key + op.count):
                for obj in self.records[k]:
                    rt.tx_read(txn, obj)
        elif kind == "delete":
            for obj in rec:
                self._write(txn, writes, obj, bytes(obj.size))
        else:
            if kind == "rmu":
                for obj in rec:
                    rt.tx_read(txn, obj)
            for obj in rec:
                self._write(txn, writes, obj, self.rng.randbytes(obj.size))
        rt.tx_lcommit(txn)
        if not writes:
            self.history.pop()

    def expected(self, committed: set) -> dict:
        state = dict(self.initial)
        for tid, writes in self.history:
            if tid in committed:
                state.update(writes)
        return state


def build(spec: WorkloadSpec, mode: str, archapt: bool, policy: str, seed: int,
          system: SystemConfig | None = None) -> tuple[Runtime, Store]:
    system = system or SystemConfig()
    cache = system.cache(policy, seed)
    nkeys = spec.object_count + spec.insert_reserve
    if spec.field_size:
        per = spec.field_size + spec.object_size if spec.pair_alloc else None
        fv = pool_bytes_for(nkeys, per) if per else \
            pool_bytes_for(nkeys, spec.field_size) + pool_bytes_for(nkeys, spec.object_size)
        key = PAGE_SIZE
    else:
        key = pool_bytes_for(nkeys, spec.object_size)
        fv = PAGE_SIZE
    log = system.log_pool_bytes or _log_pool_bytes(spec, system.tracker_blocks or cache.capacity_blocks)
    nvm = PAGE_SIZE + key + fv + log
    emu = NvmEmulator(nvm, cache)
    pools = init_pools(emu, key, fv, log)
    rt = Runtime(emu, pools, mode=mode, archapt=archapt,
                 tracker_capacity_blocks=system.tracker_blocks)
    store = Store(rt, spec, seed)
    # measure the workload, not the initial load
    emu.counters = FlushCounters()
    rt.flushes.clear()
    rt.barriers.clear()
    return rt, store


def _log_pool_bytes(spec: WorkloadSpec, tracker_blocks: int) -> int:
    # transactions waiting for physical commit keep their log records; the
    # window is bounded by how many written objects the tracker can hold
    obj_blocks = -(-(spec.object_size + spec.field_size) // BLOCK)
    per_txn = obj_blocks + 4   # data record, both markers, slack
    waiting = tracker_blocks // obj_blocks + 64
    pages = max(64, -(-waiting * per_txn * BLOCK * 3 // 2 // DATA_BYTES))
    return pages * PAGE_SIZE


# -- plain runs ----------------------------------------------------------------

@dataclass
class RunResult:
    workload: str
    mode: str
    archapt: bool
    policy: str
    seed: int
    ops: int
    counters: dict
    histogram: list
    txn_counts: dict
    flushes_by_kind: dict
    barriers_by_kind: dict
    object_flushes: int
    skipped_fraction: float
    ops_per_sec: float | None = None
    recovery: dict | None = None
    kind: str = "run"

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["ops_per_sec"] is None:
            del d["ops_per_sec"]
        if d["recovery"] is None:
            del d["recovery"]
        return d

    def row(self) -> dict:
        row = dict(kind=self.kind, workload=self.workload, mode=self.mode, archapt=self.archapt,
                   policy=self.policy, seed=self.seed, ops=self.ops,
                   object_flushes=self.object_flushes, skipped_fraction=self.skipped_fraction)
        row.update({k: self.counters[k] for k in CSV_COLUMNS if k in self.counters})
        return row


def run(spec: WorkloadSpec, mode: str = "undo", archapt: bool = True, policy: str = "lru",
        seed: int = 0, system: SystemConfig | None = None, timing: bool = False) -> RunResult:
    """Execute the whole workload, drain pending flushes and report counters."""
    Mode.parse(mode)
    rt, store = build(spec, mode, archapt, policy, seed, system)
    start = time.perf_counter()
    n = 0
    for op in OperationStream(spec):
        store.execute(op)
        n += 1
    rt.drain_all()
    elapsed = time.perf_counter() - start
    c = rt.emu.counters
    obj = rt.flushes["object"]
    denom = c.flushes_skipped + obj
    return RunResult(
        workload=spec.name, mode=rt.mode.value, archapt=archapt, policy=rt.emu.config.policy,
        seed=seed, ops=n, counters=c.as_dict(), histogram=c.histogram(10),
        txn_counts=rt.txn_counts(), flushes_by_kind=dict(sorted(rt.flushes.items())),
        barriers_by_kind=dict(sorted(rt.barriers.items())), object_flushes=obj,
        skipped_fraction=c.flushes_skipped / denom if denom else 0.0,
        ops_per_sec=(n / elapsed if elapsed > 0 else None) if timing else None,
    )


# -- crash campaigns -----------------------------------------------------------

@dataclass
class CrashRun:
    workload: str
    mode: str
    policy: str
    seed: int
    crash_op: int
    crash_offset: int
    crashed: bool
    I_obj: int
    DI_obj: int
    CC_obj: int
    corrected: int
    violations: int
    committed: int
    rolled_back: int
    blocks_repaired: int
    blocks_uncorrectable: int
    violation_details: list = field(default_factory=list)
    kind: str = "crash"

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS if hasattr(self, k)}


def crash_run(spec: WorkloadSpec, mode: str, policy: str, seed: int, crash_op: int,
              crash_offset: int, system: SystemConfig | None = None) -> CrashRun:
    """Run until a crash fires at ``crash_op`` (+``crash_offset`` memory
    events), recover and compare against the reference history."""
    system = system or SystemConfig()
    rt, store = build(spec, mode, True, policy, seed, system)
    emu = rt.emu
    crashed = False
    try:
        for i, op in enumerate(OperationStream(spec)):
            if i == crash_op:
                emu.arm_crash(crash_offset)
            store.execute(op)
    except CrashInjected:
        crashed = True
    snapshot = emu.crash()
    rec_emu = NvmEmulator.from_image(snapshot, CacheConfig(sets=emu.config.sets, ways=emu.config.ways))
    report = recover(rec_emu, roll_forward_redo=system.roll_forward_redo)
    return evaluate(rt, store, snapshot, rec_emu, report, crash_op=crash_op,
                    crash_offset=crash_offset, crashed=crashed, seed=seed)


def evaluate(rt: Runtime, store: Store, snapshot: bytes, rec_emu, report, **meta) -> CrashRun:
    """Ground truth comparison of one crash.

    Committed = transactions physically committed before the crash plus
    whatever recovery reports committed.  An object is inconsistent (I) when
    no unfinished transaction wrote it and its crash-time bytes differ from
    the committed value; detected (DI) when recovery repaired or flagged one
    of its blocks; uncorrected (CC) when it is still wrong afterwards.
    """
    states = {tid: t.state for tid, t in rt.txns.items()}
    physical = {tid for tid, s in states.items() if s is TxnState.PHYSICAL}
    committed = physical | set(report.committed_txns)
    problems = []
    for tid in report.rolled_back_txns:
        if states.get(tid) is TxnState.PHYSICAL:
            problems.append(f"txn {tid} was physically committed but rolled back")
    for tid in report.committed_txns:
        if states.get(tid) not in (TxnState.PHYSICAL, TxnState.LOGICAL):
            problems.append(f"txn {tid} reported committed but never logically committed")
    in_flux = set()
    for tid, writes in store.history:
        if tid not in physical:
            in_flux.update(writes)
    expected = store.expected(committed)
    flagged = set(report.repaired_blocks) | set(report.uncorrectable_blocks)
    i_obj = di_obj = cc_obj = 0
    for obj in store.objects:
        want = expected[obj.addr]
        final = rec_emu.durable(obj.addr, obj.size)
        if obj.addr not in in_flux and snapshot[obj.addr:obj.addr + obj.size] != want:
            i_obj += 1
            if any(b in flagged for b in obj.block_addrs()):
                di_obj += 1
            if final != want:
                cc_obj += 1
            continue
        if final != want:
            problems.append(f"object {obj.addr:#x} differs from the committed value")
    report.inconsistent_objects = i_obj
    spec = store.spec
    return CrashRun(
        workload=spec.name, mode=rt.mode.value, policy=rt.emu.config.policy,
        I_obj=i_obj, DI_obj=di_obj, CC_obj=cc_obj, corrected=di_obj - cc_obj,
        violations=len(problems), committed=len(committed), rolled_back=len(report.rolled_back_txns),
        blocks_repaired=len(report.repaired_blocks),
        blocks_uncorrectable=len(report.uncorrectable_blocks),
        violation_details=problems[:10], **meta,
    )


@dataclass
class CrashSummary:
    workload: str
    mode: str
    policy: str
    runs: list
    kind: str = "crashtest"

    @property
    def totals(self) -> dict:
        keys = ("I_obj", "DI_obj", "CC_obj", "corrected", "violations")
        return {k: sum(getattr(r, k) for r in self.runs) for k in keys}

    @property
    def ok(self) -> bool:
        t = self.totals
        return t["violations"] == 0 and t["CC_obj"] == 0 and t["DI_obj"] == t["I_obj"]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "workload": self.workload, "mode": self.mode,
                "policy": self.policy, "crashes": len(self.runs), "totals": self.totals,
                "ok": self.ok, "runs": [r.to_dict() for r in self.runs]}


def crash_points(spec: WorkloadSpec, n_crashes: int, seed: int) -> list:
    rng = random.Random(f"crash:{spec.name}:{seed}")
    return [(rng.randrange(max(spec.ops_total, 1)), rng.randrange(32)) for _ in range(n_crashes)]


def crashtest(spec: WorkloadSpec, mode: str = "undo", policy: str = "lru", n_crashes: int = 20,
              seed: int = 0, system: SystemConfig | None = None) -> CrashSummary:
    """``n_crashes`` independent runs, each crashed at a uniformly random op."""
    if n_crashes < 0:
        raise ConfigError("number of crashes must be non-negative")
    system = system or SystemConfig()
    runs = []
    for i, (op, offset) in enumerate(crash_points(spec, n_crashes, seed)):
        run_spec = WorkloadSpec(**{**spec.to_dict(), "seed": spec.seed + i})
        runs.append(crash_run(run_spec, mode, policy, seed + i, op, offset, system))
    return CrashSummary(spec.name, Mode.parse(mode).value, runs[0].policy if runs else policy, runs)


# -- checksum micro-benchmark ------------------------------------------------

@dataclass
class MicrobenchResult:
    object_size: int
    count: int
    seed: int
    flush_objects: int
    create_checksums: int
    update_checksums: int
    identical_update: int
    full_page_checksum_blocks: int
    full_page_object_blocks: int
    seconds: dict | None = None
    kind: str = "microbench"

    @property
    def create_saving(self) -> float:
        return 1 - self.create_checksums / self.flush_objects if self.flush_objects else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["create_saving"] = self.create_saving
        d["full_page_ratio"] = self.full_page_checksum_blocks / self.full_page_object_blocks
        if d["seconds"] is None:
            del d["seconds"]
        return d

    def row(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "ops": self.count}


def _covering_checksums(obj) -> set:
    out = set()
    for b in obj.block_addrs():
        psa = b - b % PAGE_SIZE
        r, c = block_position(b)
        out.add(cons_addr(psa, c))
        out.add(corr_addr(psa, r))
    return out


def full_page_costs() -> tuple[int, int]:
    """(checksum blocks, object blocks) to persist one fully packed page."""
    emu = NvmEmulator(2 * PAGE_SIZE, CacheConfig(sets=64, ways=4))
    rng = random.Random(0)
    emu.store(0, rng.randbytes(DATA_BYTES))
    object_blocks = emu.flush_range(0, DATA_BYTES)
    emu.store(PAGE_SIZE, rng.randbytes(DATA_BYTES))
    cons, corr = compute_checksums(emu.load(PAGE_SIZE, PAGE_SIZE))
    written = 0
    for c in range(len(cons)):
        emu.store(cons_addr(PAGE_SIZE, c), lane_bytes(cons[c]))
        emu.flush_line(cons_addr(PAGE_SIZE, c))
        written += 1
    for r in range(DATA_ROWS):
        emu.store(corr_addr(PAGE_SIZE, r), lane_bytes(corr[r]))
        emu.flush_line(corr_addr(PAGE_SIZE, r))
        written += 1
    if not verify_page(emu, PAGE_SIZE).clean:
        raise AssertionError("freshly built checksums do not verify")
    return written, object_blocks


def microbench_checksum(object_size: int, count: int = 1000, seed: int = 0,
                        timing: bool = False) -> MicrobenchResult:
    """Blocks flushed to persist ``count`` random objects by flushing them,
    by creating their checksums, and by updating their checksums."""
    if not 0 < object_size <= DATA_BYTES or count <= 0:
        raise ConfigError("object size must be in (0, 3136] and count positive")
    rng = random.Random(seed)
    pool_bytes = pool_bytes_for(count, object_size)
    emu = NvmEmulator(PAGE_SIZE + pool_bytes + 2 * PAGE_SIZE, CacheConfig(sets=64, ways=11))
    pools = init_pools(emu, pool_bytes, PAGE_SIZE, PAGE_SIZE)
    objs = [pools.key.pmalloc(object_size) for _ in range(count)]
    order = list(range(count))
    rng.shuffle(order)
    secs = {}

    t0 = time.perf_counter()
    flush_objects = 0
    for i in order:
        o = objs[i]
        emu.store(o.addr, rng.randbytes(o.size))
        flush_objects += emu.flush_range(o.addr, o.size)
    secs["flush_objects"] = time.perf_counter() - t0

    # create: every checksum block covering the object is written once
    t0 = time.perf_counter()
    create = 0
    pages = {}
    for i in order:
        o = objs[i]
        psa = o.addr - o.addr % PAGE_SIZE
        if psa not in pages:
            pages[psa] = compute_checksums(emu.load(psa, PAGE_SIZE))
        cons, corr = pages[psa]
        for a in sorted(_covering_checksums(o)):
            k = (a - psa - DATA_BYTES) // BLOCK
            emu.store(a, lane_bytes(cons[k] if k < len(cons) else corr[k - len(cons)]))
            emu.flush_line(a)
            create += 1
    secs["create_checksums"] = time.perf_counter() - t0
    for psa in pages:
        if not verify_page(emu, psa).clean:
            raise AssertionError("checksum creation left a page inconsistent")

    t0 = time.perf_counter()
    update = 0
    for i in order:
        o = objs[i]
        old = emu.load(o.addr, o.size)
        new = rng.randbytes(o.size)
        update += update_object_checksums(emu, o.addr, old, new)
        emu.store(o.addr, new)
    secs["update_checksums"] = time.perf_counter() - t0
    for psa in pages:
        if not verify_page(emu, psa).clean:
            raise AssertionError("checksum update left a page inconsistent")

    same = objs[0]
    cur = emu.load(same.addr, same.size)
    identical = update_object_checksums(emu, same.addr, cur, cur)
    full_ck, full_obj = full_page_costs()
    return MicrobenchResult(object_size, count, seed, flush_objects, create, update, identical,
                            full_ck, full_obj, secs if timing else None)


# -- reporting -----------------------------------------------------------------

def _as_dict(result) -> dict:
    return result if isinstance(result, dict) else result.to_dict()


def _rows(result) -> list:
    if isinstance(result, dict):
        if result.get("kind") == "crashtest":
            return [r for r in result.get("runs", [])]
        return [result]
    if isinstance(result, CrashSummary):
        return [r.row() for r in result.runs]
    if hasattr(result, "row"):
        return [result.row()]
    return [result]


def _flat_row(row: dict) -> dict:
    flat = dict(row)
    counters = flat.pop("counters", None)
    if isinstance(counters, dict):
        flat.update(counters)
    return {k: flat.get(k, "") for k in CSV_COLUMNS}


def report(results, fmt: str = "json", out=None) -> str:
    """Serialize results deterministically; write to ``out`` if given."""
    results = list(results)
    if fmt == "json":
        text = json.dumps([_as_dict(r) for r in results], sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            for row in _rows(r):
                w.writerow(_flat_row(row))
        text = buf.getvalue()
    else:
        raise ConfigError(f"unknown report format {fmt!r} (expected json or csv)")
    if out is not None:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    return text
