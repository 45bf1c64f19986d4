"""Byte-addressable persistent memory behind a write-back cache.

Stores land in a set-associative cache and only reach the persistent image
when a line is flushed or evicted.  ``crash()`` drops every cached line, so
whatever was not written back is lost.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError, CrashInjected, RangeError
from .policies import canonical_policy, make_policy

BLOCK_SIZE = 64
BLOCK_SHIFT = 6
FULL_MASK = (1 << BLOCK_SIZE) - 1
DEFAULT_CACHE_BYTES = 2 * 1024 * 1024
DEFAULT_WAYS = 11


@dataclass
class CacheConfig:
    sets: int
    ways: int = DEFAULT_WAYS
    block_size: int = BLOCK_SIZE
    policy: str = "lru"
    seed: int = 0

    def __post_init__(self):
        if self.block_size != BLOCK_SIZE:
            raise ConfigError("cache block size is fixed at 64 bytes")
        if self.sets <= 0 or self.ways <= 0:
            raise ConfigError("sets and ways must be positive")
        self.policy = canonical_policy(self.policy)

    @property
    def total_capacity(self) -> int:
        return self.sets * self.ways * self.block_size

    @property
    def capacity_blocks(self) -> int:
        return self.sets * self.ways

    @classmethod
    def from_capacity(cls, capacity: int = DEFAULT_CACHE_BYTES, ways: int = DEFAULT_WAYS,
                      policy: str = "lru", seed: int = 0) -> "CacheConfig":
        sets = capacity // (ways * BLOCK_SIZE)
        if sets <= 0:
            raise ConfigError(f"cache capacity {capacity} too small for {ways} ways")
        return cls(sets=sets, ways=ways, policy=policy, seed=seed)

    @classmethod
    def from_dict(cls, doc: dict) -> "CacheConfig":
        doc = dict(doc)
        if "sets" not in doc:
            return cls.from_capacity(doc.get("capacity", DEFAULT_CACHE_BYTES),
                                     doc.get("ways", DEFAULT_WAYS),
                                     doc.get("policy", "lru"), doc.get("seed", 0))
        doc.pop("capacity", None)
        return cls(**doc)


@dataclass
class FlushCounters:
    flushes_issued: int = 0
    flushes_skipped: int = 0
    barriers_issued: int = 0
    dirty_bytes_flushed: int = 0
    lines_flushed: int = 0
    writebacks_by_eviction: int = 0
    # dirty_hist[k] = number of flushed lines that had k dirty bytes
    dirty_hist: list = field(default_factory=lambda: [0] * (BLOCK_SIZE + 1))

    @property
    def average_dirtiness(self) -> float:
        if not self.lines_flushed:
            return 0.0
        return self.dirty_bytes_flushed / (BLOCK_SIZE * self.lines_flushed)

    def histogram(self, buckets: int = 10) -> list:
        out = [0] * buckets
        for k, n in enumerate(self.dirty_hist):
            if n:
                out[min(k * buckets // BLOCK_SIZE, buckets - 1)] += n
        return out

    def as_dict(self) -> dict:
        d = asdict(self)
        del d["dirty_hist"]
        d["average_dirtiness"] = self.average_dirtiness
        return d


class _Line:
    __slots__ = ("block", "data", "mask", "set", "way")

    def __init__(self, block, data, set_index, way):
        self.block = block
        self.data = data
        self.mask = 0
        self.set = set_index
        self.way = way


class NvmEmulator:
    """Persistent image plus a single write-back cache in front of it.

    Every store, flush and fence is an *event*; ``arm_crash(n)`` makes the
    n-th following event raise :class:`CrashInjected` before it takes effect.
    """

    def __init__(self, capacity: int, cache: CacheConfig | None = None,
                 image: bytes | None = None, trace: bool = False):
        if capacity <= 0:
            raise ConfigError("NVM capacity must be positive")
        if image is not None and len(image) != capacity:
            raise ConfigError("image size does not match capacity")
        self.capacity = capacity
        self.image = bytearray(image) if image is not None else bytearray(capacity)
        self.config = cache or CacheConfig.from_capacity()
        self.counters = FlushCounters()
        self.events = 0
        self._crash_at = None
        self.trace = [] if trace else None
        self._reset_cache()

    @classmethod
    def from_image(cls, image: bytes, cache: CacheConfig | None = None, trace: bool = False):
        return cls(len(image), cache, image=image, trace=trace)

    def _reset_cache(self):
        cfg = self.config
        self._lines = {}
        self._sets = [[None] * cfg.ways for _ in range(cfg.sets)]
        self.policy = make_policy(cfg.policy, cfg.sets, cfg.ways, cfg.seed)

    # -- internals ---------------------------------------------------------

    def _check(self, addr, n):
        if addr < 0 or n < 0 or addr + n > self.capacity:
            raise RangeError(f"span [{addr}, {addr + n}) outside NVM of {self.capacity} bytes")

    def _event(self):
        if self._crash_at is not None and self.events >= self._crash_at:
            self._crash_at = None
            raise CrashInjected(self.events)
        self.events += 1

    def _writeback(self, line):
        base = line.block << BLOCK_SHIFT
        # bytes outside the dirty mask always equal the image, so the whole
        # line can be written back
        self.image[base:base + BLOCK_SIZE] = line.data

    def _line(self, block):
        line = self._lines.get(block)
        if line is not None:
            self.policy.touch(line.set, line.way)
            return line
        s = block % self.config.sets
        ways = self._sets[s]
        if self.trace is not None:
            self.trace.append(("fill", block << BLOCK_SHIFT, BLOCK_SIZE))
        try:
            w = ways.index(None)
        except ValueError:
            w = self.policy.victim(s)
            old = ways[w]
            if old.mask:
                self._writeback(old)
                self.counters.writebacks_by_eviction += 1
                if self.trace is not None:
                    self.trace.append(("wb", old.block << BLOCK_SHIFT, BLOCK_SIZE))
            del self._lines[old.block]
            self.policy.evict(s, w)
        base = block << BLOCK_SHIFT
        line = _Line(block, bytearray(self.image[base:base + BLOCK_SIZE]), s, w)
        ways[w] = line
        self._lines[block] = line
        self.policy.insert(s, w)
        return line

    # -- public operations -------------------------------------------------

    def store(self, addr: int, data) -> None:
        n = len(data)
        self._check(addr, n)
        self._event()
        if self.trace is not None:
            self.trace.append(("store", addr, n))
        pos = 0
        while pos < n:
            off = addr & (BLOCK_SIZE - 1)
            chunk = min(BLOCK_SIZE - off, n - pos)
            line = self._line(addr >> BLOCK_SHIFT)
            line.data[off:off + chunk] = data[pos:pos + chunk]
            line.mask |= ((1 << chunk) - 1) << off
            pos += chunk
            addr += chunk

    def load(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        out = bytearray()
        end = addr + n
        while addr < end:
            off = addr & (BLOCK_SIZE - 1)
            chunk = min(BLOCK_SIZE - off, end - addr)
            line = self._line(addr >> BLOCK_SHIFT)
            out += line.data[off:off + chunk]
            addr += chunk
        return bytes(out)

    def peek(self, addr: int, n: int) -> bytes:
        """Current value without touching cache state (debug / oracle use)."""
        self._check(addr, n)
        out = bytearray(self.image[addr:addr + n])
        first = addr >> BLOCK_SHIFT
        last = (addr + n - 1) >> BLOCK_SHIFT if n else first - 1
        lines = self._lines
        for block in range(first, last + 1):
            line = lines.get(block)
            if line is None:
                continue
            base = block << BLOCK_SHIFT
            lo = max(base, addr)
            hi = min(base + BLOCK_SIZE, addr + n)
            out[lo - addr:hi - addr] = line.data[lo - base:hi - base]
        return bytes(out)

    def durable(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        return bytes(self.image[addr:addr + n])

    def flush_line(self, addr: int) -> None:
        self._check(addr, 1)
        self._event()
        if self.trace is not None:
            self.trace.append(("flush", addr & ~(BLOCK_SIZE - 1), BLOCK_SIZE))
        c = self.counters
        c.flushes_issued += 1
        line = self._lines.get(addr >> BLOCK_SHIFT)
        if line is not None and line.mask:
            self._writeback(line)
            dirty = line.mask.bit_count()
            line.mask = 0
            c.lines_flushed += 1
            c.dirty_bytes_flushed += dirty
            c.dirty_hist[dirty] += 1

    def flush_range(self, addr: int, n: int) -> int:
        """flush_line over every block touched by [addr, addr+n); returns count."""
        if n <= 0:
            return 0
        first = addr >> BLOCK_SHIFT
        last = (addr + n - 1) >> BLOCK_SHIFT
        for block in range(first, last + 1):
            self.flush_line(block << BLOCK_SHIFT)
        return last - first + 1

    def fence(self) -> None:
        self._event()
        if self.trace is not None:
            self.trace.append(("fence", 0, 0))
        self.counters.barriers_issued += 1

    def crash(self) -> bytes:
        """Drop the cache without write-back and return the durable image."""
        self._crash_at = None
        if self.trace is not None:
            self.trace.append(("crash", 0, 0))
        self._lines.clear()
        for ways in self._sets:
            for w in range(len(ways)):
                ways[w] = None
        self.policy.reset()
        return bytes(self.image)

    def arm_crash(self, after_events: int) -> None:
        if after_events < 0:
            raise ConfigError("crash offset must be non-negative")
        self._crash_at = self.events + after_events

    def disarm_crash(self) -> None:
        self._crash_at = None

    def writeback_all(self) -> None:
        for line in self._lines.values():
            if line.mask:
                self._writeback(line)
                line.mask = 0
                self.counters.writebacks_by_eviction += 1

    def set_policy(self, policy: str, seed: int = 0) -> None:
        """Switch eviction policy.  Dirty lines are written back first."""
        policy = canonical_policy(policy)
        self.writeback_all()
        self.config = CacheConfig(sets=self.config.sets, ways=self.config.ways,
                                  policy=policy, seed=seed)
        self._reset_cache()

    def format(self, addr: int, n: int) -> None:
        """Zero a durable range directly and drop any cached copies."""
        self._check(addr, n)
        self.image[addr:addr + n] = bytes(n)
        if n == 0:
            return
        for block in range(addr >> BLOCK_SHIFT, ((addr + n - 1) >> BLOCK_SHIFT) + 1):
            line = self._lines.pop(block, None)
            if line is not None:
                self._sets[line.set][line.way] = None
                self.policy.evict(line.set, line.way)

    # -- introspection -----------------------------------------------------

    def resident(self, addr: int) -> bool:
        return (addr >> BLOCK_SHIFT) in self._lines

    def dirty_mask(self, addr: int) -> int:
        line = self._lines.get(addr >> BLOCK_SHIFT)
        return line.mask if line is not None else 0

    def dirty_blocks(self) -> set:
        return {b << BLOCK_SHIFT for b, line in self._lines.items() if line.mask}

    def set_contents(self, set_index: int) -> list:
        """Block addresses per way of one set (None for invalid ways)."""
        return [None if line is None else line.block << BLOCK_SHIFT
                for line in self._sets[set_index]]

    def set_of(self, addr: int) -> int:
        return (addr >> BLOCK_SHIFT) % self.config.sets

    def dump_trace(self, path) -> None:
        with open(path, "w") as fh:
            for op, addr, n in self.trace or ():
                fh.write(f"{op} {addr} {n}\n")
