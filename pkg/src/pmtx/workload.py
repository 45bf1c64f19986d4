"""Synthetic YCSB-style operation streams."""
from __future__ import annotations

import bisect
import json
import math
import random
from dataclasses import asdict, dataclass, field, replace

from .checksum import DATA_BYTES
from .errors import ConfigError

OPS = ("read", "update", "insert", "rmu", "scan", "delete")
_OP_ALIASES = {"r": "read", "u": "update", "i": "insert", "ru": "rmu", "rmw": "rmu",
               "s": "scan", "d": "delete", "readmodifyupdate": "rmu",
               "read_modify_update": "rmu"}
DISTRIBUTIONS = ("uniform", "zipfian", "latest")


@dataclass
class WorkloadSpec:
    name: str
    op_mix: dict
    object_count: int = 2000
    object_size: int = 64
    distribution: str = "zipfian"
    theta: float = 0.99
    ops_total: int = 10_000
    seed: int = 0
    scan_length: int = 10
    # field-value workloads: every record is a field object plus a value
    # object of ``object_size`` bytes, updated together
    field_size: int = 0
    pair_alloc: bool = False

    def __post_init__(self):
        mix = {}
        for k, v in dict(self.op_mix).items():
            key = _OP_ALIASES.get(str(k).lower(), str(k).lower())
            if key not in OPS:
                raise ConfigError(f"unknown operation {k!r} in op_mix")
            if v < 0:
                raise ConfigError(f"negative percentage for {k!r}")
            mix[key] = mix.get(key, 0) + v
        if not math.isclose(sum(mix.values()), 100.0, abs_tol=1e-9):
            raise ConfigError(f"op_mix of {self.name!r} sums to {sum(mix.values())}, not 100")
        self.op_mix = {k: mix[k] for k in OPS if mix.get(k)}
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown key distribution {self.distribution!r}")
        if self.object_count <= 0 or self.ops_total < 0 or self.scan_length <= 0:
            raise ConfigError("object_count and scan_length must be positive, ops_total >= 0")
        if not 0 < self.object_size <= DATA_BYTES:
            raise ConfigError(f"object_size must be in (0, {DATA_BYTES}]")
        if self.field_size < 0 or self.field_size + (self.object_size if self.field_size else 0) > DATA_BYTES:
            raise ConfigError("field and value do not fit in one page")
        if not 0 < self.theta < 1 and self.distribution != "uniform":
            raise ConfigError("zipfian theta must be in (0, 1)")

    @property
    def insert_reserve(self) -> int:
        """Keys set aside for inserts (they start out empty)."""
        return math.ceil(self.ops_total * self.op_mix.get("insert", 0) / 100) + 1

    @property
    def read_fraction(self) -> float:
        return (self.op_mix.get("read", 0) + self.op_mix.get("scan", 0)) / 100

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown workload fields: {sorted(extra)}")
        if "name" not in doc or "op_mix" not in doc:
            raise ConfigError("workload needs at least name and op_mix")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "WorkloadSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


PRESETS = {
    "ycsb-a": dict(op_mix={"read": 50, "update": 50}),
    "ycsb-b": dict(op_mix={"read": 95, "update": 5}),
    "ycsb-c": dict(op_mix={"read": 100}),
    "ycsb-d": dict(op_mix={"read": 95, "insert": 5}, distribution="latest"),
    "ycsb-e": dict(op_mix={"scan": 95, "insert": 5}),
    "ycsb-f": dict(op_mix={"read": 50, "rmu": 50}),
    "tpcc": dict(op_mix={"read": 8, "update": 47, "insert": 45}, object_size=128),
    "linkbench": dict(op_mix={"read": 64, "update": 16, "insert": 12, "scan": 4, "delete": 4},
                      object_size=512),
    "ycsb-oltp": dict(op_mix={"read": 50, "update": 10, "insert": 5, "rmu": 10, "scan": 15,
                              "delete": 10}),
    "fieldvalue": dict(op_mix={"read": 50, "update": 50}, object_size=80, field_size=40),
    "uniform-write": dict(op_mix={"update": 100}, distribution="uniform"),
}


def preset(name: str, **overrides) -> WorkloadSpec:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown workload preset {name!r}; choose from {sorted(PRESETS)}")
    doc = dict(PRESETS[key])
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return WorkloadSpec(name=key, **doc)


def load_workload(name_or_path: str, **overrides) -> WorkloadSpec:
    if name_or_path.lower() in PRESETS:
        return preset(name_or_path, **overrides)
    try:
        spec = WorkloadSpec.from_file(name_or_path)
    except FileNotFoundError:
        raise ConfigError(f"{name_or_path!r} is neither a preset nor a workload file") from None
    return replace(spec, **{k: v for k, v in overrides.items() if v is not None})


class ZipfianGenerator:
    """Zipfian ranks in [0, n) (rank 0 most popular), Gray et al.'s method."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        self.n = n
        self.theta = theta
        self.rng = rng
        self.zeta2 = 1 + 0.5 ** theta
        self.alpha = 1 / (1 - theta)
        self._zetan = 0.0
        self._counted = 0
        self._grow(n)

    def _grow(self, n: int) -> None:
        # incremental zeta so a growing key space stays cheap
        self._zetan += sum(i ** -self.theta for i in range(self._counted + 1, n + 1))
        self._counted = n
        self.n = n
        self.eta = (1 - (2 / n) ** (1 - self.theta)) / (1 - self.zeta2 / self._zetan) if n > 1 else 0.0

    def next(self, n: int | None = None) -> int:
        if n is not None and n > self._counted:
            self._grow(n)
        n = self.n
        if n == 1:
            return 0
        u = self.rng.random()
        uz = u * self._zetan
        if uz < 1:
            return 0
        if uz < self.zeta2:
            return 1
        return min(int(n * (self.eta * u - self.eta + 1) ** self.alpha), n - 1)


def _scramble(rank: int, n: int) -> int:
    # FNV-1a over the rank so hot keys are spread over the key space
    h = 0xCBF29CE484222325
    for _ in range(8):
        h ^= rank & 0xFF
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        rank >>= 8
    return h % n


@dataclass
class Operation:
    op: str
    key: int
    count: int = 1


@dataclass
class OperationStream:
    spec: WorkloadSpec
    rng: random.Random = field(init=False)

    def __post_init__(self):
        self.rng = random.Random(self.spec.seed)
        self.zipf = ZipfianGenerator(self.spec.object_count, self.spec.theta, self.rng) \
            if self.spec.distribution != "uniform" else None
        ops, weights = zip(*self.spec.op_mix.items())
        self._ops = ops
        self._cum = []
        acc = 0.0
        for w in weights:
            acc += w
            self._cum.append(acc)
        self.live_keys = self.spec.object_count

    def _pick_op(self) -> str:
        i = bisect.bisect_right(self._cum, self.rng.random() * self._cum[-1])
        return self._ops[min(i, len(self._ops) - 1)]

    def _pick_key(self) -> int:
        n = self.live_keys
        dist = self.spec.distribution
        if dist == "uniform":
            return self.rng.randrange(n)
        if dist == "latest":
            return n - 1 - self.zipf.next(n)
        return _scramble(self.zipf.next(n), n)

    def __iter__(self):
        limit = self.spec.object_count + self.spec.insert_reserve
        for _ in range(self.spec.ops_total):
            op = self._pick_op()
            if op == "insert":
                if self.live_keys >= limit:
                    op = "update"
                else:
                    key = self.live_keys
                    self.live_keys += 1
                    yield Operation("insert", key)
                    continue
            key = self._pick_key()
            if op == "scan":
                yield Operation("scan", key, min(self.spec.scan_length, self.live_keys - key))
            else:
                yield Operation(op, key)


def generate(spec: WorkloadSpec) -> list:
    return list(OperationStream(spec))
