"""Victim-selection policies for one set-associative cache.

Every policy keeps per-set state indexed by way number.  The cache calls
``insert`` after filling a way, ``touch`` on a hit, ``evict`` before reusing a
way and ``victim`` to pick one when the set is full.
"""
from __future__ import annotations

import random

from .errors import ConfigError

POLICY_NAMES = ("lru", "plru", "bip", "random")
_ALIASES = {
    "lru": "lru",
    "plru": "plru",
    "pseudolru": "plru",
    "pseudo-lru": "plru",
    "bip": "bip",
    "bimodal": "bip",
    "bimodalinsertion": "bip",
    "random": "random",
}

BIP_MRU_NUMERATOR = 1
BIP_MRU_DENOMINATOR = 32


def canonical_policy(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower().replace("_", "")]
    except KeyError:
        raise ConfigError(f"unknown cache policy {name!r}; expected one of {POLICY_NAMES}") from None


class LRUPolicy:
    name = "lru"

    def __init__(self, sets: int, ways: int, rng: random.Random):
        self.ways = ways
        # per set: way numbers ordered LRU first, MRU last
        self.order = [[] for _ in range(sets)]

    def touch(self, s, w):
        order = self.order[s]
        if order[-1] != w:
            order.remove(w)
            order.append(w)

    def insert(self, s, w):
        self.order[s].append(w)

    def evict(self, s, w):
        self.order[s].remove(w)

    def victim(self, s):
        return self.order[s][0]

    def reset(self):
        for order in self.order:
            order.clear()


class BimodalInsertionPolicy(LRUPolicy):
    """LRU recency stack, but most fills land in the LRU slot."""

    name = "bip"

    def __init__(self, sets, ways, rng):
        super().__init__(sets, ways, rng)
        self.rng = rng
        self.mru_inserts = 0
        self.lru_inserts = 0

    def insert(self, s, w):
        if self.rng.randrange(BIP_MRU_DENOMINATOR) < BIP_MRU_NUMERATOR:
            self.order[s].append(w)
            self.mru_inserts += 1
        else:
            self.order[s].insert(0, w)
            self.lru_inserts += 1


class RandomPolicy:
    name = "random"

    def __init__(self, sets, ways, rng):
        self.ways = ways
        self.rng = rng

    def touch(self, s, w):
        pass

    def insert(self, s, w):
        pass

    def evict(self, s, w):
        pass

    def victim(self, s):
        return self.rng.randrange(self.ways)

    def reset(self):
        pass


class TreePLRUPolicy:
    """Binary-tree pseudo-LRU.

    Works for any associativity: the way range is split in halves
    recursively (left half gets the extra way when odd), giving ``ways - 1``
    internal nodes.  A node bit of 0 means "next victim is on the left".
    """

    name = "plru"

    def __init__(self, sets, ways, rng):
        self.ways = ways
        self._left = []   # child index per node, or -(way+1) for a leaf
        self._right = []
        self._paths = [[] for _ in range(ways)]
        if ways > 1:
            self._build(0, ways)
        self.bits = [[0] * max(ways - 1, 0) for _ in range(sets)]

    def _build(self, lo, hi):
        node = len(self._left)
        self._left.append(None)
        self._right.append(None)
        mid = (lo + hi + 1) // 2
        for w in range(lo, mid):
            self._paths[w].append((node, 1))  # touched left -> victim right
        for w in range(mid, hi):
            self._paths[w].append((node, 0))
        self._left[node] = self._build(lo, mid) if mid - lo > 1 else -(lo + 1)
        self._right[node] = self._build(mid, hi) if hi - mid > 1 else -(mid + 1)
        return node

    def touch(self, s, w):
        bits = self.bits[s]
        for node, value in self._paths[w]:
            bits[node] = value

    insert = touch

    def evict(self, s, w):
        pass

    def victim(self, s):
        if self.ways == 1:
            return 0
        bits = self.bits[s]
        node = 0
        while True:
            nxt = self._right[node] if bits[node] else self._left[node]
            if nxt < 0:
                return -nxt - 1
            node = nxt

    def reset(self):
        for bits in self.bits:
            for i in range(len(bits)):
                bits[i] = 0


_CLASSES = {
    "lru": LRUPolicy,
    "plru": TreePLRUPolicy,
    "bip": BimodalInsertionPolicy,
    "random": RandomPolicy,
}


def make_policy(name: str, sets: int, ways: int, seed: int):
    cls = _CLASSES[canonical_policy(name)]
    return cls(sets, ways, random.Random(seed))
