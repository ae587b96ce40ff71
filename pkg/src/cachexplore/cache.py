"""Behavioral model of small single- and two-level caches.

Addresses are line addresses (no byte offset). The set index of an address
is ``addr % n_sets`` and the full address is kept as the tag, so the model is
physically indexed and tagged. Two-level hierarchies give each of the two
cores a private direct-mapped L1 and share one inclusive L2.

State is kept in flat per-set lists rather than line objects so that
hierarchies can be cloned cheaply by the exhaustive search.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional

POLICIES = ("lru", "plru", "rrip", "random")
PREFETCHERS = ("none", "nextline", "stream")
SCOPES = ("full", "lines_only")

RRPV_MAX = 3
RRPV_INSERT = 2

DEMAND = 0
PREFETCH = 1


class ConfigError(ValueError):
    """Raised for structurally invalid cache configurations."""


class Latency(str, Enum):
    NONE = "none"
    HIT = "hit"
    L1_HIT = "l1_hit"
    L2_HIT = "l2_hit"
    MISS = "miss"


@dataclass(frozen=True)
class CacheConfig:
    n_sets: int
    n_ways: int
    policy: str = "lru"
    prefetcher: str = "none"

    def __post_init__(self):
        if not isinstance(self.n_sets, int) or self.n_sets < 1:
            raise ConfigError(f"n_sets must be a positive integer, got {self.n_sets!r}")
        if not isinstance(self.n_ways, int) or self.n_ways < 1:
            raise ConfigError(f"n_ways must be a positive integer, got {self.n_ways!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.prefetcher not in PREFETCHERS:
            raise ConfigError(
                f"prefetcher must be one of {PREFETCHERS}, got {self.prefetcher!r}"
            )
        if self.policy == "plru" and self.n_ways & (self.n_ways - 1):
            raise ConfigError(f"plru requires a power-of-two n_ways, got {self.n_ways}")


@dataclass(frozen=True)
class HierarchyConfig:
    levels: tuple[CacheConfig, ...]
    n_cores: int = 1
    inclusive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.levels) == 1:
            if self.n_cores != 1:
                raise ConfigError("single-level hierarchies have exactly 1 core")
        elif len(self.levels) == 2:
            if self.n_cores != 2:
                raise ConfigError("two-level hierarchies have exactly 2 cores")
            if not self.inclusive:
                raise ConfigError("two-level hierarchies must be inclusive")
            if self.levels[0].n_ways != 1:
                raise ConfigError("two-level L1 must be direct-mapped (n_ways = 1)")
        else:
            raise ConfigError(f"levels must have length 1 or 2, got {len(self.levels)}")

    @classmethod
    def single(cls, cfg: CacheConfig) -> "HierarchyConfig":
        return cls(levels=(cfg,), n_cores=1, inclusive=False)

    @classmethod
    def two_level(cls, l1: CacheConfig, l2: CacheConfig) -> "HierarchyConfig":
        return cls(levels=(l1, l2), n_cores=2, inclusive=True)

    @property
    def is_two_level(self) -> bool:
        return len(self.levels) == 2


@dataclass(frozen=True)
class LineState:
    valid: bool
    tag: int
    policy_meta: int
    origin: str


@dataclass(frozen=True)
class AccessOutcome:
    latency_class: Latency
    evicted: Optional[int] = None
    prefetch_issued: Optional[int] = None


@dataclass(frozen=True)
class FlushOutcome:
    changed: bool


@dataclass(frozen=True)
class CacheSnapshot:
    """Canonical capture of every cache instance in a hierarchy.

    ``level_states`` holds one entry per cache instance (L1 of core 0, L1 of
    core 1, L2 for two-level hierarchies). Equality is element-wise over the
    captured tuples.
    """

    scope: str
    level_states: tuple

    @property
    def digest(self) -> str:
        payload = repr((self.scope, self.level_states)).encode()
        return hashlib.sha256(payload).hexdigest()


class _NextLine:
    def __init__(self):
        self.reset()

    def reset(self):
        pass

    def on_demand_miss(self, addr: int) -> Optional[int]:
        return addr + 1

    def state(self) -> tuple:
        return ()

    def copy(self) -> "_NextLine":
        return _NextLine()


class _Stream:
    """Single ascending unit-stride stream of degree 1.

    Two consecutive demand misses at ``a - 1`` then ``a`` trigger a prefetch
    of ``a + 2``.
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self.last_miss: Optional[int] = None

    def on_demand_miss(self, addr: int) -> Optional[int]:
        issue = addr + 2 if self.last_miss == addr - 1 else None
        self.last_miss = addr
        return issue

    def state(self) -> tuple:
        return (-1 if self.last_miss is None else self.last_miss,)

    def copy(self) -> "_Stream":
        other = _Stream()
        other.last_miss = self.last_miss
        return other


def _make_prefetcher(kind: str):
    if kind == "nextline":
        return _NextLine()
    if kind == "stream":
        return _Stream()
    return None


class Cache:
    """One set-associative cache instance."""

    def __init__(self, cfg: CacheConfig, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        self.n_sets = cfg.n_sets
        self.n_ways = cfg.n_ways
        self.policy = cfg.policy
        self.prefetcher = _make_prefetcher(cfg.prefetcher)
        self.reset()

    def reset(self):
        s, w = self.n_sets, self.n_ways
        self.valid = [[False] * w for _ in range(s)]
        self.tags = [[0] * w for _ in range(s)]
        self.meta = [[0] * w for _ in range(s)]
        self.origin = [[DEMAND] * w for _ in range(s)]
        # PLRU tree bits, heap-indexed from the root; bit 0 means the
        # replacement candidate lies in the left subtree.
        self.tree = [[0] * (w - 1) for _ in range(s)] if self.policy == "plru" else None
        if self.prefetcher is not None:
            self.prefetcher.reset()

    def copy(self, rng: random.Random) -> "Cache":
        other = Cache.__new__(Cache)
        other.cfg = self.cfg
        other.rng = rng
        other.n_sets = self.n_sets
        other.n_ways = self.n_ways
        other.policy = self.policy
        other.prefetcher = self.prefetcher.copy() if self.prefetcher is not None else None
        other.valid = [row[:] for row in self.valid]
        other.tags = [row[:] for row in self.tags]
        other.meta = [row[:] for row in self.meta]
        other.origin = [row[:] for row in self.origin]
        other.tree = [row[:] for row in self.tree] if self.tree is not None else None
        return other

    def lookup(self, addr: int) -> int:
        s = addr % self.n_sets
        valid, tags = self.valid[s], self.tags[s]
        for way in range(self.n_ways):
            if valid[way] and tags[way] == addr:
                return way
        return -1

    def __contains__(self, addr: int) -> bool:
        return self.lookup(addr) >= 0

    def touch(self, addr: int, way: int):
        """Replacement-metadata update for a hit on ``way``."""
        s = addr % self.n_sets
        if self.policy == "lru":
            valid, meta = self.valid[s], self.meta[s]
            rank = meta[way]
            for w in range(self.n_ways):
                if valid[w] and meta[w] < rank:
                    meta[w] += 1
            meta[way] = 0
        elif self.policy == "plru":
            self._plru_point_away(s, way)
        elif self.policy == "rrip":
            self.meta[s][way] = 0

    def fill(self, addr: int, origin: int = DEMAND) -> Optional[int]:
        """Insert ``addr`` (known absent); returns the evicted address, if any."""
        s = addr % self.n_sets
        valid = self.valid[s]
        evicted = None
        way = -1
        for w in range(self.n_ways):
            if not valid[w]:
                way = w
                break
        if way < 0:
            way = self._victim(s)
            evicted = self.tags[s][way]
            self._clear(s, way)
        if self.policy == "lru":
            meta = self.meta[s]
            for w in range(self.n_ways):
                if valid[w]:
                    meta[w] += 1
            meta[way] = 0
        elif self.policy == "rrip":
            self.meta[s][way] = RRPV_INSERT
        elif self.policy == "plru":
            self._plru_point_away(s, way)
        valid[way] = True
        self.tags[s][way] = addr
        self.origin[s][way] = origin
        return evicted

    def invalidate(self, addr: int) -> bool:
        way = self.lookup(addr)
        if way < 0:
            return False
        s = addr % self.n_sets
        if self.policy == "lru":
            valid, meta = self.valid[s], self.meta[s]
            rank = meta[way]
            for w in range(self.n_ways):
                if valid[w] and meta[w] > rank:
                    meta[w] -= 1
        self._clear(s, way)
        if self.tree is not None and not any(self.valid[s]):
            self.tree[s] = [0] * (self.n_ways - 1)
        return True

    def _clear(self, s: int, way: int):
        self.valid[s][way] = False
        self.tags[s][way] = 0
        self.meta[s][way] = 0
        self.origin[s][way] = DEMAND

    def _victim(self, s: int) -> int:
        if self.policy == "lru":
            return self.meta[s].index(self.n_ways - 1)
        if self.policy == "rrip":
            meta = self.meta[s]
            while True:
                for w in range(self.n_ways):
                    if meta[w] >= RRPV_MAX:
                        return w
                for w in range(self.n_ways):
                    meta[w] += 1
        if self.policy == "plru":
            tree = self.tree[s]
            node = 0
            while node < self.n_ways - 1:
                node = 2 * node + 1 + tree[node]
            return node - (self.n_ways - 1)
        return self.rng.randrange(self.n_ways)

    def _plru_point_away(self, s: int, way: int):
        tree = self.tree[s]
        node = way + self.n_ways - 1
        while node > 0:
            parent = (node - 1) // 2
            # left child -> candidate moves right, and vice versa
            tree[parent] = 1 if node == 2 * parent + 1 else 0
            node = parent

    def lines(self, s: int) -> list[LineState]:
        return [
            LineState(
                self.valid[s][w],
                self.tags[s][w],
                self.meta[s][w],
                "prefetch" if self.origin[s][w] == PREFETCH else "demand",
            )
            for w in range(self.n_ways)
        ]

    def resident(self) -> set[int]:
        return {
            self.tags[s][w]
            for s in range(self.n_sets)
            for w in range(self.n_ways)
            if self.valid[s][w]
        }

    def capture(self, full: bool) -> tuple:
        if not full:
            return tuple(
                tuple(zip(self.valid[s], self.tags[s])) for s in range(self.n_sets)
            )
        sets = tuple(
            (
                tuple(zip(self.valid[s], self.tags[s], self.meta[s], self.origin[s])),
                tuple(self.tree[s]) if self.tree is not None else (),
            )
            for s in range(self.n_sets)
        )
        pf = self.prefetcher.state() if self.prefetcher is not None else ()
        return (sets, pf)


class CacheHierarchy:
    """A single cache, or two private L1s over an inclusive shared L2."""

    def __init__(self, cfg: HierarchyConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.rng = random.Random(seed)
        if cfg.is_two_level:
            l1, l2 = cfg.levels
            self.l1 = [Cache(l1, self.rng) for _ in range(cfg.n_cores)]
            self.l2 = Cache(l2, self.rng)
            self.caches = [*self.l1, self.l2]
        else:
            self.l1 = None
            self.l2 = None
            self.caches = [Cache(cfg.levels[0], self.rng)]
        self._uses_rng = any(c.cfg.policy == "random" for c in self.caches)

    @property
    def n_cores(self) -> int:
        return self.cfg.n_cores

    def clone(self) -> "CacheHierarchy":
        other = CacheHierarchy.__new__(CacheHierarchy)
        other.cfg = self.cfg
        other.seed = self.seed
        other.rng = random.Random()
        other.rng.setstate(self.rng.getstate())
        other.caches = [c.copy(other.rng) for c in self.caches]
        if self.cfg.is_two_level:
            other.l1 = other.caches[:-1]
            other.l2 = other.caches[-1]
        else:
            other.l1 = other.l2 = None
        other._uses_rng = self._uses_rng
        return other

    def reset(self):
        for c in self.caches:
            c.reset()

    def access(self, core: int, addr: int, kind: str = "demand") -> AccessOutcome:
        if not 0 <= core < self.cfg.n_cores:
            raise ValueError(f"core {core} out of range for {self.cfg.n_cores} core(s)")
        if addr < 0:
            raise ValueError(f"address must be non-negative, got {addr}")
        demand = kind == "demand"
        if self.l2 is None:
            return self._access_single(addr, demand)
        return self._access_two_level(core, addr, demand)

    def _access_single(self, addr: int, demand: bool) -> AccessOutcome:
        cache = self.caches[0]
        way = cache.lookup(addr)
        if way >= 0:
            # prefetches that hit leave replacement state alone
            if demand:
                cache.touch(addr, way)
            return AccessOutcome(Latency.HIT)
        evicted = cache.fill(addr, DEMAND if demand else PREFETCH)
        issued = None
        if demand and cache.prefetcher is not None:
            issued = cache.prefetcher.on_demand_miss(addr)
            if issued is not None and cache.lookup(issued) < 0:
                cache.fill(issued, PREFETCH)
        return AccessOutcome(Latency.MISS, evicted, issued)

    def _fill_l2(self, addr: int, origin: int) -> Optional[int]:
        evicted = self.l2.fill(addr, origin)
        if evicted is not None:
            for l1 in self.l1:
                l1.invalidate(evicted)
        return evicted

    def _access_two_level(self, core: int, addr: int, demand: bool) -> AccessOutcome:
        l1, l2 = self.l1[core], self.l2
        origin = DEMAND if demand else PREFETCH
        way = l1.lookup(addr)
        if way >= 0:
            if demand:
                l1.touch(addr, way)
            return AccessOutcome(Latency.L1_HIT)

        issued = None
        way2 = l2.lookup(addr)
        if way2 >= 0:
            if demand:
                l2.touch(addr, way2)
            latency = Latency.L2_HIT
            evicted = None
        else:
            evicted = self._fill_l2(addr, origin)
            latency = Latency.MISS
            if demand and l2.prefetcher is not None:
                issued = l2.prefetcher.on_demand_miss(addr)
                if issued is not None and l2.lookup(issued) < 0:
                    self._fill_l2(issued, PREFETCH)
        l1_evicted = l1.fill(addr, origin)
        if evicted is None:
            evicted = l1_evicted

        if demand and l1.prefetcher is not None:
            target = l1.prefetcher.on_demand_miss(addr)
            if target is not None:
                issued = target
                if l1.lookup(target) < 0:
                    if l2.lookup(target) < 0:
                        self._fill_l2(target, PREFETCH)
                    l1.fill(target, PREFETCH)
        return AccessOutcome(latency, evicted, issued)

    def flush(self, addr: int) -> FlushOutcome:
        changed = False
        for c in self.caches:
            changed |= c.invalidate(addr)
        return FlushOutcome(changed)

    def snapshot(self, scope: str = "full") -> CacheSnapshot:
        if scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
        full = scope == "full"
        return CacheSnapshot(scope, tuple(c.capture(full) for c in self.caches))

    def state_key(self) -> tuple:
        """Full state including the replacement RNG, for search deduplication."""
        key = tuple(c.capture(True) for c in self.caches)
        if self._uses_rng:
            key = key + (self.rng.getstate(),)
        return key

    def check_inclusion(self) -> bool:
        if self.l2 is None:
            return True
        outer = self.l2.resident()
        return all(l1.resident() <= outer for l1 in self.l1)

    def contains(self, addr: int, level: int = -1, core: int = 0) -> bool:
        """Residency probe that does not touch replacement state."""
        if self.l2 is None:
            return addr in self.caches[0]
        if level == 0:
            return addr in self.l1[core]
        if level == 1:
            return addr in self.l2
        return any(addr in c for c in self.caches)


def build_cache(cfg: HierarchyConfig, seed: int = 0) -> CacheHierarchy:
    if not isinstance(cfg, HierarchyConfig):
        raise ConfigError(f"expected HierarchyConfig, got {type(cfg).__name__}")
    return CacheHierarchy(cfg, seed)
