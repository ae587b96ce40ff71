"""The seventeen benchmark cache configurations."""

from __future__ import annotations

from dataclasses import dataclass

from .cache import CacheConfig, HierarchyConfig
from .env import EnvConfig


@dataclass(frozen=True)
class Preset:
    name: str
    kind: str
    ways: int
    sets: int
    victim: tuple[int, int]
    attacker: tuple[int, int]
    flush: bool

    @property
    def victim_addrs(self) -> tuple[int, ...]:
        return tuple(range(self.victim[0], self.victim[1] + 1))

    @property
    def attacker_addrs(self) -> tuple[int, ...]:
        return tuple(range(self.attacker[0], self.attacker[1] + 1))

    def hierarchy(self, policy: str = "lru") -> HierarchyConfig:
        prefetcher = "none"
        if self.kind.endswith("+PFnextline"):
            prefetcher = "nextline"
        elif self.kind.endswith("+PFstream"):
            prefetcher = "stream"
        if self.kind == "2-level SA":
            # private direct-mapped L1 per core, shared inclusive L2
            l1 = CacheConfig(n_sets=self.sets, n_ways=1, policy=policy)
            l2 = CacheConfig(n_sets=self.sets, n_ways=self.ways, policy=policy)
            return HierarchyConfig.two_level(l1, l2)
        return HierarchyConfig.single(
            CacheConfig(self.sets, self.ways, policy=policy, prefetcher=prefetcher)
        )


_ROWS = [
    # name, type, ways, sets, victim, attacker, flush
    ("no1", "DM", 1, 4, (0, 3), (4, 7), False),
    ("no2", "DM+PFnextline", 1, 4, (0, 3), (4, 7), False),
    ("no3", "DM", 1, 4, (0, 3), (0, 3), True),
    ("no4", "DM", 1, 4, (0, 3), (0, 7), False),
    ("no5", "FA", 4, 1, (0, 0), (4, 7), False),
    ("no6", "FA", 4, 1, (0, 0), (0, 3), True),
    ("no7", "FA", 4, 1, (0, 0), (0, 7), False),
    ("no8", "FA", 4, 1, (0, 3), (0, 3), True),
    ("no9", "FA", 4, 1, (0, 3), (0, 7), True),
    ("no10", "DM", 1, 8, (0, 7), (0, 7), True),
    ("no11", "FA", 8, 1, (0, 0), (0, 7), True),
    ("no12", "FA", 8, 1, (0, 0), (0, 15), False),
    ("no13", "FA+PFnextline", 8, 1, (0, 0), (0, 15), False),
    ("no14", "FA+PFstream", 8, 1, (0, 0), (0, 15), False),
    ("no15", "SA", 2, 4, (0, 3), (4, 11), False),
    ("no16", "2-level SA", 2, 4, (0, 3), (4, 11), False),
    ("no17", "2-level SA", 2, 8, (0, 7), (8, 23), False),
]

PRESETS: dict[str, Preset] = {row[0]: Preset(*row) for row in _ROWS}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from no1..no17") from None


def preset_env(name: str, policy: str = "lru", **overrides) -> EnvConfig:
    """EnvConfig for a preset; keyword overrides go straight to EnvConfig."""
    p = get_preset(name)
    kwargs = dict(
        hierarchy=p.hierarchy(policy),
        victim_addrs=p.victim_addrs,
        attacker_addrs=p.attacker_addrs,
        flush_enabled=p.flush,
    )
    kwargs.update(overrides)
    return EnvConfig(**kwargs)
