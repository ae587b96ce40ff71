import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cachexplore.cache import (
    CacheConfig,
    ConfigError,
    HierarchyConfig,
    Latency,
    build_cache,
)


def single(n_sets, n_ways, policy="lru", prefetcher="none"):
    return HierarchyConfig.single(CacheConfig(n_sets, n_ways, policy, prefetcher))


def two_level(sets=4, ways=2, policy="lru"):
    return HierarchyConfig.two_level(
        CacheConfig(sets, 1, policy), CacheConfig(sets, ways, policy)
    )


class ListLRU:
    """Reference LRU: each set is a recency-ordered list, MRU first."""

    def __init__(self, n_sets, n_ways):
        self.n_sets, self.n_ways = n_sets, n_ways
        self.sets = [[] for _ in range(n_sets)]

    def access(self, addr):
        lines = self.sets[addr % self.n_sets]
        if addr in lines:
            lines.remove(addr)
            lines.insert(0, addr)
            return "hit"
        lines.insert(0, addr)
        if len(lines) > self.n_ways:
            lines.pop()
        return "miss"


# -- construction --------------------------------------------------------------


def test_fresh_cache_has_only_invalid_lines():
    h = build_cache(single(4, 1), seed=0)
    lines = [line for s in range(4) for line in h.caches[0].lines(s)]
    assert len(lines) == 4
    assert not any(line.valid for line in lines)


def test_two_level_builds_three_linked_instances():
    h = build_cache(two_level(), seed=0)
    assert len(h.caches) == 3
    assert [c.n_ways for c in h.caches] == [1, 1, 2]
    h.access(1, 0)
    assert h.contains(0, level=0, core=1) and h.contains(0, level=1)
    assert not h.contains(0, level=0, core=0)


@pytest.mark.parametrize(
    "make",
    [
        lambda: CacheConfig(4, 3, "plru"),
        lambda: CacheConfig(0, 1),
        lambda: CacheConfig(4, 0),
        lambda: CacheConfig(4, 1, "fifo"),
        lambda: CacheConfig(4, 1, "lru", "stride"),
        lambda: HierarchyConfig((CacheConfig(4, 1), CacheConfig(4, 2)), n_cores=2, inclusive=False),
        lambda: HierarchyConfig((CacheConfig(4, 2), CacheConfig(4, 2)), n_cores=2, inclusive=True),
        lambda: HierarchyConfig((CacheConfig(4, 1),), n_cores=2),
    ],
)
def test_invalid_configs_rejected(make):
    with pytest.raises(ConfigError):
        make()


# -- access ------------------------------------------------------------------


def test_cold_miss_then_hit():
    h = build_cache(single(4, 1))
    assert h.access(0, 0).latency_class is Latency.MISS
    assert h.access(0, 0).latency_class is Latency.HIT


def test_same_set_conflict_in_direct_mapped():
    h = build_cache(single(4, 1))
    h.access(0, 0)
    out = h.access(0, 4)
    assert out.latency_class is Latency.MISS and out.evicted == 0
    assert h.access(0, 0).latency_class is Latency.MISS


def test_lru_evicts_older_line():
    h = build_cache(single(1, 2))
    h.access(0, 10)  # A, older
    h.access(0, 11)  # B, newer
    out = h.access(0, 12)
    assert out.latency_class is Latency.MISS and out.evicted == 10


def test_lru_matches_reference_on_all_three_access_sequences():
    addrs = [0, 1, 2]
    for seq in itertools.product(addrs, repeat=3):
        h = build_cache(single(1, 2))
        ref = ListLRU(1, 2)
        for a in seq:
            assert h.access(0, a).latency_class.value == ref.access(a), seq


def test_lru_reference_equivalence_random():
    # 10^5 random sequences over every geometry with <= 4 sets and <= 4 ways
    rng = random.Random(1234)
    geometries = [(s, w) for s in range(1, 5) for w in range(1, 5)]
    caches = {g: build_cache(single(*g)) for g in geometries}
    for i in range(100_000):
        n_sets, n_ways = geometries[i % len(geometries)]
        h = caches[(n_sets, n_ways)]
        h.reset()
        ref = ListLRU(n_sets, n_ways)
        n_addrs = n_sets * (n_ways + 2)
        for _ in range(8):
            a = rng.randrange(n_addrs)
            assert h.access(0, a).latency_class.value == ref.access(a)


def test_lru_ranks_stay_a_permutation():
    rng = random.Random(3)
    h = build_cache(single(2, 4))
    c = h.caches[0]
    for _ in range(2000):
        a = rng.randrange(16)
        if rng.random() < 0.2:
            h.flush(a)
        else:
            h.access(0, a)
        for s in range(2):
            ranks = sorted(line.policy_meta for line in c.lines(s) if line.valid)
            assert ranks == list(range(len(ranks)))


def test_rrip_insert_hit_and_victim():
    h = build_cache(single(1, 2, "rrip"))
    c = h.caches[0]
    h.access(0, 0)
    h.access(0, 1)
    assert [l.policy_meta for l in c.lines(0)] == [2, 2]
    h.access(0, 0)  # hit -> RRPV 0
    assert [l.policy_meta for l in c.lines(0)] == [0, 2]
    out = h.access(0, 2)  # ages both by one: line 1 reaches 3 first
    assert out.evicted == 1
    assert [(l.tag, l.policy_meta) for l in c.lines(0)] == [(0, 1), (2, 2)]


def test_plru_tree_victim_sequence():
    h = build_cache(single(1, 4, "plru"))
    for a in range(4):
        h.access(0, a)
    # after touching ways 0..3 in order the tree points at way 0
    assert h.access(0, 4).evicted == 0
    h.access(0, 1)
    h.access(0, 4)  # way 0 now holds 4
    assert h.access(0, 5).evicted == 2


def test_random_policy_is_seeded():
    def run(seed):
        h = build_cache(single(1, 4, "random"), seed)
        return [h.access(0, a).evicted for a in range(40)]

    assert run(5) == run(5)
    assert run(5) != run(6)


def test_random_policy_fills_invalid_ways_first():
    h = build_cache(single(1, 4, "random"), seed=1)
    assert [h.access(0, a).evicted for a in range(4)] == [None] * 4


def test_nextline_prefetch_on_demand_miss():
    h = build_cache(single(4, 1, prefetcher="nextline"))
    out = h.access(0, 3)
    assert out.prefetch_issued == 4
    assert h.contains(4)
    assert h.access(0, 4).latency_class is Latency.HIT
    assert h.caches[0].lines(0)[0].origin == "prefetch"


def test_nextline_no_prefetch_on_hit():
    h = build_cache(single(1, 8, prefetcher="nextline"))
    h.access(0, 0)
    assert h.access(0, 0).prefetch_issued is None


def test_stream_prefetch_after_two_consecutive_misses():
    h = build_cache(single(1, 8, prefetcher="stream"))
    assert h.access(0, 5).prefetch_issued is None
    out = h.access(0, 6)
    assert out.prefetch_issued == 8
    assert h.contains(8) and not h.contains(7)


def test_stream_needs_adjacent_misses():
    h = build_cache(single(1, 8, prefetcher="stream"))
    h.access(0, 5)
    assert h.access(0, 7).prefetch_issued is None


def test_two_level_latency_classes():
    h = build_cache(two_level())
    assert h.access(0, 0).latency_class is Latency.MISS
    assert h.access(0, 0).latency_class is Latency.L1_HIT
    assert h.access(1, 0).latency_class is Latency.L2_HIT
    assert h.access(1, 0).latency_class is Latency.L1_HIT


def test_two_level_l2_eviction_back_invalidates_l1():
    h = build_cache(two_level(sets=4, ways=2))
    h.access(0, 0)
    h.access(1, 4)
    h.access(1, 8)  # third line in L2 set 0 evicts 0 (LRU)
    assert not h.contains(0)
    assert h.access(0, 0).latency_class is Latency.MISS


def inclusion_holds(h):
    # full scan independent of check_inclusion()
    l2 = h.caches[-1]
    for l1 in h.caches[:-1]:
        for s in range(l1.n_sets):
            for line in l1.lines(s):
                if line.valid and line.tag not in l2:
                    return False
    return True


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a0", "a1", "f"]), st.integers(0, 23)), max_size=60))
def test_inclusion_holds_after_every_operation(ops):
    h = build_cache(two_level(sets=4, ways=2))
    for op, addr in ops:
        if op == "f":
            h.flush(addr)
        else:
            h.access(int(op[1]), addr)
        assert inclusion_holds(h)
        assert h.check_inclusion()


# -- flush -------------------------------------------------------------------


def test_flush_present_line():
    h = build_cache(single(4, 1))
    h.access(0, 0)
    assert h.flush(0).changed
    assert not h.contains(0)


def test_flush_absent_line_is_unchanged():
    h = build_cache(single(4, 1))
    h.access(0, 1)
    assert not h.flush(5).changed


def test_flush_two_level_removes_everywhere():
    h = build_cache(two_level())
    h.access(0, 3)
    assert h.contains(3, level=0, core=0) and h.contains(3, level=1)
    assert h.flush(3).changed
    for c in h.caches:
        assert 3 not in c


def test_flush_compacts_lru_ranks():
    h = build_cache(single(1, 4))
    for a in range(4):
        h.access(0, a)
    h.flush(2)
    ranks = {l.tag: l.policy_meta for l in h.caches[0].lines(0) if l.valid}
    assert ranks == {3: 0, 1: 1, 0: 2}


# -- snapshot / reset --------------------------------------------------------


def test_snapshot_deterministic():
    h = build_cache(single(4, 2))
    h.access(0, 1)
    assert h.snapshot("full") == h.snapshot("full")
    assert h.snapshot("full").digest == h.snapshot("full").digest


def test_snapshot_scopes_on_recency_change():
    h = build_cache(single(1, 2))
    h.access(0, 0)  # A, becomes LRU
    h.access(0, 1)  # B, MRU
    full0, lines0 = h.snapshot("full"), h.snapshot("lines_only")
    assert h.access(0, 0).latency_class is Latency.HIT
    assert h.snapshot("full") != full0
    assert h.snapshot("lines_only") == lines0


def test_snapshot_flush_absent_equal_both_scopes():
    h = build_cache(single(4, 1))
    h.access(0, 1)
    before = {s: h.snapshot(s) for s in ("full", "lines_only")}
    h.flush(5)
    for s in before:
        assert h.snapshot(s) == before[s]


def test_snapshot_does_not_mutate():
    h = build_cache(single(2, 2, "plru"))
    h.access(0, 1)
    a = h.snapshot("full")
    h.snapshot("lines_only")
    assert h.snapshot("full") == a


def test_lines_only_captures_valid_and_tag():
    h = build_cache(single(1, 2))
    h.access(0, 7)
    (sets,) = h.snapshot("lines_only").level_states
    assert sets == (((True, 7), (False, 0)),)


def test_snapshot_sensitive_to_single_field():
    h = build_cache(single(2, 2, "rrip", "stream"))
    for a in (0, 1, 2):
        h.access(0, a)
    base = h.snapshot("full")
    c = h.caches[0]
    for attr in ("valid", "tags", "meta", "origin"):
        table = getattr(c, attr)
        old = table[0][0]
        table[0][0] = (not old) if attr == "valid" else old + 1
        assert h.snapshot("full") != base, attr
        table[0][0] = old
    assert h.snapshot("full") == base
    c.prefetcher.last_miss += 1
    assert h.snapshot("full") != base


def test_snapshot_equality_symmetric():
    h1, h2 = build_cache(single(2, 2)), build_cache(single(2, 2))
    h1.access(0, 1)
    h2.access(0, 1)
    a, b = h1.snapshot(), h2.snapshot()
    assert a == b and b == a
    h2.access(0, 3)
    b = h2.snapshot()
    assert a != b and b != a


def test_reset_matches_fresh_build():
    cfg = single(4, 2, "plru", "nextline")
    h = build_cache(cfg)
    h.access(0, 0)
    h.reset()
    assert h.snapshot("full") == build_cache(cfg).snapshot("full")
    h.reset()
    assert h.snapshot("full") == build_cache(cfg).snapshot("full")
    assert h.access(0, 0).latency_class is Latency.MISS


def test_reset_clears_stream_state():
    cfg = single(1, 4, prefetcher="stream")
    h = build_cache(cfg)
    h.access(0, 3)
    h.reset()
    assert h.snapshot("full") == build_cache(cfg).snapshot("full")


def test_empty_set_after_flush_equals_fresh():
    cfg = single(2, 4, "plru")
    h = build_cache(cfg)
    for a in (0, 2, 4):
        h.access(0, a)
    for a in (0, 2, 4):
        h.flush(a)
    assert h.snapshot("full") == build_cache(cfg).snapshot("full")


def test_clone_is_independent():
    h = build_cache(single(1, 2, "random"), seed=3)
    h.access(0, 0)
    c = h.clone()
    assert c.state_key() == h.state_key()
    c.access(0, 1)
    assert c.snapshot() != h.snapshot()
    # identical rng state -> identical future choices
    h.access(0, 1)
    assert [c.access(0, a).evicted for a in range(2, 8)] == [h.access(0, a).evicted for a in range(2, 8)]


# -- properties --------------------------------------------------------------

ops_strategy = st.lists(
    st.tuples(st.sampled_from(["a", "f"]), st.integers(0, 15)), max_size=40
)


@settings(max_examples=100, deadline=None)
@given(ops_strategy, st.sampled_from(["lru", "plru", "rrip", "random"]), st.integers(0, 5))
def test_determinism(ops, policy, seed):
    def run():
        h = build_cache(single(2, 4, policy, "nextline"), seed)
        outs = []
        for op, a in ops:
            outs.append(h.access(0, a) if op == "a" else h.flush(a))
            outs.append(h.snapshot("full"))
        return outs

    assert run() == run()


@settings(max_examples=100, deadline=None)
@given(ops_strategy, st.sampled_from(["lru", "plru", "rrip", "random"]), st.integers(0, 3))
def test_set_isolation(ops, policy, target_set):
    h = build_cache(single(4, 2, policy), seed=1)
    for op, a in ops:
        before = h.snapshot("full").level_states[0][0]
        if op == "a":
            h.access(0, a)
        else:
            h.flush(a)
        after = h.snapshot("full").level_states[0][0]
        touched = a % 4
        for s in range(4):
            if s != touched:
                assert before[s] == after[s]
