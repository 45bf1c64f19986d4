import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtx.allocator import PoolKind, PoolSet, init_pools, pool_bytes_for
from pmtx.checksum import block_position, page_base
from pmtx.emulator import CacheConfig, NvmEmulator
from pmtx.errors import AllocError, ConfigError, OutOfMemoryError, UsageError


def pools(key_pages=4, fv_pages=4, log_pages=2):
    emu = NvmEmulator(4096 * (1 + key_pages + fv_pages + log_pages), CacheConfig(sets=16, ways=4))
    return emu, init_pools(emu, key_pages * 4096, fv_pages * 4096, log_pages * 4096)


def test_hundred_byte_object_takes_two_blocks():
    _, ps = pools()
    for _ in range(30):
        a = ps.pmalloc(PoolKind.KEY, 100)
        assert a.addr % 64 == 0
        assert a.blocks == 2 and len(a.block_addrs()) == 2


def test_column_major_packing():
    _, ps = pools()
    allocs = [ps.pmalloc(PoolKind.KEY, 64) for _ in range(9)]
    positions = [block_position(a.addr) for a in allocs]
    assert positions[:7] == [(r, 0) for r in range(7)]
    assert positions[7:] == [(0, 1), (1, 1)]


def test_small_objects_never_straddle_columns():
    _, ps = pools()
    for _ in range(40):
        a = ps.pmalloc(PoolKind.KEY, 192)      # 3 blocks, two fit per column
        first, last = block_position(a.addr), block_position(a.addr + a.size - 1)
        assert first[1] == last[1]
        assert page_base(a.addr) == page_base(a.addr + a.size - 1)


def test_large_object_takes_whole_columns():
    _, ps = pools()
    ps.pmalloc(PoolKind.KEY, 64)
    big = ps.pmalloc(PoolKind.KEY, 1000)
    assert block_position(big.addr) == (0, 1)
    nxt = ps.pmalloc(PoolKind.KEY, 64)
    assert block_position(nxt.addr) == (0, 4)


def test_pair_allocation_shares_blocks():
    _, ps = pools()
    f, v = ps.pmalloc_pair(40, 80)
    assert f.addr % 64 == 0 and v.addr == f.addr + 40
    assert f.region is v.region
    assert set(f.block_addrs()) | set(v.block_addrs()) == set(range(f.addr, f.addr + 128, 64))
    assert f.kind == v.kind == PoolKind.FIELD_VALUE


def test_free_and_reuse_and_double_free():
    _, ps = pools()
    a = ps.pmalloc(PoolKind.KEY, 64)
    ps.pfree(a)
    with pytest.raises(UsageError):
        ps.pfree(a)
    b = ps.pmalloc(PoolKind.KEY, 50)
    assert b.addr == a.addr


def test_pair_region_returns_after_both_freed():
    _, ps = pools()
    f, v = ps.pmalloc_pair(40, 80)
    ps.pfree(f)
    assert ps.field_value.free_list.get(2, []) == []
    ps.pfree(v)
    assert ps.pmalloc(PoolKind.FIELD_VALUE, 100).addr == f.addr


def test_free_zeroes_durably():
    emu, ps = pools()
    a = ps.pmalloc(PoolKind.KEY, 64)
    emu.store(a.addr, b"\xff" * 64)
    emu.flush_line(a.addr)
    ps.pfree(a)
    assert emu.durable(a.addr, 64) == bytes(64)


def test_size_errors_and_exhaustion():
    _, ps = pools(key_pages=1)
    with pytest.raises(AllocError):
        ps.pmalloc(PoolKind.KEY, 0)
    with pytest.raises(AllocError):
        ps.pmalloc(PoolKind.KEY, 3137)
    with pytest.raises(AllocError):
        ps.pmalloc_pair(3000, 200)
    for _ in range(49):
        ps.pmalloc(PoolKind.KEY, 64)
    with pytest.raises(OutOfMemoryError):
        ps.pmalloc(PoolKind.KEY, 64)


def test_best_fit_falls_back_to_larger_free_region():
    _, ps = pools(key_pages=1)
    big = [ps.pmalloc(PoolKind.KEY, 128) for _ in range(21)]   # 3 per column x 7
    ps.pmalloc(PoolKind.KEY, 64)                               # last bump block
    ps.pfree(big[4])
    small = ps.pmalloc(PoolKind.KEY, 64)
    assert small.addr == big[4].addr


def test_foreign_free_rejected():
    _, ps = pools()
    a = ps.pmalloc(PoolKind.KEY, 64)
    with pytest.raises(UsageError):
        ps.field_value.pfree(a)


def test_superblock_round_trip():
    emu, ps = pools()
    a = ps.pmalloc(PoolKind.KEY, 64)
    ps.pmalloc(PoolKind.KEY, 64)
    image = emu.crash()
    again = PoolSet.from_superblock(NvmEmulator.from_image(image, CacheConfig(sets=16, ways=4)))
    assert again.key.base == ps.key.base and again.log.npages == ps.log.npages
    # the bump cursor is durable, so the next object does not overlap
    assert again.pmalloc(PoolKind.KEY, 64).addr == a.addr + 128


def test_missing_superblock_and_bad_sizes():
    emu = NvmEmulator(8192, CacheConfig(sets=4, ways=2))
    with pytest.raises(ConfigError):
        PoolSet.from_superblock(emu)
    with pytest.raises(ConfigError):
        init_pools(emu, 4096, 4096, 4096)
    with pytest.raises(ConfigError):
        init_pools(emu, 100, 4096, 4096)


def test_pool_bytes_for_is_enough():
    for size in (40, 64, 100, 128, 512, 1000):
        nbytes = pool_bytes_for(300, size)
        emu = NvmEmulator(4096 * 3 + nbytes, CacheConfig(sets=16, ways=4))
        ps = init_pools(emu, nbytes, 4096, 4096)
        for _ in range(300):
            ps.pmalloc(PoolKind.KEY, size)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 1500), min_size=1, max_size=60))
def test_allocations_are_disjoint_and_stay_in_data_region(sizes):
    _, ps = pools(key_pages=40)
    spans = []
    for s in sizes:
        a = ps.pmalloc(PoolKind.KEY, s)
        off = a.addr - page_base(a.addr)
        assert a.addr % 64 == 0 and off + s <= 3136
        spans.append((a.addr, a.addr + s))
    spans.sort()
    assert all(e1 <= s2 for (_, e1), (s2, _) in zip(spans, spans[1:]))
