import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtx import checksum as ck
from pmtx.emulator import CacheConfig, NvmEmulator
from pmtx.errors import LayoutError

from oracles import (ceil_form_corr, ceil_form_cons, data_block, layout_table, pack_lanes,
                     protected_page, reference_checksums)


def corrupt(page, cells, rng):
    bad = bytearray(page)
    for r, c in cells:
        start = c * 448 + r * 64
        bad[start:start + 64] = rng.randbytes(64)
    return bad


def test_layout_constants():
    assert ck.DATA_BYTES == 49 * 64 == 3136
    assert ck.CHECKSUM_BYTES == 896
    assert ck.DATA_BYTES + ck.CHECKSUM_BYTES == 4032
    assert ck.COLUMN_BYTES == 448


def test_checksums_match_integer_oracle():
    rng = random.Random(1)
    for _ in range(20):
        page = bytearray(rng.randbytes(4096))
        assert ck.checksum_region(page) == reference_checksums(page)


def test_build_examples():
    page = bytearray(4096)
    assert ck.checksum_region(page) == bytes(896)
    blk = pack_lanes([7, 0, 0, 0, 0, 0, 0, 0])
    page[3 * 448 + 2 * 64:3 * 448 + 3 * 64] = blk
    region = ck.checksum_region(page)
    assert region[3 * 64:4 * 64] == blk                 # column 3
    assert region[448 + 2 * 64:448 + 3 * 64] == blk     # row 2


def test_locators_match_layout_enumeration():
    for off, (cons, corr) in layout_table().items():
        psa = 5 * 4096
        assert ck.locate_consistency(psa + off) == psa + cons
        assert ck.locate_correlation(psa + off) == psa + corr
        for inner in (1, 33, 63):
            assert ck.locate_consistency(psa + off + inner) == psa + cons


def test_locator_examples():
    assert ck.locate_consistency(500) == 3200
    assert ck.locate_consistency(0) == 3136
    assert ck.locate_consistency(3072) == 3520
    assert ck.locate_correlation(0) == 3584
    assert ck.locate_correlation(576) == 3712
    assert ck.locate_correlation(500) == 3584


def test_ceiling_form_agrees_off_boundaries_and_divergence_is_block_starts():
    for off in range(ck.DATA_BYTES):
        if off % 64:
            assert ck.equation_consistency(off) == ceil_form_cons(off) == ck.locate_consistency(off)
            assert ck.equation_correlation(off) == ceil_form_corr(off) == ck.locate_correlation(off)
    assert ck.locator_divergence() == list(range(0, ck.DATA_BYTES, 64))


def test_locator_rejects_checksum_region():
    with pytest.raises(LayoutError):
        ck.locate_consistency(3136)
    with pytest.raises(LayoutError):
        ck.block_position(4095)


def test_verify_examples():
    rng = random.Random(2)
    page = protected_page(rng)
    assert ck.verify(page).clean
    bad = corrupt(page, [(4, 2)], rng)
    vr = ck.verify(bad)
    assert (vr.bad_columns, vr.bad_rows) == ({2}, {4})
    stale = bytearray(page)
    stale[3136 + 5 * 64] ^= 1
    vr = ck.verify(stale)
    assert (vr.bad_columns, vr.bad_rows) == ({5}, set())


def test_every_single_block_error_is_corrected_exactly():
    rng = random.Random(3)
    page = protected_page(rng)
    for r in range(7):
        for c in range(7):
            bad = corrupt(page, [(r, c)], rng)
            rep = ck.correct(bad)
            assert bytes(bad) == bytes(page)
            assert rep.repaired == [(r, c)] and not rep.uncorrectable


def test_two_errors_in_one_row_are_both_corrected():
    rng = random.Random(4)
    page = protected_page(rng)
    bad = corrupt(page, [(2, 1), (2, 5)], rng)
    rep = ck.correct(bad)
    assert rep.corrected == 2 and not rep.uncorrectable
    assert bytes(bad) == bytes(page)


def test_rectangle_is_uncorrectable():
    rng = random.Random(5)
    page = protected_page(rng)
    cells = [(1, 2), (1, 4), (4, 2), (2, 4)]
    bad = corrupt(page, cells, rng)
    rep = ck.correct(bad)
    assert rep.uncorrectable
    assert set(cells) <= rep.uncorrectable
    # a full 2x2 rectangle has a rank-deficient system and stays ambiguous
    bad = corrupt(page, [(0, 0), (0, 3), (5, 0), (5, 3)], rng)
    assert ck.correct(bad).uncorrectable == {(0, 0), (0, 3), (5, 0), (5, 3)}


def test_diagonal_pair_is_resolved_by_matching_residues():
    rng = random.Random(6)
    page = protected_page(rng)
    bad = corrupt(page, [(0, 0), (3, 5)], rng)
    rep = ck.correct(bad)
    assert not rep.uncorrectable and bytes(bad) == bytes(page)


def test_zero_sum_corruption_escapes_detection():
    # +d on (0,0) and (1,1), -d on (0,1) and (1,0): every row and column sum
    # is unchanged, so the checksums cannot see it
    rng = random.Random(7)
    page = protected_page(rng)
    d = np.array([rng.getrandbits(64) for _ in range(8)], dtype=np.uint64)
    bad = bytearray(page)
    for (r, c), sign in (((0, 0), 1), ((1, 1), 1), ((0, 1), -1), ((1, 0), -1)):
        start = c * 448 + r * 64
        cur = ck.lanes(bad[start:start + 64])
        bad[start:start + 64] = ck.lane_bytes(cur + d if sign > 0 else cur - d)
    assert bytes(bad) != bytes(page)
    assert ck.verify(bad).clean
    assert ck.correct(bad).corrected == 0


def test_stale_checksum_block_is_rewritten():
    rng = random.Random(8)
    page = protected_page(rng)
    bad = bytearray(page)
    bad[3584 + 3 * 64 + 5] ^= 0xFF
    rep = ck.correct(bad)
    assert rep.checksums_rewritten == [("corr", 3)]
    assert bytes(bad) == bytes(page)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32), st.sets(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=6))
def test_decoder_soundness(seed, cells):
    rng = random.Random(seed)
    page = protected_page(rng)
    bad = corrupt(page, sorted(cells), rng)
    before = bytes(bad)
    vr = ck.verify(bad)
    suspects = {(r, c) for r in vr.bad_rows for c in vr.bad_columns}
    rep = ck.correct(bad)
    # only suspects may change, and a full repair means a clean page
    for r in range(7):
        for c in range(7):
            if (r, c) not in suspects:
                assert data_block(bad, r, c) == data_block(before, r, c)
    if not rep.uncorrectable:
        assert ck.verify(bad).clean
        assert bytes(bad[:3136]) == bytes(page[:3136])


def _emu_page(rng):
    emu = NvmEmulator(3 * 4096, CacheConfig(sets=16, ways=4))
    psa = 4096
    emu.store(psa, rng.randbytes(3136))
    return emu, psa


def test_build_checksums_flushes_fourteen_blocks():
    rng = random.Random(9)
    emu, psa = _emu_page(rng)
    before = emu.counters.flushes_issued
    assert ck.build_checksums(emu, psa) == 14
    assert emu.counters.flushes_issued - before == 14
    page = emu.load(psa, 4096)
    assert ck.verify(page).clean
    assert emu.durable(psa + 3136, 896) == reference_checksums(page)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.lists(st.tuples(st.integers(0, 3135), st.binary(min_size=1, max_size=200)),
                                         min_size=1, max_size=8))
def test_incremental_updates_equal_full_rebuild(seed, writes):
    rng = random.Random(seed)
    emu, psa = _emu_page(rng)
    ck.build_checksums(emu, psa)
    for off, data in writes:
        data = data[:3136 - off]
        old = emu.load(psa + off, len(data))
        ck.update_object_checksums(emu, psa + off, old, data)
        emu.store(psa + off, data)
    page = emu.load(psa, 4096)
    assert page[3136:4032] == reference_checksums(page)


def test_update_checksums_identity_and_composition():
    rng = random.Random(10)
    emu, psa = _emu_page(rng)
    ck.build_checksums(emu, psa)
    addr = ck.block_addr(psa, 3, 4)
    blk = emu.load(addr, 64)
    assert ck.update_checksums(emu, addr, blk, blk) == 0
    assert ck.update_object_checksums(emu, addr, blk, blk) == 0
    a, b = rng.randbytes(64), rng.randbytes(64)
    assert ck.update_checksums(emu, addr, blk, a) == 2
    ck.update_checksums(emu, addr, a, b)
    emu.store(addr, b)
    assert ck.verify(emu.load(psa, 4096)).clean


def test_correct_page_persists_repairs():
    rng = random.Random(11)
    emu, psa = _emu_page(rng)
    ck.build_checksums(emu, psa)
    emu.flush_range(psa, 3136)
    good = emu.durable(psa, 4096)
    emu.store(ck.block_addr(psa, 6, 6), rng.randbytes(64))
    emu.flush_line(ck.block_addr(psa, 6, 6))
    rep = ck.correct_page(emu, psa)
    assert rep.repaired == [(6, 6)]
    assert emu.durable(psa, 4096) == good
