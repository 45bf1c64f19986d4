"""Two-dimensional checksums over a 4 KB page.

A page holds a 7x7 matrix of 64-byte data blocks.  Column ``c`` is the
contiguous 448-byte run at ``psa + c*448`` and row ``r`` is the r-th block of
every column.  Behind the data sit seven consistency checksums (one per
column) and seven correlation checksums (one per row).  A checksum block is
the lane-wise sum, modulo 2**64, of the blocks it covers, where a block is
read as eight little-endian 64-bit lanes.  The last 64 bytes of the page hold
a protection tag.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError

PAGE_SIZE = 4096
BLOCK = 64
MATRIX_N = 8
MATRIX_M = 8
DATA_COLS = MATRIX_N - 1
DATA_ROWS = MATRIX_M - 1
DATA_BYTES = DATA_COLS * DATA_ROWS * BLOCK          # 3136
CHECKSUM_BYTES = (DATA_COLS + DATA_ROWS) * BLOCK    # 896
COLUMN_BYTES = CHECKSUM_BYTES // 2                  # 448
CONS_OFFSET = DATA_BYTES                            # 3136
CORR_OFFSET = DATA_BYTES + COLUMN_BYTES             # 3584
TAIL_OFFSET = DATA_BYTES + CHECKSUM_BYTES           # 4032
LANES = BLOCK // 8

PROTECT_TAG = b"PMTXCSUM" + bytes(BLOCK - 8)

_LANE = np.dtype("<u8")


def page_base(addr: int) -> int:
    return addr - addr % PAGE_SIZE


def _data_offset(addr: int) -> tuple[int, int]:
    offset = addr % PAGE_SIZE
    if offset >= DATA_BYTES:
        raise LayoutError(f"page offset {offset} is not in the data region")
    return addr - offset, offset


def block_position(addr: int) -> tuple[int, int]:
    """(row, column) of the data block containing ``addr``."""
    _, offset = _data_offset(addr)
    return (offset % COLUMN_BYTES) // BLOCK, offset // COLUMN_BYTES


def block_addr(psa: int, row: int, col: int) -> int:
    return psa + col * COLUMN_BYTES + row * BLOCK


def cons_addr(psa: int, col: int) -> int:
    return psa + CONS_OFFSET + col * BLOCK


def corr_addr(psa: int, row: int) -> int:
    return psa + CORR_OFFSET + row * BLOCK


def locate_consistency(addr: int) -> int:
    psa, offset = _data_offset(addr)
    return psa + CONS_OFFSET + (offset // COLUMN_BYTES) * BLOCK


def locate_correlation(addr: int) -> int:
    psa, offset = _data_offset(addr)
    return psa + CORR_OFFSET + ((offset % COLUMN_BYTES) // BLOCK) * BLOCK


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def equation_consistency(addr: int) -> int:
    """Ceiling-form locator: (ceil(off/448) - 1) * cbs + oms + psa."""
    offset = addr % PAGE_SIZE
    psa = addr - offset
    return (_ceil_div(offset, COLUMN_BYTES) - 1) * BLOCK + DATA_BYTES + psa


def equation_correlation(addr: int) -> int:
    """Ceiling-form locator for the row checksum.

    (ceil((off % 448) / cbs) - 1) * cbs + oms + cms/2 + psa
    """
    offset = addr % PAGE_SIZE
    psa = addr - offset
    return (_ceil_div(offset % COLUMN_BYTES, BLOCK) - 1) * BLOCK + DATA_BYTES + COLUMN_BYTES + psa


def locator_divergence() -> list[int]:
    """Data-region offsets where the ceiling form and floor indexing disagree."""
    return [off for off in range(DATA_BYTES)
            if equation_consistency(off) != locate_consistency(off)
            or equation_correlation(off) != locate_correlation(off)]


# -- lane arithmetic -------------------------------------------------------

def lanes(block: bytes) -> np.ndarray:
    return np.frombuffer(bytes(block), dtype=_LANE).copy()


def lane_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(_LANE, copy=False).tobytes()


def data_matrix(page: bytes) -> np.ndarray:
    """View of the data region as [column, row, lane] uint64."""
    return np.frombuffer(bytes(page[:DATA_BYTES]), dtype=_LANE).reshape(DATA_COLS, DATA_ROWS, LANES).copy()


def compute_checksums(page: bytes) -> tuple[np.ndarray, np.ndarray]:
    """(cons[col, lane], corr[row, lane]) recomputed from the data region."""
    m = data_matrix(page)
    return m.sum(axis=1, dtype=np.uint64), m.sum(axis=0, dtype=np.uint64)


def stored_checksums(page: bytes) -> tuple[np.ndarray, np.ndarray]:
    cons = np.frombuffer(bytes(page[CONS_OFFSET:CORR_OFFSET]), dtype=_LANE).reshape(DATA_COLS, LANES)
    corr = np.frombuffer(bytes(page[CORR_OFFSET:TAIL_OFFSET]), dtype=_LANE).reshape(DATA_ROWS, LANES)
    return cons.copy(), corr.copy()


def checksum_region(page: bytes) -> bytes:
    """The 896-byte checksum region that matches the page's data."""
    cons, corr = compute_checksums(page)
    return lane_bytes(cons) + lane_bytes(corr)


def is_protected(page: bytes) -> bool:
    return bytes(page[TAIL_OFFSET:TAIL_OFFSET + 8]) == PROTECT_TAG[:8]


@dataclass
class VerifyReport:
    bad_columns: set = field(default_factory=set)
    bad_rows: set = field(default_factory=set)

    @property
    def clean(self) -> bool:
        return not self.bad_columns and not self.bad_rows


@dataclass
class CorrectReport:
    corrected: int = 0
    uncorrectable: set = field(default_factory=set)
    # (row, col) of blocks whose bytes actually changed
    repaired: list = field(default_factory=list)
    checksums_rewritten: list = field(default_factory=list)


def verify(page: bytes) -> VerifyReport:
    cons, corr = compute_checksums(page)
    s_cons, s_corr = stored_checksums(page)
    return VerifyReport(
        bad_columns={int(c) for c in np.nonzero((cons != s_cons).any(axis=1))[0]},
        bad_rows={int(r) for r in np.nonzero((corr != s_corr).any(axis=1))[0]},
    )


def _peel(m: np.ndarray, s_cons: np.ndarray, s_corr: np.ndarray, suspects: set) -> int:
    """Row/column peeling on ``m`` in place; returns blocks rebuilt."""
    fixed = 0
    progress = True
    while suspects and progress:
        progress = False
        for r in range(DATA_ROWS):
            row_s = [s for s in suspects if s[0] == r]
            if len(row_s) == 1:
                _, c = row_s[0]
                m[c, r] = 0
                m[c, r] = s_corr[r] - m[:, r].sum(axis=0, dtype=np.uint64)
                suspects.discard(row_s[0])
                fixed += 1
                progress = True
        for c in range(DATA_COLS):
            col_s = [s for s in suspects if s[1] == c]
            if len(col_s) == 1:
                r, _ = col_s[0]
                m[c, r] = 0
                m[c, r] = s_cons[c] - m[c].sum(axis=0, dtype=np.uint64)
                suspects.discard(col_s[0])
                fixed += 1
                progress = True
    return fixed


def _match(m: np.ndarray, s_cons: np.ndarray, s_corr: np.ndarray, suspects: set) -> int:
    """Resolve suspects whose row and column syndromes are equal.

    A block that is the only error in both its row and its column leaves the
    same lane-wise residue in both checksums.  Pairs that match uniquely on
    both sides are repaired with that residue.
    """
    rows = {r for r, _ in suspects}
    cols = {c for _, c in suspects}
    row_syn = {r: (s_corr[r] - m[:, r].sum(axis=0, dtype=np.uint64)).tobytes() for r in rows}
    col_syn = {c: (s_cons[c] - m[c].sum(axis=0, dtype=np.uint64)).tobytes() for c in cols}
    hits = []
    for r, c in sorted(suspects):
        syn = row_syn[r]
        if syn != col_syn[c] or not any(syn):
            continue
        if sum(v == syn for v in row_syn.values()) != 1 or sum(v == syn for v in col_syn.values()) != 1:
            continue
        m[c, r] += np.frombuffer(syn, dtype=_LANE)
        hits.append((r, c))
    # the rest of a repaired row or column were suspects only by intersection
    done_r = {r for r, _ in hits}
    done_c = {c for _, c in hits}
    suspects -= {s for s in suspects if s[0] in done_r or s[1] in done_c}
    return len(hits)


def correct(page: bytearray) -> CorrectReport:
    """Repair ``page`` in place by row/column peeling.

    Suspects are the intersections of bad rows and bad columns.  A row (or
    column) holding exactly one suspect rebuilds it from its checksum minus
    the other members; repeat until nothing changes.  If peeling stalls, a
    suspect whose row and column residues agree is taken as a lone error;
    that step is kept only when the page then verifies clean.  A lone bad
    column with no bad row (or vice versa) means the checksum block itself
    is stale and it is rewritten from the data.
    """
    report = CorrectReport()
    vr = verify(page)
    if vr.clean:
        return report
    m = data_matrix(page)
    s_cons, s_corr = stored_checksums(page)
    suspects = {(r, c) for r in vr.bad_rows for c in vr.bad_columns}
    report.corrected = _peel(m, s_cons, s_corr, suspects)

    if suspects:
        trial, left = m.copy(), set(suspects)
        extra = 0
        while left:
            step = _match(trial, s_cons, s_corr, left)
            if not step:
                break
            extra += step + _peel(trial, s_cons, s_corr, left)
        clean = (np.array_equal(trial.sum(axis=1, dtype=np.uint64), s_cons)
                 and np.array_equal(trial.sum(axis=0, dtype=np.uint64), s_corr))
        if not left and clean:
            m, suspects = trial, left
            report.corrected += extra
    report.uncorrectable = suspects

    original = data_matrix(page)
    for c in range(DATA_COLS):
        for r in range(DATA_ROWS):
            if (r, c) in suspects:
                continue
            if not np.array_equal(original[c, r], m[c, r]):
                start = c * COLUMN_BYTES + r * BLOCK
                page[start:start + BLOCK] = lane_bytes(m[c, r])
                report.repaired.append((r, c))

    if not vr.bad_rows or not vr.bad_columns:
        cons, corr = compute_checksums(page)
        for c in vr.bad_columns:
            page[CONS_OFFSET + c * BLOCK:CONS_OFFSET + (c + 1) * BLOCK] = lane_bytes(cons[c])
            report.checksums_rewritten.append(("cons", c))
        for r in vr.bad_rows:
            page[CORR_OFFSET + r * BLOCK:CORR_OFFSET + (r + 1) * BLOCK] = lane_bytes(corr[r])
            report.checksums_rewritten.append(("corr", r))
    return report


def block_delta(old: bytes, new: bytes) -> np.ndarray:
    return lanes(new) - lanes(old)


# -- emulator-backed operations --------------------------------------------

def build_checksums(emu, psa: int, columns=None) -> int:
    """Recompute and persist checksums of one page; returns blocks flushed.

    ``columns`` limits which consistency checksums are rewritten; all seven
    correlation checksums are always rebuilt.
    """
    page = emu.load(psa, PAGE_SIZE)
    cons, corr = compute_checksums(page)
    cols = range(DATA_COLS) if columns is None else sorted(columns)
    flushed = 0
    for c in cols:
        emu.store(cons_addr(psa, c), lane_bytes(cons[c]))
        emu.flush_line(cons_addr(psa, c))
        flushed += 1
    for r in range(DATA_ROWS):
        emu.store(corr_addr(psa, r), lane_bytes(corr[r]))
        emu.flush_line(corr_addr(psa, r))
        flushed += 1
    return flushed


def update_checksums(emu, block_address: int, old_block: bytes, new_block: bytes) -> int:
    """Apply ``new - old`` to the block's row and column checksums.

    Returns the number of checksum blocks written and flushed (0 when the
    block did not change).
    """
    if bytes(old_block) == bytes(new_block):
        return 0
    delta = block_delta(old_block, new_block)
    flushed = 0
    for target in (locate_consistency(block_address), locate_correlation(block_address)):
        current = lanes(emu.load(target, BLOCK))
        emu.store(target, lane_bytes(current + delta))
        emu.flush_line(target)
        flushed += 1
    return flushed


def update_object_checksums(emu, addr: int, old: bytes, new: bytes) -> int:
    """Batched form of :func:`update_checksums` for one object.

    Deltas of all changed blocks are folded first so every affected
    checksum block is written and flushed once.  Returns blocks flushed.
    """
    if len(old) != len(new):
        raise LayoutError("old and new images differ in length")
    first = addr & ~(BLOCK - 1)
    span = ((addr + len(new) - 1) & ~(BLOCK - 1)) + BLOCK - first
    cur = bytearray(emu.load(first, span))
    o, n = bytearray(cur), bytearray(cur)
    o[addr - first:addr - first + len(old)] = old
    n[addr - first:addr - first + len(new)] = new
    deltas: dict[int, np.ndarray] = {}
    for i in range(0, span, BLOCK):
        if o[i:i + BLOCK] == n[i:i + BLOCK]:
            continue
        d = block_delta(o[i:i + BLOCK], n[i:i + BLOCK])
        for target in (locate_consistency(first + i), locate_correlation(first + i)):
            deltas[target] = deltas[target] + d if target in deltas else d
    for target in sorted(deltas):
        current = lanes(emu.load(target, BLOCK))
        emu.store(target, lane_bytes(current + deltas[target]))
        emu.flush_line(target)
    return len(deltas)


def verify_page(emu, psa: int) -> VerifyReport:
    return verify(emu.load(psa, PAGE_SIZE))


def correct_page(emu, psa: int) -> CorrectReport:
    """Decode one page of the emulator and persist any repaired blocks."""
    page = bytearray(emu.load(psa, PAGE_SIZE))
    report = correct(page)
    for r, c in report.repaired:
        addr = block_addr(psa, r, c)
        emu.store(addr, page[addr - psa:addr - psa + BLOCK])
        emu.flush_line(addr)
    for kind, i in report.checksums_rewritten:
        addr = cons_addr(psa, i) if kind == "cons" else corr_addr(psa, i)
        emu.store(addr, page[addr - psa:addr - psa + BLOCK])
        emu.flush_line(addr)
    return report
