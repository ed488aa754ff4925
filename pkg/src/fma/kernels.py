"""Block-structured contraction kernels for the hierarchical fast path.

Four kernels, each with a hand-derived adjoint:

* ``local_outgoing``  - fine-band scores: each query row against the key
  columns of its block window.
* ``far_outgoing``    - coarse scores: query rows against the p summaries
  of every key group listed for their block.
* ``local_incoming``  - fine value gather: band coefficients times key-band
  value rows.
* ``far_incoming``    - coarse value gather: coefficients times group
  summary rows (multiplicity weights are already folded into the
  coefficients by the attention layer).

Layouts are integer index maps precomputed once per configuration. Band
and far-field storage is row-major and contiguous per row so the softmax
over a row is a single linear sweep; slots whose column index is -1 are
out of range (sequence edges) and carry no values. The printed forward and
backward expressions this design generalizes disagree with each other by
one block offset, so every backward here is derived as the exact adjoint
of our forward and verified by finite differences and adjoint dot tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import HierarchyConfig, InteractionList
from .tensor_core import counters

__all__ = [
    "BandLayout",
    "FarFieldLayout",
    "band_layout",
    "far_layout",
    "local_outgoing",
    "local_outgoing_backward",
    "far_outgoing",
    "far_outgoing_backward",
    "local_incoming",
    "local_incoming_backward",
    "far_incoming",
    "far_incoming_backward",
]


@dataclass(frozen=True)
class BandLayout:
    """Fine-level band: per query block, a window of whole key blocks."""

    n: int
    m: int
    offsets: tuple[int, ...]
    key_cols: np.ndarray  # (num_blocks, width) int64; -1 where out of range

    @property
    def num_blocks(self) -> int:
        return self.n // self.m

    @property
    def width(self) -> int:
        return len(self.offsets) * self.m

    def valid_rows(self) -> np.ndarray:
        """(n, width) bool: which slots of each row hold a real key column."""
        per_block = self.key_cols >= 0
        return np.repeat(per_block, self.m, axis=0)

    def col_of_rows(self) -> np.ndarray:
        """(n, width) int64: key column index per slot (-1 where invalid)."""
        return np.repeat(self.key_cols, self.m, axis=0)


def band_layout(n: int, m: int, offsets: tuple[int, ...]) -> BandLayout:
    if n % m != 0:
        raise ValueError(f"block size {m} does not divide n={n}")
    nb = n // m
    width = len(offsets) * m
    key_cols = np.full((nb, width), -1, dtype=np.int64)
    for b in range(nb):
        for slot, off in enumerate(offsets):
            kb = b + off
            if 0 <= kb < nb:
                key_cols[b, slot * m : (slot + 1) * m] = np.arange(kb * m, (kb + 1) * m)
    return BandLayout(n=n, m=m, offsets=tuple(offsets), key_cols=key_cols)


@dataclass(frozen=True)
class FarFieldLayout:
    """Coarse-level layout: per query block, listed key groups at rank p.

    ``query_rows[b]`` are the rows of the query-side matrix gathered for
    block b (the block's token rows for the loglinear variant; the block's
    p summary rows for the linear variant). ``key_rows[b]`` are the rows of
    the downsampled key/value matrix, p consecutive slots per listed group.
    """

    level: int
    group_size: int
    p: int
    multiplicity: int
    query_rows: np.ndarray  # (num_blocks, rows_per_block) int64
    key_rows: np.ndarray  # (num_blocks, width) int64; -1 where absent

    @property
    def num_blocks(self) -> int:
        return self.query_rows.shape[0]

    @property
    def rows_per_block(self) -> int:
        return self.query_rows.shape[1]

    @property
    def width(self) -> int:
        return self.key_rows.shape[1]

    @property
    def num_slots(self) -> int:
        return self.num_blocks * self.rows_per_block

    def valid_rows(self) -> np.ndarray:
        """(num_slots, width) bool validity mask at row granularity."""
        per_block = self.key_rows >= 0
        return np.repeat(per_block, self.rows_per_block, axis=0)


def far_layout(
    config: HierarchyConfig,
    ilist: InteractionList,
    level: int,
    linear: bool = False,
) -> FarFieldLayout:
    """Build the far-field layout for one coarse level.

    With ``linear=True`` the query side is the downsampled query matrix:
    block b gathers its own p summary rows in bidirectional mode, and the
    previous block's in causal mode (a block's own summaries mix tokens
    from the whole block, including the future of every row but the last,
    so they cannot be used causally; the preceding block is entirely past).
    """
    size = config.group_size(level)
    nb = config.n // size
    p = config.p
    groups = ilist.coarse[level - 1]
    if len(groups) != nb:
        raise ValueError(f"interaction list for level {level} has {len(groups)} blocks, expected {nb}")
    max_groups = max((len(g) for g in groups), default=0)
    width = max_groups * p

    key_rows = np.full((nb, width), -1, dtype=np.int64)
    for b, listed in enumerate(groups):
        for gi, g in enumerate(listed):
            key_rows[b, gi * p : (gi + 1) * p] = np.arange(g * p, (g + 1) * p)

    if linear:
        query_rows = np.empty((nb, p), dtype=np.int64)
        for b in range(nb):
            qb = b - 1 if config.mode == "causal" else b
            qb = max(qb, 0)  # block 0 has an empty causal list; index kept in range
            query_rows[b] = np.arange(qb * p, (qb + 1) * p)
    else:
        query_rows = np.arange(config.n, dtype=np.int64).reshape(nb, size)

    return FarFieldLayout(
        level=level,
        group_size=size,
        p=p,
        multiplicity=size // p,
        query_rows=query_rows,
        key_rows=key_rows,
    )


def _check_2d(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")


def local_outgoing(q: np.ndarray, k: np.ndarray, layout: BandLayout) -> np.ndarray:
    """Band scores: z[i, slot] = q_i . k_col(slot) for every valid slot."""
    _check_2d("q", q)
    _check_2d("k", k)
    if q.shape[0] != layout.n or k.shape[0] != layout.n or q.shape[1] != k.shape[1]:
        raise ValueError(f"shapes {q.shape}, {k.shape} inconsistent with band layout n={layout.n}")
    d = q.shape[1]
    m = layout.m
    z = np.zeros((layout.n, layout.width), dtype=q.dtype)
    for b in range(layout.num_blocks):
        sel = layout.key_cols[b] >= 0
        cols = layout.key_cols[b, sel]
        rows = slice(b * m, (b + 1) * m)
        z[rows, sel] = q[rows] @ k[cols].T
        counters.add(flops=2 * m * cols.size * d)
    counters.add(nbytes=z.nbytes)
    return z


def local_outgoing_backward(
    dz: np.ndarray, q: np.ndarray, k: np.ndarray, layout: BandLayout
) -> tuple[np.ndarray, np.ndarray]:
    if dz.shape != (layout.n, layout.width):
        raise ValueError(f"dz shape {dz.shape} != ({layout.n}, {layout.width})")
    d = q.shape[1]
    m = layout.m
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    for b in range(layout.num_blocks):
        sel = layout.key_cols[b] >= 0
        cols = layout.key_cols[b, sel]
        rows = slice(b * m, (b + 1) * m)
        dzb = dz[rows][:, sel]
        dq[rows] += dzb @ k[cols]
        dk[cols] += dzb.T @ q[rows]
        counters.add(flops=4 * m * cols.size * d)
    counters.add(nbytes=dq.nbytes + dk.nbytes)
    return dq, dk


def local_incoming(a: np.ndarray, v: np.ndarray, layout: BandLayout) -> np.ndarray:
    """Band value gather: out_i = sum over valid slots of a[i, slot] * v_col(slot)."""
    _check_2d("a", a)
    _check_2d("v", v)
    if a.shape != (layout.n, layout.width) or v.shape[0] != layout.n:
        raise ValueError(f"shapes {a.shape}, {v.shape} inconsistent with band layout")
    d = v.shape[1]
    m = layout.m
    out = np.zeros((layout.n, d), dtype=v.dtype)
    for b in range(layout.num_blocks):
        sel = layout.key_cols[b] >= 0
        cols = layout.key_cols[b, sel]
        rows = slice(b * m, (b + 1) * m)
        out[rows] = a[rows][:, sel] @ v[cols]
        counters.add(flops=2 * m * cols.size * d)
    counters.add(nbytes=out.nbytes)
    return out


def local_incoming_backward(
    dout: np.ndarray, a: np.ndarray, v: np.ndarray, layout: BandLayout
) -> tuple[np.ndarray, np.ndarray]:
    if dout.shape != (layout.n, v.shape[1]):
        raise ValueError(f"dout shape {dout.shape} != ({layout.n}, {v.shape[1]})")
    d = v.shape[1]
    m = layout.m
    da = np.zeros_like(a)
    dv = np.zeros_like(v)
    for b in range(layout.num_blocks):
        sel = layout.key_cols[b] >= 0
        cols = layout.key_cols[b, sel]
        rows = slice(b * m, (b + 1) * m)
        da[rows, sel] = dout[rows] @ v[cols].T
        dv[cols] += a[rows][:, sel].T @ dout[rows]
        counters.add(flops=4 * m * cols.size * d)
    counters.add(nbytes=da.nbytes + dv.nbytes)
    return da, dv


def far_outgoing(q: np.ndarray, k_level: np.ndarray, layout: FarFieldLayout) -> np.ndarray:
    """Coarse scores: slot (b, r) against summary s of each listed group of block b."""
    _check_2d("q", q)
    _check_2d("k_level", k_level)
    if q.shape[1] != k_level.shape[1]:
        raise ValueError(f"q and k_level widths differ: {q.shape} vs {k_level.shape}")
    d = q.shape[1]
    rpb = layout.rows_per_block
    z = np.zeros((layout.num_slots, layout.width), dtype=q.dtype)
    for b in range(layout.num_blocks):
        sel = layout.key_rows[b] >= 0
        if not sel.any():
            continue
        krows = layout.key_rows[b, sel]
        qb = q[layout.query_rows[b]]
        z[b * rpb : (b + 1) * rpb, sel] = qb @ k_level[krows].T
        counters.add(flops=2 * rpb * krows.size * d)
    counters.add(nbytes=z.nbytes)
    return z


def far_outgoing_backward(
    dz: np.ndarray, q: np.ndarray, k_level: np.ndarray, layout: FarFieldLayout
) -> tuple[np.ndarray, np.ndarray]:
    if dz.shape != (layout.num_slots, layout.width):
        raise ValueError(f"dz shape {dz.shape} != ({layout.num_slots}, {layout.width})")
    d = q.shape[1]
    rpb = layout.rows_per_block
    dq = np.zeros_like(q)
    dk = np.zeros_like(k_level)
    for b in range(layout.num_blocks):
        sel = layout.key_rows[b] >= 0
        if not sel.any():
            continue
        krows = layout.key_rows[b, sel]
        qrows = layout.query_rows[b]
        dzb = dz[b * rpb : (b + 1) * rpb][:, sel]
        dq[qrows] += dzb @ k_level[krows]
        dk[krows] += dzb.T @ q[qrows]
        counters.add(flops=4 * rpb * krows.size * d)
    counters.add(nbytes=dq.nbytes + dk.nbytes)
    return dq, dk


def far_incoming(a: np.ndarray, v_level: np.ndarray, layout: FarFieldLayout) -> np.ndarray:
    """Coarse value gather: slot output = sum of a[slot, :] times summary rows."""
    _check_2d("a", a)
    _check_2d("v_level", v_level)
    if a.shape != (layout.num_slots, layout.width):
        raise ValueError(f"a shape {a.shape} != ({layout.num_slots}, {layout.width})")
    d = v_level.shape[1]
    rpb = layout.rows_per_block
    out = np.zeros((layout.num_slots, d), dtype=v_level.dtype)
    for b in range(layout.num_blocks):
        sel = layout.key_rows[b] >= 0
        if not sel.any():
            continue
        krows = layout.key_rows[b, sel]
        rows = slice(b * rpb, (b + 1) * rpb)
        out[rows] = a[rows][:, sel] @ v_level[krows]
        counters.add(flops=2 * rpb * krows.size * d)
    counters.add(nbytes=out.nbytes)
    return out


def far_incoming_backward(
    dout: np.ndarray, a: np.ndarray, v_level: np.ndarray, layout: FarFieldLayout
) -> tuple[np.ndarray, np.ndarray]:
    if dout.shape != (layout.num_slots, v_level.shape[1]):
        raise ValueError(f"dout shape {dout.shape} != ({layout.num_slots}, {v_level.shape[1]})")
    d = v_level.shape[1]
    rpb = layout.rows_per_block
    da = np.zeros_like(a)
    dv = np.zeros_like(v_level)
    for b in range(layout.num_blocks):
        sel = layout.key_rows[b] >= 0
        if not sel.any():
            continue
        krows = layout.key_rows[b, sel]
        rows = slice(b * rpb, (b + 1) * rpb)
        da[rows, sel] = dout[rows] @ v_level[krows].T
        dv[krows] += a[rows][:, sel].T @ dout[rows]
        counters.add(flops=4 * rpb * krows.size * d)
    counters.add(nbytes=da.nbytes + dv.nbytes)
    return da, dv
