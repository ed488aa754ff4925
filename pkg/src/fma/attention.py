"""The hierarchical attention operator, loglinear and linear variants.

``forward`` computes exact scores in a local band plus learned group
summaries at geometrically coarser levels, pushes all of a row's entries
through one joint softmax in which each coarse score carries a
multiplicity weight equal to its conceptual repeat count, and gathers
values per level. ``forward_linear`` additionally downsamples the queries
and normalizes every level independently, so rows sharing a query summary
share their coarse contribution. ``backward`` is the exact adjoint of
whichever forward produced the tape.

Both operators work on one (batch, head) slice; an outer driver maps over
slices. Scores are scaled by 1/sqrt(d) with d the per-head width. In
causal mode, future fine entries are masked per element, future coarse
groups are excluded wholesale by the interaction lists, and the linear
variant scores against the previous block's query summary, because a
block's own summary mixes tokens that are in the future of most of its
rows.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .downsampler import DownsampleWeights, downsample, downsample_backward
from .hierarchy import HierarchyConfig, InteractionList, build, level_of
from .kernels import (
    BandLayout,
    FarFieldLayout,
    band_layout,
    far_incoming,
    far_incoming_backward,
    far_layout,
    far_outgoing,
    far_outgoing_backward,
    local_incoming,
    local_incoming_backward,
    local_outgoing,
    local_outgoing_backward,
)
from .tensor_core import (
    NonFiniteError,
    matmul,
    matmul_backward,
    softmax_row,
    softmax_row_backward,
)

__all__ = [
    "CompactScores",
    "AttentionTape",
    "AttentionGrads",
    "ErrorBoundReport",
    "forward",
    "forward_linear",
    "backward",
    "dense_forward",
    "error_bound_diagnostic",
]


@functools.lru_cache(maxsize=None)
def _band(n: int, m: int, offsets: tuple[int, ...]) -> BandLayout:
    return band_layout(n, m, offsets)


@functools.lru_cache(maxsize=None)
def _far(
    config: HierarchyConfig, ilist: InteractionList, level: int, linear: bool
) -> FarFieldLayout:
    return far_layout(config, ilist, level, linear=linear)


@dataclass
class CompactScores:
    """The hierarchical score matrix stored without repetition.

    ``fine`` holds each row's band scores; ``coarse[level]`` holds p scores
    per listed group, per query row (loglinear variant) or per query-summary
    slot (linear variant). ``multiplicities`` gives the conceptual repeat
    count of each coarse entry. Validity masks mark slots that exist
    (sequence edges clip windows); the keep mask additionally drops
    causally masked fine entries.
    """

    fine: np.ndarray
    fine_valid: np.ndarray
    fine_keep: np.ndarray
    coarse: dict[int, np.ndarray] = field(default_factory=dict)
    coarse_valid: dict[int, np.ndarray] = field(default_factory=dict)
    multiplicities: dict[int, int] = field(default_factory=dict)

    def entry_count(self) -> int:
        """Number of stored score entries (valid slots, fine plus coarse)."""
        total = int(self.fine_valid.sum())
        for valid in self.coarse_valid.values():
            total += int(valid.sum())
        return total


@dataclass
class AttentionTape:
    """Activations saved by a forward pass for the matching backward pass."""

    variant: str
    config: HierarchyConfig | None
    ilist: InteractionList | None
    band: BandLayout | None
    far_layouts: dict[int, FarFieldLayout]
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    k_levels: dict[int, np.ndarray]
    v_levels: dict[int, np.ndarray]
    q_levels: dict[int, np.ndarray]
    weights: DownsampleWeights | None
    probs: CompactScores | None
    row_max: np.ndarray | None
    row_norm: np.ndarray | None
    scale: float
    slot_index: dict[int, np.ndarray] = field(default_factory=dict)
    dense_probs: np.ndarray | None = None
    mode: str = "bidirectional"


@dataclass
class AttentionGrads:
    """Gradients for the operator inputs and all downsampling kernels."""

    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dweights: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)


@dataclass
class ErrorBoundReport:
    """One row's score deviation against its a-priori bound.

    Norm conventions: the row deviation is a 1 x n matrix, so its induced
    L1 norm (max absolute column sum) is the largest absolute entry; the
    query factor is likewise the largest absolute query coordinate; each
    key deviation is the plain coordinate sum of absolute values.
    """

    row: int
    actual: float
    bound: float
    per_level_max_dev: dict[int, float]

    def holds(self, tol: float = 1e-12) -> bool:
        return self.actual <= self.bound + tol


def _check_inputs(q: np.ndarray, k: np.ndarray, v: np.ndarray, n: int) -> None:
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q/k/v shapes must match and be 2D, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[0] != n:
        raise ValueError(f"inputs have {q.shape[0]} rows but hierarchy expects n={n}")
    for name, arr in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"attention input {name} contains non-finite values")


def _fine_keep(band: BandLayout, mode: str) -> tuple[np.ndarray, np.ndarray]:
    valid = band.valid_rows()
    if mode == "causal":
        cols = band.col_of_rows()
        keep = valid & (cols <= np.arange(band.n)[:, None])
    else:
        keep = valid
    return valid, keep


def forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: DownsampleWeights,
    config: HierarchyConfig,
    ilist: InteractionList | None = None,
) -> tuple[np.ndarray, AttentionTape]:
    """Loglinear variant: one joint softmax over band scores and all coarse levels."""
    _check_inputs(q, k, v, config.n)
    if ilist is None:
        _, ilist = build(config.n, config.m, config.p, config.mode, config.partition_rule)
    n, d = q.shape
    scale = 1.0 / np.sqrt(d)

    band = _band(n, config.m, config.band_offsets)
    k_levels = {lv: downsample(k, lv, weights, "k") for lv in config.levels}
    v_levels = {lv: downsample(v, lv, weights, "v") for lv in config.levels}
    far_layouts = {lv: _far(config, ilist, lv, False) for lv in config.levels}

    zf = local_outgoing(q, k, band)
    fine_valid, fine_keep = _fine_keep(band, config.mode)
    zc = {lv: far_outgoing(q, k_levels[lv], far_layouts[lv]) for lv in config.levels}

    parts = [zf] + [zc[lv] for lv in config.levels]
    keeps = [fine_keep] + [far_layouts[lv].valid_rows() for lv in config.levels]
    weight_vec = np.concatenate(
        [np.ones(band.width, dtype=q.dtype)]
        + [
            np.full(far_layouts[lv].width, config.multiplicity(lv), dtype=q.dtype)
            for lv in config.levels
        ]
    )
    zcat = np.concatenate(parts, axis=1) * q.dtype.type(scale)
    keep_cat = np.concatenate(keeps, axis=1)
    probs_cat = softmax_row(zcat, keep_cat, weight_vec)

    # Normalizer per row, for diagnostics (same max-subtraction as the softmax).
    shifted = np.where(keep_cat, zcat, -np.inf)
    row_max = shifted.max(axis=1)
    row_norm = (np.exp(np.where(keep_cat, zcat - row_max[:, None], -np.inf)) * weight_vec).sum(axis=1)

    offset = band.width
    coarse_probs: dict[int, np.ndarray] = {}
    for lv in config.levels:
        w = far_layouts[lv].width
        coarse_probs[lv] = probs_cat[:, offset : offset + w]
        offset += w

    probs = CompactScores(
        fine=probs_cat[:, : band.width],
        fine_valid=fine_valid,
        fine_keep=fine_keep,
        coarse=coarse_probs,
        coarse_valid={lv: far_layouts[lv].valid_rows() for lv in config.levels},
        multiplicities={lv: config.multiplicity(lv) for lv in config.levels},
    )

    out = local_incoming(probs.fine, v, band)
    for lv in config.levels:
        out = out + far_incoming(coarse_probs[lv], v_levels[lv], far_layouts[lv])

    tape = AttentionTape(
        variant="fma",
        config=config,
        ilist=ilist,
        band=band,
        far_layouts=far_layouts,
        q=q,
        k=k,
        v=v,
        k_levels=k_levels,
        v_levels=v_levels,
        q_levels={},
        weights=weights,
        probs=probs,
        row_max=row_max,
        row_norm=row_norm,
        scale=scale,
        mode=config.mode,
    )
    return out, tape


def _linear_slot_index(config: HierarchyConfig, level: int) -> np.ndarray:
    """Token row -> coarse slot (block * p + sub-chunk) for the linear variant."""
    size = config.group_size(level)
    i = np.arange(config.n)
    return (i // size) * config.p + ((i % size) * config.p) // size


def forward_linear(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: DownsampleWeights,
    config: HierarchyConfig,
    ilist: InteractionList | None = None,
) -> tuple[np.ndarray, AttentionTape]:
    """Linear variant: downsampled queries, one softmax per level.

    The fine level normalizes over each row's kept band entries; every
    coarse level normalizes over its own listed groups (with multiplicity
    weights), so each nonempty level's coefficients sum to 1 per row and
    the output is the sum of the per-level results. Levels with no listed
    group for a row contribute zero.
    """
    _check_inputs(q, k, v, config.n)
    if ilist is None:
        _, ilist = build(config.n, config.m, config.p, config.mode, config.partition_rule)
    n, d = q.shape
    scale = 1.0 / np.sqrt(d)

    band = _band(n, config.m, config.band_offsets)
    zf = local_outgoing(q, k, band)
    fine_valid, fine_keep = _fine_keep(band, config.mode)
    pf = softmax_row(zf * q.dtype.type(scale), fine_keep)
    out = local_incoming(pf, v, band)

    k_levels = {lv: downsample(k, lv, weights, "k") for lv in config.levels}
    v_levels = {lv: downsample(v, lv, weights, "v") for lv in config.levels}
    q_levels = {lv: downsample(q, lv, weights, "q") for lv in config.levels}
    far_layouts = {lv: _far(config, ilist, lv, True) for lv in config.levels}

    coarse_probs: dict[int, np.ndarray] = {}
    coarse_valid: dict[int, np.ndarray] = {}
    slot_index: dict[int, np.ndarray] = {}
    for lv in config.levels:
        lay = far_layouts[lv]
        zc = far_outgoing(q_levels[lv], k_levels[lv], lay)
        valid = lay.valid_rows()
        pc = np.zeros_like(zc)
        nonempty = valid.any(axis=1)
        if nonempty.any():
            wvec = np.full(lay.width, config.multiplicity(lv), dtype=q.dtype)
            pc[nonempty] = softmax_row(
                zc[nonempty] * q.dtype.type(scale), valid[nonempty], wvec
            )
        slot_out = far_incoming(pc, v_levels[lv], lay)
        sidx = _linear_slot_index(config, lv)
        out = out + slot_out[sidx]
        coarse_probs[lv] = pc
        coarse_valid[lv] = valid
        slot_index[lv] = sidx

    probs = CompactScores(
        fine=pf,
        fine_valid=fine_valid,
        fine_keep=fine_keep,
        coarse=coarse_probs,
        coarse_valid=coarse_valid,
        multiplicities={lv: config.multiplicity(lv) for lv in config.levels},
    )
    tape = AttentionTape(
        variant="fma-linear",
        config=config,
        ilist=ilist,
        band=band,
        far_layouts=far_layouts,
        q=q,
        k=k,
        v=v,
        k_levels=k_levels,
        v_levels=v_levels,
        q_levels=q_levels,
        weights=weights,
        probs=probs,
        row_max=None,
        row_norm=None,
        scale=scale,
        slot_index=slot_index,
        mode=config.mode,
    )
    return out, tape


def dense_forward(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mode: str = "bidirectional"
) -> tuple[np.ndarray, AttentionTape]:
    """Exact quadratic attention with a tape (the trainable dense baseline)."""
    _check_inputs(q, k, v, q.shape[0])
    n, d = q.shape
    scale = 1.0 / np.sqrt(d)
    z = matmul(q, k.T)
    keep = np.tril(np.ones((n, n), dtype=bool)) if mode == "causal" else np.ones((n, n), dtype=bool)
    probs = softmax_row(z * q.dtype.type(scale), keep)
    out = matmul(probs, v)
    tape = AttentionTape(
        variant="dense",
        config=None,
        ilist=None,
        band=None,
        far_layouts={},
        q=q,
        k=k,
        v=v,
        k_levels={},
        v_levels={},
        q_levels={},
        weights=None,
        probs=None,
        row_max=None,
        row_norm=None,
        scale=scale,
        dense_probs=probs,
        mode=mode,
    )
    return out, tape


def backward(tape: AttentionTape, upstream: np.ndarray) -> AttentionGrads:
    """Exact adjoint of the forward pass that produced ``tape``."""
    if upstream.shape != tape.q.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {tape.q.shape}")
    if tape.variant == "dense":
        return _dense_backward(tape, upstream)
    if tape.variant == "fma":
        return _fma_backward(tape, upstream)
    if tape.variant == "fma-linear":
        return _linear_backward(tape, upstream)
    raise ValueError(f"unknown tape variant {tape.variant!r}")


def _dense_backward(tape: AttentionTape, upstream: np.ndarray) -> AttentionGrads:
    probs = tape.dense_probs
    dprobs, dv = matmul_backward(upstream, probs, tape.v)
    dz = softmax_row_backward(dprobs, probs) * upstream.dtype.type(tape.scale)
    dq, dkt = matmul_backward(dz, tape.q, tape.k.T)
    return AttentionGrads(dq=dq, dk=dkt.T, dv=dv)


def _fma_backward(tape: AttentionTape, upstream: np.ndarray) -> AttentionGrads:
    config = tape.config
    band = tape.band
    probs = tape.probs
    scale_t = upstream.dtype.type(tape.scale)

    dpf, dv = local_incoming_backward(upstream, probs.fine, tape.v, band)
    dpc: dict[int, np.ndarray] = {}
    dv_levels: dict[int, np.ndarray] = {}
    for lv in config.levels:
        dpc[lv], dv_levels[lv] = far_incoming_backward(
            upstream, probs.coarse[lv], tape.v_levels[lv], tape.far_layouts[lv]
        )

    p_cat = np.concatenate([probs.fine] + [probs.coarse[lv] for lv in config.levels], axis=1)
    dp_cat = np.concatenate([dpf] + [dpc[lv] for lv in config.levels], axis=1)
    dz_cat = softmax_row_backward(dp_cat, p_cat) * scale_t

    dzf = dz_cat[:, : band.width]
    dq, dk = local_outgoing_backward(dzf, tape.q, tape.k, band)

    offset = band.width
    dweights: dict[tuple[str, int], np.ndarray] = {}
    for lv in config.levels:
        lay = tape.far_layouts[lv]
        dzc = dz_cat[:, offset : offset + lay.width]
        offset += lay.width
        dq_part, dk_level = far_outgoing_backward(dzc, tape.q, tape.k_levels[lv], lay)
        dq += dq_part
        dk_down, dwk = downsample_backward(dk_level, tape.k, lv, tape.weights, "k")
        dk += dk_down
        dweights[("k", lv)] = dwk
        dv_down, dwv = downsample_backward(dv_levels[lv], tape.v, lv, tape.weights, "v")
        dv += dv_down
        dweights[("v", lv)] = dwv
    return AttentionGrads(dq=dq, dk=dk, dv=dv, dweights=dweights)


def _linear_backward(tape: AttentionTape, upstream: np.ndarray) -> AttentionGrads:
    config = tape.config
    band = tape.band
    probs = tape.probs
    scale_t = upstream.dtype.type(tape.scale)

    dpf, dv = local_incoming_backward(upstream, probs.fine, tape.v, band)
    dzf = softmax_row_backward(dpf, probs.fine) * scale_t
    dq, dk = local_outgoing_backward(dzf, tape.q, tape.k, band)

    dweights: dict[tuple[str, int], np.ndarray] = {}
    for lv in config.levels:
        lay = tape.far_layouts[lv]
        sidx = tape.slot_index[lv]
        dslot = np.zeros((lay.num_slots, upstream.shape[1]), dtype=upstream.dtype)
        np.add.at(dslot, sidx, upstream)
        dpc, dv_level = far_incoming_backward(dslot, probs.coarse[lv], tape.v_levels[lv], lay)
        dzc = softmax_row_backward(dpc, probs.coarse[lv]) * scale_t
        dq_sum, dk_level = far_outgoing_backward(dzc, tape.q_levels[lv], tape.k_levels[lv], lay)
        dq_down, dwq = downsample_backward(dq_sum, tape.q, lv, tape.weights, "q")
        dq += dq_down
        dweights[("q", lv)] = dwq
        dk_down, dwk = downsample_backward(dk_level, tape.k, lv, tape.weights, "k")
        dk += dk_down
        dweights[("k", lv)] = dwk
        dv_down, dwv = downsample_backward(dv_level, tape.v, lv, tape.weights, "v")
        dv += dv_down
        dweights[("v", lv)] = dwv
    return AttentionGrads(dq=dq, dk=dk, dv=dv, dweights=dweights)


def error_bound_diagnostic(
    q: np.ndarray,
    k: np.ndarray,
    weights: DownsampleWeights,
    config: HierarchyConfig,
    row: int,
) -> ErrorBoundReport:
    """Compare one row's score deviation against its key-deviation bound.

    Materializes the row of both the exact and the hierarchical score
    matrix (test-time tool; n must be small). The deviation of key j on
    level l is measured against the summary whose column occupies position
    j in the repeated layout: summary floor(j*p / m_l) of j's group. The
    bound is max|q_row| times the largest such key deviation over the
    row's coarse pairs; the actual deviation can never exceed it.
    """
    if not 0 <= row < config.n:
        raise ValueError(f"row {row} out of range for n={config.n}")
    if config.partition_rule != "fmm_parity":
        raise ValueError("error bound diagnostic requires the fmm_parity partition rule")
    n, d = q.shape
    k_levels = {lv: downsample(k, lv, weights, "k") for lv in config.levels}

    actual = 0.0
    per_level: dict[int, float] = {lv: 0.0 for lv in config.levels}
    for j in range(n):
        owners = level_of(row, j, config)
        if owners == ("masked",):
            continue
        lv = owners[0]
        if lv == 0:
            continue  # fine entries are exact
        size = config.group_size(lv)
        summary = k_levels[lv][(j * config.p) // size]
        dev = float(np.abs(k[j] - summary).sum())
        per_level[lv] = max(per_level[lv], dev)
        deviation = float(abs(np.dot(q[row], k[j] - summary)))
        actual = max(actual, deviation)

    bound = float(np.max(np.abs(q[row])) * max(per_level.values(), default=0.0))
    return ErrorBoundReport(row=row, actual=actual, bound=bound, per_level_max_dev=per_level)
