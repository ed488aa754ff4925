"""Slow, obviously-correct references for the attention variants.

``dense_attention`` evaluates exact scaled dot-product attention row by
row. The two emulations literally materialize each row of the n x n
hierarchical score matrix, repeated coarse columns included, then apply
the row softmax and value combination. Everything here is written with
plain element loops in float64 and shares no numerical code with the fast
path; these functions define ground truth for the equivalence tolerances.

The emulations do feed the global FLOP/byte counters (bookkeeping only,
so the benchmark can compare their cost against the fast path): 2d FLOPs
per score, 5 per softmax column, 2d per value column, and 8n bytes per
materialized score row.
"""

from __future__ import annotations

import math

import numpy as np

from .downsampler import DownsampleWeights
from .hierarchy import HierarchyConfig, level_of
from .tensor_core import counters

__all__ = [
    "DoubleCoverageError",
    "dense_attention",
    "dense_fma_emulation",
    "dense_fma_linear_emulation",
]


class DoubleCoverageError(ValueError):
    """A pair is owned by several levels and no duplicate resolution was chosen."""


def _as_lists(*arrays: np.ndarray) -> list[list[list[float]]]:
    return [np.asarray(a, dtype=np.float64).tolist() for a in arrays]


def _dot(a: list[float], b: list[float]) -> float:
    acc = 0.0
    for x, y in zip(a, b):
        acc += x * y
    return acc


def _softmax(scores: list[float]) -> list[float]:
    m = max(scores)
    exps = [math.exp(s - m) for s in scores]
    z = sum(exps)
    return [e / z for e in exps]


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mode: str = "bidirectional") -> np.ndarray:
    """Exact attention, one row at a time: softmax(q_i . K^T / sqrt(d)) V."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    ql, kl, vl = _as_lists(q, k, v)
    n, d = q.shape
    inv = 1.0 / math.sqrt(d)
    out = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        limit = i + 1 if mode == "causal" else n
        scores = [_dot(ql[i], kl[j]) * inv for j in range(limit)]
        probs = _softmax(scores)
        row = [0.0] * d
        for j, pj in enumerate(probs):
            vj = vl[j]
            for c in range(d):
                row[c] += pj * vj[c]
        out[i] = row
    return out


def _naive_downsample(x: list[list[float]], kernel: np.ndarray) -> list[list[float]]:
    """Loop reference for the strided grouped conv: (n, d) -> (n*p/w, d)."""
    d, p, w = kernel.shape
    kern = np.asarray(kernel, dtype=np.float64).tolist()
    n = len(x)
    groups = n // w
    out = []
    for g in range(groups):
        for s in range(p):
            row = [0.0] * d
            for c in range(d):
                acc = 0.0
                for t in range(w):
                    acc += kern[c][s][t] * x[g * w + t][c]
                row[c] = acc
            out.append(row)
    return out


def _levels_data(
    x: list[list[float]], weights: DownsampleWeights, stream: str, config: HierarchyConfig
) -> dict[int, list[list[float]]]:
    data = {}
    for lv in config.levels:
        data[lv] = _naive_downsample(x, weights.kernel(stream, lv))
        counters.add(flops=2 * config.n * config.p * len(x[0]))
    return data


def _row_owners(i: int, j: int, config: HierarchyConfig, duplicate_handling: str | None):
    owners = level_of(i, j, config)
    if owners == ("masked",):
        return ()
    if len(owners) == 0:
        raise AssertionError(f"pair ({i}, {j}) owned by no level; invalid hierarchy")
    if len(owners) > 1 and duplicate_handling is None:
        raise DoubleCoverageError(
            f"pair ({i}, {j}) is owned by levels {owners}; pass duplicate_handling='expand' "
            "to materialize one column per owning level"
        )
    return owners


def dense_fma_emulation(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: DownsampleWeights,
    config: HierarchyConfig,
    duplicate_handling: str | None = None,
) -> np.ndarray:
    """Materialize each row of the hierarchical matrix and apply one joint softmax.

    Fine pairs score q_i . k_j; a pair owned by coarse level l scores
    q_i . K_l[floor(j*p/m_l)], and the value column is the matching summary
    row. Under the literal partition rule a pair may be owned by several
    levels; that is an error unless ``duplicate_handling='expand'``
    explicitly asks for one column per owning level.
    """
    ql, kl, vl = _as_lists(q, k, v)
    n, d = q.shape
    inv = 1.0 / math.sqrt(d)
    k_levels = _levels_data(kl, weights, "k", config)
    v_levels = _levels_data(vl, weights, "v", config)

    out = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        scores: list[float] = []
        values: list[list[float]] = []
        qi = ql[i]
        for j in range(n):
            for lv in _row_owners(i, j, config, duplicate_handling):
                if lv == 0:
                    scores.append(_dot(qi, kl[j]) * inv)
                    values.append(vl[j])
                else:
                    idx = (j * config.p) // config.group_size(lv)
                    scores.append(_dot(qi, k_levels[lv][idx]) * inv)
                    values.append(v_levels[lv][idx])
        probs = _softmax(scores)
        row = [0.0] * d
        for pj, vj in zip(probs, values):
            for c in range(d):
                row[c] += pj * vj[c]
        out[i] = row
        counters.add(flops=(2 * d + 5 + 2 * d) * len(scores), nbytes=8 * n)
    return out


def dense_fma_linear_emulation(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: DownsampleWeights,
    config: HierarchyConfig,
    duplicate_handling: str | None = None,
) -> np.ndarray:
    """Per-level softmax emulation with downsampled queries.

    Coarse pairs of row i score against the query summary of i's sub-chunk;
    in causal mode the summary of the previous group is used instead, since
    a group's own summaries mix tokens that are in the future of most of
    its rows. Every nonempty level is normalized on its own and the output
    is the sum over levels.
    """
    ql, kl, vl = _as_lists(q, k, v)
    n, d = q.shape
    inv = 1.0 / math.sqrt(d)
    k_levels = _levels_data(kl, weights, "k", config)
    v_levels = _levels_data(vl, weights, "v", config)
    q_levels = _levels_data(ql, weights, "q", config)

    out = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        per_level_cols: dict[int, list[int]] = {lv: [] for lv in range(config.L + 1)}
        for j in range(n):
            for lv in _row_owners(i, j, config, duplicate_handling):
                per_level_cols[lv].append(j)

        row = [0.0] * d
        fine_cols = per_level_cols[0]
        scores = [_dot(ql[i], kl[j]) * inv for j in fine_cols]
        probs = _softmax(scores)
        for pj, j in zip(probs, fine_cols):
            vj = vl[j]
            for c in range(d):
                row[c] += pj * vj[c]
        counters.add(flops=(4 * d + 5) * len(fine_cols), nbytes=8 * len(fine_cols))

        for lv in config.levels:
            cols = per_level_cols[lv]
            if not cols:
                continue
            size = config.group_size(lv)
            block = i // size
            sub = ((i % size) * config.p) // size
            qblock = block - 1 if config.mode == "causal" else block
            qi = q_levels[lv][qblock * config.p + sub]
            scores = [_dot(qi, k_levels[lv][(j * config.p) // size]) * inv for j in cols]
            probs = _softmax(scores)
            for pj, j in zip(probs, cols):
                vj = v_levels[lv][(j * config.p) // size]
                for c in range(d):
                    row[c] += pj * vj[c]
            counters.add(flops=(4 * d + 5) * len(cols), nbytes=8 * len(cols))
        out[i] = row
    return out
