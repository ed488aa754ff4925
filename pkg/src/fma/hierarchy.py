"""Multilevel partition of the token-pair space.

Builds the tree of coarse levels over a length-n sequence and, per level,
the block interaction lists that say which key groups each query block
scores against. Level 0 is the exact band (block tridiagonal); coarse
level l groups 2**(l-1) * m tokens and, under the ``fmm_parity`` rule,
lists the children of the parent's neighbors minus the block's own
neighbors. That parity-aware rule makes the expanded index sets a disjoint,
exhaustive cover of {0..n-1}^2. The ``paper_literal`` rule instead lists
every in-range block at offset +-2 or +-3 on every level, which covers the
same pairs but double-counts some of them; it is kept as a documented mode
and its overlap is reported, never silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MODES",
    "RULES",
    "HierarchyConfig",
    "InteractionList",
    "PartitionReport",
    "build",
    "level_of",
    "partition_report",
    "config_to_text",
    "config_from_text",
]

MODES = ("bidirectional", "causal")
RULES = ("fmm_parity", "paper_literal")

#: Fine-band block offsets (key block minus query block). The causal band
#: drops the +1 block entirely instead of computing and masking it.
BAND_OFFSETS = {"bidirectional": (-1, 0, 1), "causal": (-1, 0)}

#: Coarse offsets under the parity rule: children of the parent's neighbors
#: minus the block's own neighbors.
_PARITY_OFFSETS = {0: (-2, 2, 3), 1: (-3, -2, 2)}
_LITERAL_OFFSETS = (-3, -2, 2, 3)


@dataclass(frozen=True)
class HierarchyConfig:
    """Tree shape: n tokens, fine groups of m, p summaries per group, L coarse levels."""

    n: int
    m: int
    p: int
    L: int
    mode: str
    partition_rule: str

    def group_size(self, level: int) -> int:
        """Tokens per group on coarse level ``level`` (2**(level-1) * m)."""
        if not 1 <= level <= self.L:
            raise ValueError(f"level {level} outside 1..{self.L}")
        return (2 ** (level - 1)) * self.m

    def num_groups(self, level: int) -> int:
        return self.n // self.group_size(level)

    def multiplicity(self, level: int) -> int:
        """Repeat count of each unique coarse column: group size over p."""
        return self.group_size(level) // self.p

    @property
    def levels(self) -> range:
        return range(1, self.L + 1)

    @property
    def band_offsets(self) -> tuple[int, ...]:
        return BAND_OFFSETS[self.mode]


@dataclass(frozen=True)
class InteractionList:
    """Per level, per query block: which same-level key groups are scored.

    ``coarse[l-1][b]`` is the sorted tuple of key-group indices for query
    block b on level l. Groups are always whole level-l intervals, and in
    causal mode every listed group lies strictly before the query block.
    """

    band_offsets: tuple[int, ...]
    coarse: tuple[tuple[tuple[int, ...], ...], ...]


@dataclass(frozen=True)
class PartitionReport:
    """Brute-force coverage audit of the expanded interaction lists."""

    covered_pairs: int
    double_counted_pairs: int
    uncovered_pairs: int
    masked_pairs: int
    per_level_pairs: tuple[int, ...]

    @property
    def total_pairs(self) -> int:
        return self.covered_pairs + self.uncovered_pairs + self.masked_pairs


def _validate(n: int, m: int, p: int, mode: str, partition_rule: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if partition_rule not in RULES:
        raise ValueError(f"partition_rule must be one of {RULES}, got {partition_rule!r}")
    if n < 1 or m < 1 or p < 1:
        raise ValueError(f"n, m, p must be positive, got n={n}, m={m}, p={p}")
    if n % m != 0:
        raise ValueError(f"group size m={m} does not divide n={n}")
    ratio = n // m
    if ratio & (ratio - 1) != 0:
        raise ValueError(f"n/m = {ratio} is not a power of two")
    if m % p != 0:
        raise ValueError(f"rank p={p} does not divide group size m={m}")


def _coarse_offsets(block: int, rule: str) -> tuple[int, ...]:
    if rule == "fmm_parity":
        return _PARITY_OFFSETS[block % 2]
    return _LITERAL_OFFSETS


def build(
    n: int,
    m: int,
    p: int = 1,
    mode: str = "bidirectional",
    partition_rule: str = "fmm_parity",
) -> tuple[HierarchyConfig, InteractionList]:
    """Build the tree config and per-level interaction lists.

    L = log2(n/m) - 1 coarse levels when n > 2m, else none; the coarsest
    level always has groups of size n/4. Causal mode keeps only strictly
    past key groups on coarse levels.
    """
    _validate(n, m, p, mode, partition_rule)
    ratio = n // m
    L = max(int(np.log2(ratio)) - 1, 0)
    config = HierarchyConfig(n=n, m=m, p=p, L=L, mode=mode, partition_rule=partition_rule)

    coarse: list[tuple[tuple[int, ...], ...]] = []
    for level in range(1, L + 1):
        nb = n // config.group_size(level)
        per_block: list[tuple[int, ...]] = []
        for b in range(nb):
            groups = [b + off for off in _coarse_offsets(b, partition_rule) if 0 <= b + off < nb]
            if mode == "causal":
                groups = [g for g in groups if g < b]
            per_block.append(tuple(sorted(groups)))
        coarse.append(tuple(per_block))

    return config, InteractionList(band_offsets=BAND_OFFSETS[mode], coarse=tuple(coarse))


def level_of(i: int, j: int, config: HierarchyConfig) -> tuple:
    """Owning level(s) of the (query i, key j) pair.

    Returns a tuple of owners: 0 for the fine band, l >= 1 for coarse level
    l, or ``('masked',)`` for causally excluded pairs (j > i). Under
    ``fmm_parity`` the tuple always has exactly one entry; under
    ``paper_literal`` a pair may qualify on several levels. Derived from
    the offset arithmetic directly, independently of :func:`build`.
    """
    n = config.n
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"pair ({i}, {j}) out of range for n={n}")
    if config.mode == "causal" and j > i:
        return ("masked",)

    owners: list[int] = []
    if (j // config.m) - (i // config.m) in config.band_offsets:
        owners.append(0)
    for level in config.levels:
        size = config.group_size(level)
        bi, bj = i // size, j // size
        if (bj - bi) in _coarse_offsets(bi, config.partition_rule):
            if config.mode == "causal" and bj >= bi:
                continue
            owners.append(level)
    return tuple(owners)


def partition_report(
    config: HierarchyConfig, ilist: InteractionList | None = None
) -> PartitionReport:
    """Expand every interaction list to element pairs and count ownership.

    Brute force, O(n^2 * L); intended for n up to a few thousand. In causal
    mode, pairs with j > i count as masked and are excluded from coverage.
    """
    if ilist is None:
        _, ilist = build(
            config.n, config.m, config.p, config.mode, config.partition_rule
        )
    n, m = config.n, config.m
    counts = np.zeros((n, n), dtype=np.int32)
    per_level: list[int] = []

    nb = n // m
    band = np.zeros((n, n), dtype=np.int32)
    for b in range(nb):
        for off in ilist.band_offsets:
            kb = b + off
            if 0 <= kb < nb:
                band[b * m : (b + 1) * m, kb * m : (kb + 1) * m] += 1
    if config.mode == "causal":
        band *= np.tri(n, dtype=np.int32)  # intra-block triangular masking
    counts += band
    per_level.append(int(band.sum()))

    for level in config.levels:
        size = config.group_size(level)
        lv = np.zeros((n, n), dtype=np.int32)
        for b, groups in enumerate(ilist.coarse[level - 1]):
            for g in groups:
                lv[b * size : (b + 1) * size, g * size : (g + 1) * size] += 1
        counts += lv
        per_level.append(int(lv.sum()))

    if config.mode == "causal":
        unmasked = np.tri(n, dtype=bool)
    else:
        unmasked = np.ones((n, n), dtype=bool)
    masked = int(n * n - unmasked.sum())
    covered = int(((counts >= 1) & unmasked).sum())
    double = int(((counts >= 2) & unmasked).sum())
    uncovered = int(((counts == 0) & unmasked).sum())
    return PartitionReport(
        covered_pairs=covered,
        double_counted_pairs=double,
        uncovered_pairs=uncovered,
        masked_pairs=masked,
        per_level_pairs=tuple(per_level),
    )


def config_to_text(config: HierarchyConfig) -> str:
    """Human-readable key-value block, embedded in checkpoints and CSV headers."""
    lines = [
        f"n = {config.n}",
        f"m = {config.m}",
        f"p = {config.p}",
        f"levels = {config.L}",
        f"mode = {config.mode}",
        f"partition_rule = {config.partition_rule}",
    ]
    return "\n".join(lines)


def config_from_text(text: str) -> HierarchyConfig:
    """Parse the block written by :func:`config_to_text` (levels are re-derived)."""
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    config, _ = build(
        n=int(fields["n"]),
        m=int(fields["m"]),
        p=int(fields["p"]),
        mode=fields["mode"],
        partition_rule=fields["partition_rule"],
    )
    return config
