"""Exact combinatorial kernels on bitmask-encoded subsets.

Subsets of a finite ground set (at most 64 elements) are stored as integer
bitmasks, so intersections, complements and overlap counts are O(1) word
operations. This module also provides the counting machinery used by the
hierarchical marginal likelihood: membership partitions of the ground set
with respect to a list of reference subsets, bounded integer compositions,
and their splitting into low/high parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import BudgetExceededError, ValidationError

MAX_GROUND_SIZE = 64
DEFAULT_ENUMERATION_BUDGET = 10_000_000
DEFAULT_MAX_GROUP_SIZE = 8


@dataclass(frozen=True)
class GroundSet:
    """The finite universe of labeled items subsets are drawn from."""

    size: int
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not 2 <= self.size <= MAX_GROUND_SIZE:
            raise ValidationError(
                f"ground set size must be in [2, {MAX_GROUND_SIZE}], got {self.size}"
            )
        if not self.labels:
            object.__setattr__(
                self, "labels", tuple(str(i + 1) for i in range(self.size))
            )
        if len(self.labels) != self.size:
            raise ValidationError(
                f"expected {self.size} labels, got {len(self.labels)}"
            )
        if len(set(self.labels)) != self.size:
            raise ValidationError("ground set labels must be pairwise distinct")

    @property
    def full_mask(self) -> int:
        return (1 << self.size) - 1

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown item label {label!r}") from None


@dataclass(frozen=True)
class Subset:
    """A fixed-size subset of a ground set, encoded as a bitmask."""

    ground: GroundSet
    mask: int

    def __post_init__(self):
        if self.mask <= 0 or self.mask > self.ground.full_mask:
            raise ValidationError(f"mask {self.mask:#x} out of range for ground set")

    @classmethod
    def from_indices(cls, ground: GroundSet, indices: Iterable[int]) -> "Subset":
        mask = 0
        for i in indices:
            if not 0 <= i < ground.size:
                raise ValidationError(f"index {i} out of range for ground set")
            bit = 1 << i
            if mask & bit:
                raise ValidationError(f"duplicate index {i} in subset")
            mask |= bit
        return cls(ground, mask)

    @classmethod
    def from_labels(cls, ground: GroundSet, labels: Iterable[str]) -> "Subset":
        return cls.from_indices(ground, (ground.label_index(s) for s in labels))

    @property
    def cardinality(self) -> int:
        return self.mask.bit_count()

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.ground.size) if self.mask >> i & 1)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.ground.labels[i] for i in self.indices)

    def complement_mask(self) -> int:
        return self.ground.full_mask & ~self.mask

    def __repr__(self):
        return "{" + ",".join(self.labels) + "}"


def overlap_outside(x: Subset, a: Subset) -> int:
    """Number of elements of ``x`` lying outside ``a`` (the Hamming count k)."""
    if x.ground != a.ground:
        raise ValidationError("subsets drawn from different ground sets")
    if x.cardinality != a.cardinality:
        raise ValidationError(
            f"cardinality mismatch: {x.cardinality} vs {a.cardinality}"
        )
    return (x.mask & a.complement_mask()).bit_count()


def count_at_distance(n: int, big_n: int, k: int) -> int:
    """Number of size-n subsets with exactly k elements outside the center.

    Equals C(n, k) * C(N, k); zero when k exceeds n or N.
    """
    if k < 0:
        raise ValidationError("k must be non-negative")
    return math.comb(n, k) * math.comb(big_n, k)


def iter_subset_masks(m: int, n: int) -> Iterator[int]:
    """All n-bit masks over m positions in ascending integer order.

    Successor computation is Gosper's hack, so the stream is deterministic
    and restartable from any mask.
    """
    if n == 0:
        yield 0
        return
    limit = 1 << m
    v = (1 << n) - 1
    while v < limit:
        yield v
        c = v & -v
        r = v + c
        v = (((r ^ v) >> 2) // c) | r


def enumerate_subsets(
    ground: GroundSet, n: int, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> Iterator[Subset]:
    """Stream every size-n subset of the ground set exactly once.

    Refuses upfront when C(M, n) exceeds ``budget``: the caller is asking
    for an enumeration that would not finish in reasonable time.
    """
    m = ground.size
    if not 1 <= n <= m:
        raise ValidationError(f"subset size {n} invalid for ground of size {m}")
    total = math.comb(m, n)
    if total > budget:
        raise BudgetExceededError(
            f"C({m},{n}) = {total} subsets exceeds enumeration budget {budget}"
        )
    for mask in iter_subset_masks(m, n):
        yield Subset(ground, mask)


# ---------------------------------------------------------------------------
# Membership partitions (alpha cells) and bounded compositions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaPartitionCounts:
    """Cell sizes of the membership partition of the ground set.

    Cell ``I`` (a p-bit mask) holds the elements belonging to exactly the
    reference subsets indexed by the bits of ``I``. Cells of size zero are
    omitted from ``counts``.
    """

    p: int
    m: int
    counts: Mapping[int, int]

    def count(self, cell: int) -> int:
        return self.counts.get(cell, 0)


@dataclass(frozen=True)
class CompositionVector:
    """An allocation of n items across partition cells, keyed by cell mask.

    Zero entries may be omitted. ``p`` is the number of reference subsets,
    so keys range over p-bit masks.
    """

    p: int
    entries: Mapping[int, int] = field(default_factory=dict)

    def get(self, cell: int) -> int:
        return self.entries.get(cell, 0)

    def total(self) -> int:
        return sum(self.entries.values())

    def marginals(self) -> tuple[int, ...]:
        """Per-reference sums r_j = sum of entries over cells containing j."""
        r = [0] * self.p
        for cell, s in self.entries.items():
            for j in range(self.p):
                if cell >> j & 1:
                    r[j] += s
        return tuple(r)


def alpha_cell_masks(masks: Sequence[int], m: int) -> dict[int, int]:
    """Bitmask of each nonempty membership cell, keyed by the p-bit pattern."""
    cells: dict[int, int] = {}
    for w in range(m):
        pattern = 0
        for j, y in enumerate(masks):
            pattern |= (y >> w & 1) << j
        cells[pattern] = cells.get(pattern, 0) | (1 << w)
    return cells


def alpha_partition(
    subsets: Sequence[Subset], max_p: int = DEFAULT_MAX_GROUP_SIZE
) -> AlphaPartitionCounts:
    """Partition the ground set by membership pattern across ``subsets``."""
    if not subsets:
        raise ValidationError("alpha partition requires at least one subset")
    ground = subsets[0].ground
    if any(s.ground != ground for s in subsets):
        raise ValidationError("subsets drawn from different ground sets")
    p = len(subsets)
    if p > max_p:
        raise BudgetExceededError(
            f"{p} reference subsets exceed the group-size budget {max_p} "
            f"(cost grows as 2^p)"
        )
    cells = alpha_cell_masks([s.mask for s in subsets], ground.size)
    counts = {cell: mask.bit_count() for cell, mask in cells.items()}
    return AlphaPartitionCounts(p=p, m=ground.size, counts=counts)


def bounded_compositions(
    bounds: Sequence[int], total: int
) -> list[tuple[int, ...]]:
    """All vectors s with 0 <= s[i] <= bounds[i] and sum(s) == total.

    Recursive generation with suffix-capacity pruning; lexicographic order.
    """
    k = len(bounds)
    suffix = [0] * (k + 1)
    for i in range(k - 1, -1, -1):
        suffix[i] = suffix[i + 1] + bounds[i]
    out: list[tuple[int, ...]] = []
    cur = [0] * k

    def rec(i: int, rem: int) -> None:
        if i == k:
            out.append(tuple(cur))
            return
        lo = max(0, rem - suffix[i + 1])
        hi = min(bounds[i], rem)
        for v in range(lo, hi + 1):
            cur[i] = v
            rec(i + 1, rem - v)
        cur[i] = 0

    if 0 <= total <= suffix[0]:
        rec(0, total)
    return out


def encode_marginals(r: Sequence[int], n: int) -> int:
    """Pack a marginal tuple into a fixed-radix integer, base n + 1."""
    key = 0
    for j in reversed(range(len(r))):
        key = key * (n + 1) + r[j]
    return key


def decode_marginals(key: int, p: int, n: int) -> tuple[int, ...]:
    r = []
    for _ in range(p):
        key, digit = divmod(key, n + 1)
        r.append(digit)
    return tuple(r)


def generate_compositions(
    alpha: AlphaPartitionCounts, n: int
) -> dict[int, list[CompositionVector]]:
    """Every way to allocate n items across the partition cells, grouped
    by the encoded marginal tuple (sum over cells containing each reference).

    The group stored under ``encode_marginals(r, n)`` is exactly the set of
    feasible per-cell counts for subsets Y with #(Y & Y_j) = r_j for all j.
    """
    cell_order = sorted(alpha.counts)
    bounds = [alpha.counts[c] for c in cell_order]
    grouped: dict[int, list[CompositionVector]] = {}
    for s in bounded_compositions(bounds, n):
        vec = CompositionVector(
            p=alpha.p,
            entries={c: v for c, v in zip(cell_order, s) if v > 0},
        )
        key = encode_marginals(vec.marginals(), n)
        grouped.setdefault(key, []).append(vec)
    return grouped


def composition_weight(alpha: AlphaPartitionCounts, s: CompositionVector) -> int:
    """Number of subsets realizing the per-cell counts ``s``."""
    w = 1
    for cell, v in s.entries.items():
        w *= math.comb(alpha.count(cell), v)
    return w


def c_n_count(subsets: Sequence[Subset], r: Sequence[int]) -> int:
    """Number of size-n subsets Y with #(Y & Y_j) = r_j for every j.

    Computed from the membership partition: the sum over feasible per-cell
    allocations of the product of per-cell binomials. For a single
    reference subset this equals C(n, r) * C(N, n - r).
    """
    if len(r) != len(subsets):
        raise ValidationError("one overlap target per reference subset required")
    n = subsets[0].cardinality
    if any(ri < 0 or ri > n for ri in r):
        raise ValidationError(f"overlap targets must lie in [0, {n}]")
    alpha = alpha_partition(subsets)
    groups = generate_compositions(alpha, n)
    key = encode_marginals(r, n)
    return sum(composition_weight(alpha, s) for s in groups.get(key, ()))


def split_composition(
    s: CompositionVector, alpha_with_a: AlphaPartitionCounts | None = None
) -> dict[int, list[CompositionVector]]:
    """Split each cell count of ``s`` between a new (p+1)-th reference set
    and its complement, bucketed by the total q routed to the new set.

    Each output vector stilde satisfies stilde_I + stilde_{I|hi} = s_I for
    every p-bit cell I, where hi is bit p. When ``alpha_with_a`` is given
    (a partition over p+1 references), splits that overfill any refined
    cell are dropped; otherwise all prod(s_I + 1) splits are returned.
    """
    hi = 1 << s.p
    cells = sorted(s.entries)
    buckets: dict[int, list[CompositionVector]] = {}

    def rec(i: int, low: dict[int, int], high: dict[int, int], q: int) -> None:
        if i == len(cells):
            vec = CompositionVector(p=s.p + 1, entries={**low, **high})
            buckets.setdefault(q, []).append(vec)
            return
        cell = cells[i]
        for h in range(s.entries[cell] + 1):
            lo = s.entries[cell] - h
            if alpha_with_a is not None:
                if lo > alpha_with_a.count(cell) or h > alpha_with_a.count(cell | hi):
                    continue
            nlow = dict(low)
            nhigh = dict(high)
            if lo:
                nlow[cell] = lo
            if h:
                nhigh[cell | hi] = h
            rec(i + 1, nlow, nhigh, q + h)

    rec(0, {}, {}, 0)
    return buckets
