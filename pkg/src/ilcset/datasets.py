"""Dataset containers and the CSV interchange format.

Rows are ``lab,operator,item_1,...,item_n`` with 1-based item indices into
the ground set; the ``lab`` column may be omitted (or constant), in which
case the file describes a pooled dataset. The universe size M and subset
size n are declared externally (CLI flags or config), never inferred from
content silently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ValidationError
from .subsets import GroundSet, Subset


@dataclass(frozen=True)
class Dataset:
    """Pooled observations: one subset per operator, no lab structure."""

    ground: GroundSet
    n: int
    observations: tuple[tuple[str, Subset], ...]

    def __post_init__(self):
        seen = set()
        for op, sub in self.observations:
            if sub.ground != self.ground:
                raise ValidationError(f"observation {op} uses a different ground set")
            if sub.cardinality != self.n:
                raise ValidationError(
                    f"observation {op} has size {sub.cardinality}, expected {self.n}"
                )
            if op in seen:
                raise ValidationError(f"duplicate operator id {op!r}")
            seen.add(op)

    @property
    def p(self) -> int:
        return len(self.observations)

    @property
    def operator_ids(self) -> tuple[str, ...]:
        return tuple(op for op, _ in self.observations)

    def masks(self) -> np.ndarray:
        return np.array([sub.mask for _, sub in self.observations], dtype=np.uint64)

    def selection_counts(self) -> np.ndarray:
        """Number of observations containing each element of the ground set."""
        counts = np.zeros(self.ground.size, dtype=np.int64)
        for _, sub in self.observations:
            for i in sub.indices:
                counts[i] += 1
        return counts


@dataclass(frozen=True)
class GroupedDataset:
    """Per-laboratory observations for the hierarchical model."""

    ground: GroundSet
    n: int
    groups: tuple[tuple[str, tuple[tuple[str, Subset], ...]], ...]

    def __post_init__(self):
        if not self.groups:
            raise ValidationError("grouped dataset requires at least one laboratory")
        seen_labs = set()
        for lab, obs in self.groups:
            if lab in seen_labs:
                raise ValidationError(f"duplicate laboratory id {lab!r}")
            seen_labs.add(lab)
            if not obs:
                raise ValidationError(f"laboratory {lab!r} has no observations")
            seen_ops = set()
            for op, sub in obs:
                if sub.ground != self.ground:
                    raise ValidationError(
                        f"observation {lab}/{op} uses a different ground set"
                    )
                if sub.cardinality != self.n:
                    raise ValidationError(
                        f"observation {lab}/{op} has size {sub.cardinality}, "
                        f"expected {self.n}"
                    )
                if op in seen_ops:
                    raise ValidationError(
                        f"duplicate operator id {op!r} in laboratory {lab!r}"
                    )
                seen_ops.add(op)

    @property
    def num_labs(self) -> int:
        return len(self.groups)

    @property
    def lab_ids(self) -> tuple[str, ...]:
        return tuple(lab for lab, _ in self.groups)

    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(obs) for _, obs in self.groups)

    def pooled(self) -> Dataset:
        """All operators pooled into one dataset (lab ids kept in the keys)."""
        flat = tuple(
            (f"{lab}:{op}", sub) for lab, obs in self.groups for op, sub in obs
        )
        return Dataset(ground=self.ground, n=self.n, observations=flat)


AnyDataset = Union[Dataset, GroupedDataset]


def _parse_row(
    row: Sequence[str], line_no: int, has_lab: bool, ground: GroundSet, n: int
) -> tuple[str, str, Subset]:
    expected = (2 if has_lab else 1) + n
    if len(row) != expected:
        raise ValidationError(
            f"line {line_no}: expected {expected} fields, got {len(row)}"
        )
    lab = row[0].strip() if has_lab else ""
    op = row[1].strip() if has_lab else row[0].strip()
    items = row[2:] if has_lab else row[1:]
    mask = 0
    for item in items:
        try:
            idx = int(item)
        except ValueError:
            raise ValidationError(f"line {line_no}: item {item!r} is not an integer") from None
        if not 1 <= idx <= ground.size:
            raise ValidationError(
                f"line {line_no}: item {idx} outside the universe 1..{ground.size}"
            )
        bit = 1 << (idx - 1)
        if mask & bit:
            raise ValidationError(f"line {line_no}: duplicate item {idx} in selection")
        mask |= bit
    return lab, op, Subset(ground, mask)


def ingest(
    path: str | Path,
    universe_size: int,
    subset_size: int,
    labels: Sequence[str] | None = None,
) -> AnyDataset:
    """Read a CSV file into a Dataset or GroupedDataset.

    The file is grouped when it carries a ``lab`` column with more than one
    distinct value; otherwise the observations are pooled.
    """
    ground = GroundSet(universe_size, tuple(labels) if labels else ())
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty file") from None
    cols = [c.strip().lower() for c in header]
    if not cols or cols[0] not in ("lab", "operator"):
        raise ValidationError(
            f"{path}: header must start with 'lab,operator,...' or 'operator,...'"
        )
    has_lab = cols[0] == "lab"
    if has_lab and (len(cols) < 2 or cols[1] != "operator"):
        raise ValidationError(f"{path}: second header column must be 'operator'")

    rows: list[tuple[str, str, Subset]] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        rows.append(_parse_row(row, line_no, has_lab, ground, subset_size))
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    labs = {lab for lab, _, _ in rows}
    if not has_lab or len(labs) == 1:
        return Dataset(
            ground=ground,
            n=subset_size,
            observations=tuple((op, sub) for _, op, sub in rows),
        )
    order: list[str] = []
    by_lab: dict[str, list[tuple[str, Subset]]] = {}
    for lab, op, sub in rows:
        if lab not in by_lab:
            by_lab[lab] = []
            order.append(lab)
        by_lab[lab].append((op, sub))
    return GroupedDataset(
        ground=ground,
        n=subset_size,
        groups=tuple((lab, tuple(by_lab[lab])) for lab in order),
    )


def write_csv(data: AnyDataset, path: str | Path) -> None:
    """Emit the CSV form; re-ingesting reproduces the dataset exactly."""
    path = Path(path)
    n = data.n
    header = ["lab", "operator"] + [f"item_{j + 1}" for j in range(n)]
    lines = [",".join(header)]
    if isinstance(data, Dataset):
        rows = [("lab1", op, sub) for op, sub in data.observations]
    else:
        rows = [(lab, op, sub) for lab, obs in data.groups for op, sub in obs]
    for lab, op, sub in rows:
        items = [str(i + 1) for i in sub.indices]
        lines.append(",".join([lab, op] + items))
    path.write_text("\n".join(lines) + "\n")
