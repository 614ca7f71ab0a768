"""Generative simulation from the pooled and hierarchical models, with
ground-truth records for benchmarking recovery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import Dataset, GroupedDataset
from .distributions import (
    DispersionFamily,
    FamilyKind,
    calibrate_pair,
    default_prior,
    sample_binomial_subsets,
    sample_fisher_subsets,
)
from .errors import ValidationError
from .numerics import make_rng
from .subsets import Subset


@dataclass
class SimulationTruth:
    """The parameters a simulated dataset was drawn from."""

    family: str
    center_labels: tuple[str, ...]
    u: float
    seed: int
    labs: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "family": self.family,
            "center": list(self.center_labels),
            "u": self.u,
            "seed": self.seed,
            "labs": self.labs,
        }


def draw_subsets(
    center: Subset,
    u: float,
    family: DispersionFamily,
    size: int,
    rng: np.random.Generator,
) -> list[Subset]:
    """Draw iid subsets centered on ``center`` with dispersion u."""
    if family.kind is FamilyKind.FISHER:
        pair = calibrate_pair(u, family.n, family.big_n)
        return sample_fisher_subsets(center, pair, size, rng)
    return sample_binomial_subsets(center, u, size, rng)


def simulate_pooled(
    center: Subset,
    u: float,
    p: int,
    family: DispersionFamily | None = None,
    seed: int = 0,
) -> tuple[Dataset, SimulationTruth]:
    ground = center.ground
    n = center.cardinality
    family = family or DispersionFamily(FamilyKind.FISHER, n, ground.size - n)
    rng = make_rng(seed, "simulate")
    subs = draw_subsets(center, u, family, p, rng)
    data = Dataset(
        ground=ground,
        n=n,
        observations=tuple((f"op{i + 1}", s) for i, s in enumerate(subs)),
    )
    truth = SimulationTruth(
        family=family.kind.value, center_labels=center.labels, u=u, seed=seed
    )
    return data, truth


def simulate_hierarchical(
    center: Subset,
    u: float,
    group_sizes: Sequence[int],
    lab_u: float | Sequence[float] | None = None,
    family_top: DispersionFamily | None = None,
    family_lab: DispersionFamily | None = None,
    seed: int = 0,
) -> tuple[GroupedDataset, SimulationTruth]:
    """Draw lab centers around the consensus, then operator subsets around
    each lab center. ``lab_u`` may be a scalar, one value per lab, or None
    to draw each lab dispersion from its prior."""
    ground = center.ground
    n = center.cardinality
    family_top = family_top or DispersionFamily(FamilyKind.FISHER, n, ground.size - n)
    family_lab = family_lab or family_top
    num_labs = len(group_sizes)
    if num_labs < 1 or any(p < 1 for p in group_sizes):
        raise ValidationError("need at least one lab, each with at least one operator")
    rng = make_rng(seed, "simulate")

    if lab_u is None:
        u_labs = np.asarray(default_prior(family_lab).sample(rng, num_labs))
    elif np.isscalar(lab_u):
        u_labs = np.full(num_labs, float(lab_u))
    else:
        u_labs = np.asarray(lab_u, dtype=float)
        if len(u_labs) != num_labs:
            raise ValidationError("one lab dispersion per lab required")

    lab_centers = draw_subsets(center, u, family_top, num_labs, rng)
    groups = []
    truth = SimulationTruth(
        family=family_top.kind.value, center_labels=center.labels, u=u, seed=seed
    )
    for i, (p_i, a_i) in enumerate(zip(group_sizes, lab_centers)):
        subs = draw_subsets(a_i, float(u_labs[i]), family_lab, p_i, rng)
        lab_id = f"lab{i + 1}"
        groups.append(
            (lab_id, tuple((f"op{j + 1}", s) for j, s in enumerate(subs)))
        )
        truth.labs.append(
            {
                "lab": lab_id,
                "center": list(a_i.labels),
                "u": float(u_labs[i]),
            }
        )
    data = GroupedDataset(ground=ground, n=n, groups=tuple(groups))
    return data, truth
