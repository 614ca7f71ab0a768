"""Hierarchical inference: each laboratory has a latent center drawn around
the global consensus, and its operators draw around the lab center.

The latent lab centers and lab dispersions are collapsed exactly: the lab
marginal likelihood is a sum over q of the per-subset mass at Hamming count
n - q times a precomputed weight D(q, s-bar), where s-bar is the vector of
overlap counts between the candidate consensus and the membership cells of
the lab's observations. D is filled by enumerating bounded compositions and
their two-way splits (the new reference set being the consensus candidate),
with the lab-level dispersion integrals memoized on the multiset of Hamming
counts they involve.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .datasets import GroupedDataset
from .distributions import DispersionFamily, FamilyKind, default_prior
from .errors import BudgetExceededError, NumericalError, ValidationError
from .numerics import GridPosterior, gauss_legendre_01, log_mean_exp, make_rng, unit_grid
from .subsets import (
    DEFAULT_ENUMERATION_BUDGET,
    DEFAULT_MAX_GROUP_SIZE,
    GroundSet,
    Subset,
    alpha_cell_masks,
    bounded_compositions,
    count_at_distance,
    iter_subset_masks,
)

DTABLE_MAGIC = b"ILCDTBL1"
DTABLE_VERSION = 1
DEFAULT_QUAD_NODES = 256
DEFAULT_MAX_COMPOSITIONS = 500_000


class IntegralCache:
    """Memoized lab-level dispersion integrals.

    value(ks) = integral of prod_j e_u(k_j) g(u) du over the lab prior,
    evaluated with fixed Gauss-Legendre nodes. The integrand is symmetric
    in the k_j, so entries are keyed by the sorted tuple.
    """

    def __init__(self, family: DispersionFamily, prior=None, nodes: int = DEFAULT_QUAD_NODES):
        self.family = family
        self.prior = prior or default_prior(family)
        self.nodes = nodes
        x, w = gauss_legendre_01(nodes)
        u = x * family.domain_upper
        self._log_weights = np.log(w * family.domain_upper) + np.asarray(
            self.prior.log_density(u)
        )
        self._log_pmf = family.log_pmf(u)  # (nodes, n+1)
        self._store: dict[tuple[int, ...], float] = {}

    def value(self, ks: Sequence[int]) -> float:
        key = tuple(sorted(int(k) for k in ks))
        got = self._store.get(key)
        if got is None:
            acc = self._log_weights.copy()
            for k in key:
                acc = acc + self._log_pmf[:, k]
            got = float(np.exp(logsumexp(acc)))
            self._store[key] = got
        return got

    def config_signature(self) -> str:
        fam = self.family
        return f"{fam.kind.value}:{fam.n}:{fam.big_n}:{fam.u_max}:{self.nodes}:{self.prior!r}"


@dataclass
class LabTable:
    """Per-laboratory block of the collapsed-likelihood table."""

    lab_id: str
    p: int
    cell_patterns: tuple[int, ...]          # membership patterns, sorted
    cell_counts: np.ndarray                 # (n_cells,)
    cell_masks: np.ndarray                  # (n_cells,) uint64 element bitmasks
    skeys: np.ndarray                       # (n_s, n_cells) uint8: the S(X) vectors
    d_table: np.ndarray                     # (n+1, n_s)
    data_hash: bytes
    col_index: dict[bytes, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.col_index:
            self.col_index = {
                row.tobytes(): i for i, row in enumerate(self.skeys)
            }

    def column_of_mask(self, a_mask: int) -> int:
        counts = np.array(
            [(int(cm) & a_mask).bit_count() for cm in self.cell_masks],
            dtype=np.uint8,
        )
        try:
            return self.col_index[counts.tobytes()]
        except KeyError:
            raise NumericalError(
                f"lab {self.lab_id}: overlap counts missing from the composition index"
            ) from None

    def columns_for_masks(self, masks: np.ndarray) -> np.ndarray:
        counts = np.empty((len(masks), len(self.cell_patterns)), dtype=np.uint8)
        for c in range(len(self.cell_patterns)):
            counts[:, c] = np.bitwise_count(masks & self.cell_masks[c])
        return np.array(
            [self.col_index[row.tobytes()] for row in counts], dtype=np.int64
        )


@dataclass
class DTable:
    ground: GroundSet
    n: int
    config_signature: str
    labs: tuple[LabTable, ...]

    def lab(self, index: int) -> LabTable:
        return self.labs[index]


def _lab_data_hash(
    m: int, n: int, obs_masks: Sequence[int], config_signature: str
) -> bytes:
    h = hashlib.sha256()
    h.update(f"{m}:{n}:{config_signature}".encode())
    for mask in obs_masks:
        h.update(struct.pack("<Q", mask))
    return h.digest()


def _iter_splits(s: tuple[int, ...]):
    """All ways to split each entry of s into (low, high); yields
    (low_vector, high_vector, sum_of_high)."""
    k = len(s)
    lo = [0] * k
    hi = [0] * k

    def rec(i: int, q: int):
        if i == k:
            yield tuple(lo), tuple(hi), q
            return
        for h in range(s[i] + 1):
            lo[i] = s[i] - h
            hi[i] = h
            yield from rec(i + 1, q + h)

    yield from rec(0, 0)


def precompute_d(
    lab_id: str,
    obs_masks: Sequence[int],
    ground: GroundSet,
    n: int,
    integrals: IntegralCache,
    *,
    max_p: int = DEFAULT_MAX_GROUP_SIZE,
    max_compositions: int = DEFAULT_MAX_COMPOSITIONS,
) -> LabTable:
    """Fill D(q, s-bar) for one laboratory.

    Loops over the marginal-grouped compositions of the lab's membership
    cells; each composition is split between the candidate-consensus side
    and its complement, and every split accumulates its binomial product
    into the D column of every compatible s-bar.
    """
    p = len(obs_masks)
    if p == 0:
        raise ValidationError(f"lab {lab_id!r} has no observations")
    if p > max_p:
        raise BudgetExceededError(
            f"lab {lab_id!r} has {p} operators, above the group budget {max_p}; "
            f"split or subsample the laboratory"
        )
    m = ground.size
    big_n = m - n
    cells = alpha_cell_masks(list(obs_masks), m)
    patterns = tuple(sorted(cells))
    counts = np.array([cells[c].bit_count() for c in patterns], dtype=np.int64)
    cell_masks = np.array([cells[c] for c in patterns], dtype=np.uint64)
    n_cells = len(patterns)

    comps = bounded_compositions(counts.tolist(), n)
    if len(comps) > max_compositions:
        raise BudgetExceededError(
            f"lab {lab_id!r}: {len(comps)} compositions exceed the budget "
            f"{max_compositions}"
        )
    skeys = np.array(comps, dtype=np.uint8).reshape(len(comps), n_cells)
    n_s = len(comps)

    # group compositions by their overlap marginals r
    bit_members = [
        [j for j in range(p) if pat >> j & 1] for pat in patterns
    ]
    groups: dict[tuple[int, ...], list[tuple[int, ...]]] = {}
    for s in comps:
        r = [0] * p
        for c, v in enumerate(s):
            if v:
                for j in bit_members[c]:
                    r[j] += v
        groups.setdefault(tuple(r), []).append(s)

    comb = np.zeros((m + 1, n + 1))
    for a in range(m + 1):
        for b in range(min(a, n) + 1):
            comb[a, b] = math.comb(a, b)

    d_table = np.zeros((n + 1, n_s))
    scol = skeys.astype(np.int64)  # (n_s, n_cells)
    for r, members in groups.items():
        denom = 1.0
        for rj in r:
            denom *= count_at_distance(n, big_n, n - rj)
        g_factor = integrals.value([n - rj for rj in r]) / denom
        for s in members:
            nz = [c for c, v in enumerate(s) if v]
            for lo, hi, q in _iter_splits(tuple(s[c] for c in nz)):
                prod = np.ones(n_s)
                for t, c in enumerate(nz):
                    col = scol[:, c]
                    prod *= comb[counts[c] - col, lo[t]] * comb[col, hi[t]]
                d_table[q] += g_factor * prod

    data_hash = _lab_data_hash(m, n, obs_masks, integrals.config_signature())
    return LabTable(
        lab_id=lab_id,
        p=p,
        cell_patterns=patterns,
        cell_counts=counts,
        cell_masks=cell_masks,
        skeys=skeys,
        d_table=d_table,
        data_hash=data_hash,
    )


def build_dtable(
    data: GroupedDataset,
    integrals: IntegralCache,
    *,
    max_p: int = DEFAULT_MAX_GROUP_SIZE,
    max_compositions: int = DEFAULT_MAX_COMPOSITIONS,
    precomputed: dict[bytes, LabTable] | None = None,
    threads: int = 1,
) -> DTable:
    """Per-lab tables, reusing ``precomputed`` entries whose data hash
    matches; fresh labs are computed in a small worker pool when asked."""
    jobs: list[tuple[int, str, list[int]]] = []
    labs: list[LabTable | None] = [None] * len(data.groups)
    for i, (lab_id, obs) in enumerate(data.groups):
        masks = [sub.mask for _, sub in obs]
        if precomputed:
            key = _lab_data_hash(
                data.ground.size, data.n, masks, integrals.config_signature()
            )
            hit = precomputed.get(key)
            if hit is not None:
                labs[i] = hit
                continue
        jobs.append((i, lab_id, masks))

    def compute(job):
        i, lab_id, masks = job
        return i, precompute_d(
            lab_id, masks, data.ground, data.n, integrals,
            max_p=max_p, max_compositions=max_compositions,
        )

    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, table in pool.map(compute, jobs):
                labs[i] = table
    else:
        for job in jobs:
            i, table = compute(job)
            labs[i] = table
    return DTable(
        ground=data.ground,
        n=data.n,
        config_signature=integrals.config_signature(),
        labs=tuple(labs),
    )


def _q_mass_matrix(family: DispersionFamily, u: np.ndarray) -> np.ndarray:
    """Per-subset mass at Hamming count n - q, indexed by q; shape (len(u), n+1)."""
    return np.exp(family.log_q_matrix(u))[:, ::-1]


def group_marginal_log_likelihood(
    dtable: DTable,
    lab_index: int,
    a: Subset,
    u: float,
    family_top: DispersionFamily | None = None,
) -> float:
    """ln P(lab observations | consensus a, dispersion u), latent lab
    center and lab dispersion integrated out via the precomputed table."""
    lab = dtable.lab(lab_index)
    col = lab.column_of_mask(a.mask)
    n = dtable.n
    family_top = family_top or DispersionFamily(
        FamilyKind.FISHER, n, dtable.ground.size - n
    )
    qm = _q_mass_matrix(family_top, np.asarray([float(u)]))[0]
    return float(np.log(qm @ lab.d_table[:, col]))


# ---------------------------------------------------------------------------
# Posterior machinery
# ---------------------------------------------------------------------------


@dataclass
class TwoStageConfig:
    epsilon: float = 0.01
    n_mc: int = 1000
    cdf_grid: int = 10_000
    n_samples: int = 1000
    quad_nodes: int = DEFAULT_QUAD_NODES
    seed: int = 0
    budget: int = DEFAULT_ENUMERATION_BUDGET
    max_p: int = DEFAULT_MAX_GROUP_SIZE
    max_compositions: int = DEFAULT_MAX_COMPOSITIONS
    threads: int = 1


@dataclass
class PosteriorTwoStage:
    ground: GroundSet
    family_top: DispersionFamily
    family_lab: DispersionFamily
    lab_ids: tuple[str, ...]
    center_support: tuple[tuple[Subset, float], ...]
    u_values: np.ndarray          # (S,)
    a_masks: np.ndarray           # (S,)
    lab_center_masks: np.ndarray  # (S, L)
    lab_u_values: np.ndarray      # (S, L)
    gamma_values: np.ndarray      # (S, L)
    k_values: np.ndarray          # (S, L) deviations of lab centers from consensus
    evidence_log: float
    seed: int

    @property
    def mode(self) -> Subset:
        return self.center_support[0][0]


@dataclass(frozen=True)
class LabGammaSummary:
    lab_id: str
    gamma_mean: float
    gamma_median: float
    u_median: float
    mean_deviations_posterior_mean: float
    mean_deviations_at_median_u: float
    k_histogram: tuple[int, ...]


def gamma_statistics(posterior: PosteriorTwoStage) -> tuple[LabGammaSummary, ...]:
    """Per-lab outlier statistics: the tail mass beyond the lab center's
    deviation, summarized by both mean and median (the posterior is spread
    out, so the point estimate matters), plus the dispersion translated to
    an expected number of within-lab deviations (reported both as the
    posterior mean of the mean and as the mean at the median dispersion).
    """
    fam = posterior.family_lab
    out = []
    n = fam.n
    karr = np.arange(n + 1, dtype=float)
    for i, lab_id in enumerate(posterior.lab_ids):
        gam = posterior.gamma_values[:, i]
        u_i = posterior.lab_u_values[:, i]
        mean_of_mean = float((np.exp(fam.log_pmf(u_i)) @ karr).mean())
        med = float(np.median(u_i))
        k_hist = np.bincount(posterior.k_values[:, i], minlength=n + 1)
        out.append(
            LabGammaSummary(
                lab_id=lab_id,
                gamma_mean=float(gam.mean()),
                gamma_median=float(np.median(gam)),
                u_median=med,
                mean_deviations_posterior_mean=mean_of_mean,
                mean_deviations_at_median_u=fam.mean(med),
                k_histogram=tuple(int(x) for x in k_hist),
            )
        )
    return tuple(out)


class TwoStageModel:
    """Bundles the families, priors and precomputed tables of one analysis."""

    def __init__(
        self,
        data: GroupedDataset,
        family_top: DispersionFamily | None = None,
        family_lab: DispersionFamily | None = None,
        prior_top=None,
        prior_lab=None,
        config: TwoStageConfig | None = None,
        dtable: DTable | None = None,
        precomputed: dict[bytes, LabTable] | None = None,
    ):
        self.data = data
        self.config = config or TwoStageConfig()
        n, m = data.n, data.ground.size
        self.family_top = family_top or DispersionFamily(FamilyKind.FISHER, n, m - n)
        self.family_lab = family_lab or DispersionFamily(FamilyKind.FISHER, n, m - n)
        self.prior_top = prior_top or default_prior(self.family_top)
        self.prior_lab = prior_lab or default_prior(self.family_lab)
        self.integrals = IntegralCache(
            self.family_lab, self.prior_lab, self.config.quad_nodes
        )
        if dtable is not None:
            if dtable.config_signature != self.integrals.config_signature():
                raise ValidationError("supplied DTable was built with another config")
            self.dtable = dtable
        else:
            self.dtable = build_dtable(
                data,
                self.integrals,
                max_p=self.config.max_p,
                max_compositions=self.config.max_compositions,
                precomputed=precomputed,
                threads=self.config.threads,
            )
        self._sampler_cache: dict[tuple[int, int], "_LabSampler"] = {}

    # -- collapsed lab marginals ------------------------------------------

    def lab_log_marginals(self, u: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """ln P(lab data | A, u) for each u and lab; cols[i] indexes the
        lab's D column for the candidate center. Shape (len(u), L)."""
        qm = _q_mass_matrix(self.family_top, u)  # (U, n+1)
        out = np.empty((len(u), len(cols)))
        for i, lab in enumerate(self.dtable.labs):
            vals = qm @ lab.d_table[:, cols[i]]
            with np.errstate(divide="ignore"):
                out[:, i] = np.log(vals)
        return out

    def columns_for(self, a_mask: int) -> np.ndarray:
        return np.array(
            [lab.column_of_mask(a_mask) for lab in self.dtable.labs], dtype=np.int64
        )

    def group_marginal_log_likelihood(self, lab_index: int, a: Subset, u: float) -> float:
        lab = self.dtable.lab(lab_index)
        col = lab.column_of_mask(a.mask)
        qm = _q_mass_matrix(self.family_top, np.asarray([u]))[0]
        return float(np.log(qm @ lab.d_table[:, col]))

    # -- scan over all candidate centers ----------------------------------

    def scan_centers(self, seed_offset: str = "prior-u"):
        """Marginal likelihood estimate of each center via common prior
        dispersion draws. Returns (masks, log P_hat, per-lab columns)."""
        cfg = self.config
        m, n = self.data.ground.size, self.data.n
        total = math.comb(m, n)
        if total > cfg.budget:
            raise BudgetExceededError(
                f"C({m},{n}) = {total} centers exceed the enumeration budget {cfg.budget}"
            )
        rng = make_rng(cfg.seed, seed_offset)
        u_draws = np.asarray(self.prior_top.sample(rng, cfg.n_mc))
        masks = np.fromiter(iter_subset_masks(m, n), dtype=np.uint64, count=total)
        qm = _q_mass_matrix(self.family_top, u_draws)  # (n_mc, n+1)
        log_v = []
        cols_all = np.empty((total, len(self.dtable.labs)), dtype=np.int64)
        for i, lab in enumerate(self.dtable.labs):
            v = qm @ lab.d_table  # (n_mc, n_s)
            with np.errstate(divide="ignore"):
                log_v.append(np.log(v))
            cols_all[:, i] = lab.columns_for_masks(masks)
        logphat = np.empty(total)
        block = 4096
        for start in range(0, total, block):
            sl = slice(start, min(start + block, total))
            acc = np.zeros((len(u_draws), sl.stop - sl.start))
            for i in range(len(self.dtable.labs)):
                acc += log_v[i][:, cols_all[sl, i]]
            logphat[sl] = log_mean_exp(acc, axis=0)
        return masks, logphat, cols_all

    # -- conditional dispersion posterior ----------------------------------

    def u_grid_posterior(self, cols: np.ndarray) -> GridPosterior:
        grid = unit_grid(self.config.cdf_grid, self.family_top.domain_upper)
        log_lab = self.lab_log_marginals(grid, cols)
        log_dens = log_lab.sum(axis=1) + np.asarray(self.prior_top.log_density(grid))
        return GridPosterior.from_log_density(grid, log_dens)

    # -- lab-center sampler -------------------------------------------------

    def lab_sampler(self, lab_index: int, a_mask: int) -> "_LabSampler":
        lab = self.dtable.lab(lab_index)
        col = lab.column_of_mask(a_mask)
        key = (lab_index, col)
        hit = self._sampler_cache.get(key)
        if hit is None:
            hit = _LabSampler(self, lab_index, col)
            self._sampler_cache[key] = hit
        return hit


class _LabSampler:
    """Exact two-phase sampler of a lab center given the consensus and the
    top-level dispersion.

    Phase one draws the overlap vector (r, q) from its enumerated finite
    support; phase two draws a per-cell allocation proportional to the
    product of binomials; phase three realizes the allocation by drawing
    elements without replacement from each refined membership cell.
    """

    def __init__(self, model: TwoStageModel, lab_index: int, col: int):
        lab = model.dtable.lab(lab_index)
        self.lab = lab
        n = model.data.n
        big_n = model.data.ground.size - n
        self.n = n
        p = lab.p
        sbar = lab.skeys[col].astype(int)
        # refined cells: pattern I keeps the part outside the consensus,
        # pattern I | (1 << p) the part inside it
        bounds = []
        self.refined = []  # (original cell index, inside_consensus?)
        for c in range(len(lab.cell_patterns)):
            bounds.append(int(lab.cell_counts[c]) - sbar[c])
            self.refined.append((c, False))
        for c in range(len(lab.cell_patterns)):
            bounds.append(sbar[c])
            self.refined.append((c, True))
        pat = list(lab.cell_patterns) + [pt | (1 << p) for pt in lab.cell_patterns]
        members = [[j for j in range(p) if pt >> j & 1] for pt in pat]
        inside_bit = [(pt >> p) & 1 for pt in pat]

        comb = [[math.comb(a, b) for b in range(n + 1)] for a in range(max(bounds) + 1)]
        groups: dict[tuple[tuple[int, ...], int], list[tuple[tuple[int, ...], float]]] = {}
        for s in bounded_compositions(bounds, n):
            r = [0] * p
            q = 0
            w = 1.0
            for c, v in enumerate(s):
                w *= comb[bounds[c]][v]
                if v:
                    if inside_bit[c]:
                        q += v
                    for j in members[c]:
                        r[j] += v
            groups.setdefault((tuple(r), q), []).append((s, w))

        self.group_q = []
        self.group_base = []
        self.group_members = []
        for (r, q), entries in sorted(groups.items()):
            total_w = sum(w for _, w in entries)
            denom = 1.0
            for rj in r:
                denom *= count_at_distance(n, big_n, n - rj)
            base = (
                total_w
                * model.integrals.value([n - rj for rj in r])
                / denom
            )
            self.group_q.append(q)
            self.group_base.append(base)
            self.group_members.append(entries)
        self.group_q = np.array(self.group_q, dtype=np.int64)
        self.group_base = np.array(self.group_base)

    def marginal_given_u(self, mass_k: np.ndarray) -> float:
        """Consistency value: sum over the support of the phase-one weights;
        equals the collapsed lab marginal at the same dispersion. ``mass_k``
        is the per-subset mass of the top-level family, indexed by the
        Hamming count k."""
        return float(self.group_base @ mass_k[self.n - self.group_q])

    def sample(self, a_mask: int, mass_k: np.ndarray, rng: np.random.Generator) -> int:
        """Draw a lab-center bitmask given consensus mask and the per-count
        subset masses of the top-level dispersion (indexed by Hamming k)."""
        weights = self.group_base * mass_k[self.n - self.group_q]
        total = weights.sum()
        if not np.isfinite(total) or total <= 0:
            raise NumericalError("lab-center sampler has vanishing support")
        g = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
        g = min(g, len(weights) - 1)
        entries = self.group_members[g]
        if len(entries) == 1:
            s = entries[0][0]
        else:
            ws = np.array([w for _, w in entries])
            j = int(np.searchsorted(np.cumsum(ws), rng.random() * ws.sum(), side="right"))
            s = entries[min(j, len(entries) - 1)][0]
        # realize the allocation: draw elements without replacement per cell
        lab = self.lab
        mask = 0
        for c, v in enumerate(s):
            if not v:
                continue
            orig, inside = self.refined[c]
            cell = int(lab.cell_masks[orig])
            cell = (cell & a_mask) if inside else (cell & ~a_mask)
            elems = [i for i in range(cell.bit_length()) if cell >> i & 1]
            chosen = rng.choice(len(elems), size=v, replace=False)
            for idx in chosen:
                mask |= 1 << elems[idx]
        return mask


def two_stage_posterior(
    data: GroupedDataset,
    family_top: DispersionFamily | None = None,
    family_lab: DispersionFamily | None = None,
    prior_top=None,
    prior_lab=None,
    config: TwoStageConfig | None = None,
    dtable: DTable | None = None,
    precomputed: dict[bytes, LabTable] | None = None,
) -> PosteriorTwoStage:
    """Ancestral posterior sampling for the hierarchical model: consensus
    from its truncated marginal posterior, dispersion by grid CDF
    inversion, lab centers from the exact two-phase sampler, lab
    dispersions by grid CDF inversion of their conditional."""
    model = TwoStageModel(
        data, family_top, family_lab, prior_top, prior_lab, config, dtable, precomputed
    )
    return sample_posterior(model)


def sample_posterior(model: TwoStageModel) -> PosteriorTwoStage:
    data = model.data
    cfg = model.config
    masks, logphat, cols_all = model.scan_centers()
    total = len(masks)
    log_evidence = float(log_mean_exp(logphat))
    probs = np.exp(logphat - logsumexp(logphat))
    retained = logphat + math.log(total) > math.log(cfg.epsilon) + log_evidence
    if not retained.any():
        raise NumericalError(
            f"truncation epsilon={cfg.epsilon} removed the whole posterior support"
        )
    kept_masks = masks[retained]
    kept_probs = probs[retained]
    kept_cols = cols_all[retained]

    from .one_stage import _sorted_support

    rng = make_rng(cfg.seed, "ancestral")
    sel = rng.choice(len(kept_masks), size=cfg.n_samples, p=kept_probs / kept_probs.sum())

    n = data.n
    num_labs = data.num_labs
    s_count = cfg.n_samples
    u_values = np.empty(s_count)
    a_out = np.empty(s_count, dtype=np.uint64)
    lab_centers = np.empty((s_count, num_labs), dtype=np.uint64)
    lab_u = np.empty((s_count, num_labs))
    gammas = np.empty((s_count, num_labs))
    k_vals = np.empty((s_count, num_labs), dtype=np.int64)

    grid_lab = unit_grid(cfg.cdf_grid, model.family_lab.domain_upper)
    log_pmf_lab_grid = model.family_lab.log_pmf(grid_lab)  # (G, n+1)
    log_prior_lab_grid = np.asarray(model.prior_lab.log_density(grid_lab))
    u_post_cache: dict[int, GridPosterior] = {}
    u_i_cache: dict[tuple[int, tuple[int, ...]], GridPosterior] = {}

    obs_masks_per_lab = [
        np.array([sub.mask for _, sub in obs], dtype=np.uint64)
        for _, obs in data.groups
    ]

    for s_i in range(s_count):
        idx = int(sel[s_i])
        a_mask = int(kept_masks[idx])
        a_out[s_i] = kept_masks[idx]
        gp = u_post_cache.get(idx)
        if gp is None:
            gp = model.u_grid_posterior(kept_cols[idx])
            u_post_cache[idx] = gp
        u = float(gp.sample(rng, 1)[0])
        u_values[s_i] = u
        mass_k = np.exp(model.family_top.log_q_matrix(np.asarray([u])))[0]
        pmf_top = np.exp(model.family_top.log_pmf(np.asarray([u])))[0]
        tail_top = np.cumsum(pmf_top[::-1])[::-1]
        full_mask = data.ground.full_mask
        for i in range(num_labs):
            sampler = model.lab_sampler(i, a_mask)
            ai_mask = sampler.sample(a_mask, mass_k, rng)
            lab_centers[s_i, i] = ai_mask
            k_i = (ai_mask & ~a_mask & full_mask).bit_count()
            k_vals[s_i, i] = k_i
            gammas[s_i, i] = tail_top[k_i]
            ks = tuple(
                sorted(
                    int(x)
                    for x in (
                        n
                        - np.bitwise_count(
                            obs_masks_per_lab[i] & np.uint64(ai_mask)
                        ).astype(int)
                    )
                )
            )
            gpi = u_i_cache.get((i, ks))
            if gpi is None:
                log_dens = log_prior_lab_grid.copy()
                for k in ks:
                    log_dens = log_dens + log_pmf_lab_grid[:, k]
                gpi = GridPosterior.from_log_density(grid_lab, log_dens)
                u_i_cache[(i, ks)] = gpi
            lab_u[s_i, i] = float(gpi.sample(rng, 1)[0])

    return PosteriorTwoStage(
        ground=data.ground,
        family_top=model.family_top,
        family_lab=model.family_lab,
        lab_ids=data.lab_ids,
        center_support=_sorted_support(data.ground, kept_masks, kept_probs),
        u_values=u_values,
        a_masks=a_out,
        lab_center_masks=lab_centers,
        lab_u_values=lab_u,
        gamma_values=gammas,
        k_values=k_vals,
        evidence_log=log_evidence,
        seed=cfg.seed,
    )


def two_stage_evidence(
    data: GroupedDataset,
    family_top: DispersionFamily | None = None,
    family_lab: DispersionFamily | None = None,
    prior_top=None,
    prior_lab=None,
    config: TwoStageConfig | None = None,
    dtable: DTable | None = None,
) -> float:
    model = TwoStageModel(data, family_top, family_lab, prior_top, prior_lab, config, dtable)
    _, logphat, _ = model.scan_centers()
    return float(log_mean_exp(logphat))


@dataclass(frozen=True)
class BayesFactorResult:
    log_bf: float
    log_evidence_hierarchical: float
    log_evidence_pooled: float
    interpretation: str


def _kass_raftery_band(log_bf: float) -> str:
    two_ln = 2.0 * log_bf
    if two_ln <= 0:
        return "negative (pooled model favored)"
    if two_ln < 2:
        return "not worth more than a bare mention"
    if two_ln < 6:
        return "positive"
    if two_ln < 10:
        return "strong"
    return "very strong"


def bayes_factor(
    data: GroupedDataset,
    family_top: DispersionFamily | None = None,
    family_lab: DispersionFamily | None = None,
    prior_top=None,
    prior_lab=None,
    config: TwoStageConfig | None = None,
    dtable: DTable | None = None,
) -> BayesFactorResult:
    """Log evidence ratio of the hierarchical model over the pooled model
    (all operators merged, one-stage)."""
    from .one_stage import estimate_evidence

    cfg = config or TwoStageConfig()
    log_hier = two_stage_evidence(
        data, family_top, family_lab, prior_top, prior_lab, cfg, dtable
    )
    n, m = data.n, data.ground.size
    fam = family_top or DispersionFamily(FamilyKind.FISHER, n, m - n)
    log_pooled = estimate_evidence(
        data.pooled(),
        fam,
        prior_top or default_prior(fam),
        n_mc=cfg.n_mc,
        seed=cfg.seed,
        budget=cfg.budget,
    )
    log_bf = log_hier - log_pooled
    return BayesFactorResult(
        log_bf=log_bf,
        log_evidence_hierarchical=log_hier,
        log_evidence_pooled=log_pooled,
        interpretation=_kass_raftery_band(log_bf),
    )


# ---------------------------------------------------------------------------
# DTable binary cache
# ---------------------------------------------------------------------------


def save_dtable(dtable: DTable, path) -> None:
    """Versioned binary dump; loading validates per-lab data hashes."""
    out = bytearray()
    out += DTABLE_MAGIC
    out += struct.pack("<IHH", DTABLE_VERSION, dtable.ground.size, dtable.n)
    sig = dtable.config_signature.encode()
    out += struct.pack("<I", len(sig)) + sig
    out += struct.pack("<I", len(dtable.labs))
    for lab in dtable.labs:
        lab_id = lab.lab_id.encode()
        out += struct.pack("<I", len(lab_id)) + lab_id
        out += lab.data_hash
        n_cells = len(lab.cell_patterns)
        out += struct.pack("<HHI", lab.p, n_cells, lab.skeys.shape[0])
        out += np.array(lab.cell_patterns, dtype="<u2").tobytes()
        out += lab.cell_counts.astype("<i8").tobytes()
        out += lab.cell_masks.astype("<u8").tobytes()
        out += lab.skeys.astype("u1").tobytes()
        out += lab.d_table.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_dtable(path, expected_signature: str | None = None) -> dict[bytes, LabTable] | None:
    """Read a cache file back into per-lab tables keyed by data hash.

    Returns None (cache unusable) on any format or signature mismatch; the
    caller recomputes and may overwrite the file.
    """
    try:
        raw = open(path, "rb").read()
    except OSError:
        return None
    off = 0

    def take(k):
        nonlocal off
        chunk = raw[off : off + k]
        off += k
        if len(chunk) != k:
            raise ValueError("truncated dtable cache")
        return chunk

    try:
        if take(len(DTABLE_MAGIC)) != DTABLE_MAGIC:
            return None
        version, m, n = struct.unpack("<IHH", take(8))
        if version != DTABLE_VERSION:
            return None
        (sig_len,) = struct.unpack("<I", take(4))
        sig = take(sig_len).decode()
        if expected_signature is not None and sig != expected_signature:
            return None
        (num_labs,) = struct.unpack("<I", take(4))
        tables: dict[bytes, LabTable] = {}
        for _ in range(num_labs):
            (id_len,) = struct.unpack("<I", take(4))
            lab_id = take(id_len).decode()
            data_hash = take(32)
            p, n_cells, n_s = struct.unpack("<HHI", take(8))
            patterns = tuple(np.frombuffer(take(2 * n_cells), dtype="<u2").tolist())
            counts = np.frombuffer(take(8 * n_cells), dtype="<i8").copy()
            cell_masks = np.frombuffer(take(8 * n_cells), dtype="<u8").copy()
            skeys = (
                np.frombuffer(take(n_s * n_cells), dtype="u1")
                .reshape(n_s, n_cells)
                .copy()
            )
            d_table = (
                np.frombuffer(take(8 * (n + 1) * n_s), dtype="<f8")
                .reshape(n + 1, n_s)
                .copy()
            )
            tables[data_hash] = LabTable(
                lab_id=lab_id,
                p=p,
                cell_patterns=patterns,
                cell_counts=counts,
                cell_masks=cell_masks,
                skeys=skeys,
                d_table=d_table,
                data_hash=data_hash,
            )
        return tables
    except (ValueError, struct.error):
        return None
