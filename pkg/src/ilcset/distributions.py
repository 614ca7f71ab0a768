"""Dispersion families, Hamming-distance distributions, priors and samplers.

A dispersion family maps a scalar u to a probability mass function e_u on
{0, ..., n}; the induced distribution over size-n subsets puts mass
e_u(k) / (C(n,k) * C(N,k)) on every subset with k elements outside the
center. All likelihood arithmetic is carried out in log space.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp
from scipy.stats import beta as beta_dist

from .errors import NonTerminationError, ValidationError
from .subsets import Subset, count_at_distance, overlap_outside

REJECTION_CAP = 1_000_000


class FamilyKind(str, enum.Enum):
    FISHER = "fisher"
    BINOMIAL = "binomial"


class Monotonicity(str, enum.Enum):
    NON_INCREASING = "non-increasing"
    DECREASING = "decreasing"
    NEITHER = "neither"


@dataclass(frozen=True)
class DispersionFamily:
    """Parametric family u -> e_u of pmfs on {0, ..., n}.

    ``fisher`` is Fisher's noncentral hypergeometric law with weight
    parameter u in (0, 1]; ``binomial`` is Bin(n, u) with u in [0, u_max],
    truncated by default to u_max = N / (N + n) so the center stays the
    mode of the subset distribution.
    """

    kind: FamilyKind
    n: int
    big_n: int
    u_max: float | None = None

    def __post_init__(self):
        if self.n < 1 or self.big_n < 1:
            raise ValidationError("family requires n >= 1 and N >= 1")
        kind = FamilyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is FamilyKind.BINOMIAL:
            if self.n > self.big_n:
                raise ValidationError(
                    "binomial family requires n <= N (otherwise the subset "
                    "distribution does not normalize)"
                )
            cap = self.big_n / (self.big_n + self.n)
            u_max = cap if self.u_max is None else self.u_max
            if not 0 < u_max <= cap + 1e-12:
                raise ValidationError(f"binomial u_max must lie in (0, {cap}]")
            object.__setattr__(self, "u_max", float(min(u_max, cap)))
        elif self.u_max is not None:
            raise ValidationError("u_max only applies to the binomial family")

    @property
    def m(self) -> int:
        return self.n + self.big_n

    @property
    def domain_upper(self) -> float:
        """Upper end of the inference domain: priors and posterior grids for
        the binomial family are truncated here, while the pmf itself is
        well-defined on all of [0, 1]."""
        return 1.0 if self.kind is FamilyKind.FISHER else self.u_max

    @property
    def k_values(self) -> np.ndarray:
        return np.arange(self.n + 1)

    def log_counts(self) -> np.ndarray:
        """ln of the number of subsets at each Hamming count k."""
        with np.errstate(divide="ignore"):
            return np.log(
                np.array(
                    [count_at_distance(self.n, self.big_n, k) for k in range(self.n + 1)],
                    dtype=float,
                )
            )

    def _check_u(self, u: np.ndarray) -> None:
        if np.any(u < 0):
            raise ValidationError("dispersion parameter u must be non-negative")
        if np.any(u > 1.0):
            raise ValidationError(
                f"u outside the {self.kind.value} evaluation domain [0, 1]"
            )

    def log_q_matrix(self, u: Sequence[float] | np.ndarray) -> np.ndarray:
        """ln of the per-subset mass at each k, for each u; shape (len(u), n+1).

        For the fisher family this is k*ln(u) - ln(Z(u)) directly, so the
        geometric identity between Hamming levels is exact in log space.
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        self._check_u(u)
        n = self.n
        karr = self.k_values.astype(float)
        out = np.full((u.size, n + 1), -np.inf)
        pos = u > 0
        with np.errstate(divide="ignore"):
            lnu = np.log(u[pos])
        if self.kind is FamilyKind.FISHER:
            lncnt = self.log_counts()
            lt = lncnt[None, :] + karr[None, :] * lnu[:, None]
            lnz = logsumexp(lt, axis=1)
            out[pos] = karr[None, :] * lnu[:, None] - lnz[:, None]
            out[~pos, 0] = 0.0
        else:
            lnbin = np.array([math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1) for k in range(n + 1)])
            lncnt = self.log_counts()
            with np.errstate(divide="ignore"):
                ln1mu = np.log1p(-u[pos])
            full = u[pos] == 1.0
            lp = lnbin[None, :] + karr[None, :] * lnu[:, None]
            lp[~full] += (n - karr[None, :]) * ln1mu[~full, None]
            lp[full] = -np.inf
            lp[full, n] = 0.0
            out[pos] = lp - lncnt[None, :]
            out[~pos, 0] = 0.0
        return out

    def log_pmf(self, u: float | np.ndarray) -> np.ndarray:
        """ln e_u(k) for k = 0..n; shape (len(u), n+1) or (n+1,) for scalar u."""
        scalar = np.isscalar(u)
        lq = self.log_q_matrix(u)
        out = lq + self.log_counts()[None, :]
        # point masses carry no count factor
        u_arr = np.atleast_1d(np.asarray(u, dtype=float))
        out[u_arr == 0] = -np.inf
        out[u_arr == 0, 0] = 0.0
        if self.kind is FamilyKind.BINOMIAL:
            out[u_arr == 1.0] = -np.inf
            out[u_arr == 1.0, self.n] = 0.0
        return out[0] if scalar else out

    def pmf(self, u: float) -> np.ndarray:
        return np.exp(self.log_pmf(u))

    def mean(self, u: float) -> float:
        """Expected Hamming count sum_k k * e_u(k)."""
        return float(self.k_values @ self.pmf(u))


def fisher_nch_pmf(u: float, family: DispersionFamily) -> np.ndarray:
    if family.kind is not FamilyKind.FISHER:
        raise ValidationError("fisher_nch_pmf requires a fisher family")
    return family.pmf(u)


def binomial_pmf(u: float, family: DispersionFamily) -> np.ndarray:
    if family.kind is not FamilyKind.BINOMIAL:
        raise ValidationError("binomial_pmf requires a binomial family")
    return family.pmf(u)


def dispersion_mean(u: float, family: DispersionFamily) -> float:
    return family.mean(u)


@dataclass(frozen=True)
class HammingModel:
    """A center subset plus a dispersion value: one subset distribution."""

    center: Subset
    u: float
    family: DispersionFamily

    def __post_init__(self):
        if self.center.cardinality != self.family.n:
            raise ValidationError("center cardinality does not match family n")
        if self.center.ground.size != self.family.m:
            raise ValidationError("ground set size does not match family n + N")
        self.family._check_u(np.asarray([self.u], dtype=float))


def hamming_log_pmf(model: HammingModel, x: Subset) -> float:
    """ln P(X) under the model; -inf where the point mass excludes X."""
    k = overlap_outside(x, model.center)
    return float(model.family.log_q_matrix([model.u])[0, k])


def check_hamming_monotone(model: HammingModel | None = None, *,
                           family: DispersionFamily | None = None,
                           u: float | None = None) -> Monotonicity:
    """Exact monotonicity verdict of the subset pmf in the Hamming count.

    The pmf depends on a subset only through k, so comparing the per-k
    levels over the attainable range k <= min(n, N) settles Definition-2
    status exactly.
    """
    if model is not None:
        family, u = model.family, model.u
    assert family is not None and u is not None
    kmax = min(family.n, family.big_n)
    lq = family.log_q_matrix([u])[0, : kmax + 1]
    diffs = np.diff(lq)
    if np.all(diffs < 0):
        return Monotonicity.DECREASING
    if np.all(diffs <= 0):
        return Monotonicity.NON_INCREASING
    return Monotonicity.NEITHER


@dataclass(frozen=True)
class ModePropertyReport:
    """Exact check of the binomial-family mode/monotonicity guarantees."""

    u: float
    unique_mode_premise: bool        # u < N / (N + n)
    unique_mode_holds: bool
    decreasing_premise: bool         # u <= 1/2 and n <= N/2
    decreasing_holds: bool


def binomial_mode_property(family: DispersionFamily, u: float) -> ModePropertyReport:
    if family.kind is not FamilyKind.BINOMIAL:
        raise ValidationError("mode property check applies to the binomial family")
    kmax = min(family.n, family.big_n)
    lq = family.log_q_matrix([u])[0, : kmax + 1]
    unique_mode = bool(np.all(lq[0] > lq[1:])) if kmax >= 1 else True
    decreasing = bool(np.all(np.diff(lq) < 0))
    return ModePropertyReport(
        u=u,
        unique_mode_premise=u < family.big_n / (family.big_n + family.n),
        unique_mode_holds=unique_mode,
        decreasing_premise=u <= 0.5 and family.n <= family.big_n / 2,
        decreasing_holds=decreasing,
    )


# ---------------------------------------------------------------------------
# Exact samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BernoulliPair:
    """Per-element inclusion probabilities for the rejection sampler.

    p1 applies to elements of the center, p2 to the rest. Conditioning the
    independent-inclusion draw on hitting size n yields the fisher-family
    subset law with u = odds(p2) / odds(p1).
    """

    p1: float
    p2: float

    def __post_init__(self):
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1):
            raise ValidationError("inclusion probabilities must lie in [0, 1]")

    @property
    def u(self) -> float:
        if self.p1 == 0:
            return math.inf
        if self.p2 == 0 or self.p1 == 1:
            return 0.0
        if self.p2 == 1:
            return math.inf
        return self.p2 * (1 - self.p1) / (self.p1 * (1 - self.p2))


def calibrate_pair(u: float, n: int, big_n: int) -> BernoulliPair:
    """Pick (p1, p2) with odds(p2)/odds(p1) = u and mean draw size n.

    Centering the unconditional size on n keeps the rejection sampler's
    acceptance probability away from zero for every u in (0, 1].
    """
    if not 0 <= u <= 1:
        raise ValidationError("calibration requires u in [0, 1]")
    if u == 0:
        return BernoulliPair(1.0, 0.0)

    def p2_of(p1: float) -> float:
        odds = u * p1 / (1 - p1)
        return odds / (1 + odds)

    def size_gap(p1: float) -> float:
        return n * p1 + big_n * p2_of(p1) - n

    p1 = brentq(size_gap, 1e-12, 1 - 1e-12)
    return BernoulliPair(float(p1), float(p2_of(p1)))


def sample_fisher_subsets(
    a: Subset,
    pair: BernoulliPair,
    size: int,
    rng: np.random.Generator,
    max_iterations: int = REJECTION_CAP,
    batch: int = 1024,
) -> list[Subset]:
    """Rejection sampler: independent per-element inclusion, retry until
    the draw has exactly n elements. Raises after ``max_iterations``
    rejected passes (degenerate probability pairs never terminate).
    """
    ground = a.ground
    m, n = ground.size, a.cardinality
    probs = np.where(
        np.array([(a.mask >> i) & 1 for i in range(m)], dtype=bool),
        pair.p1,
        pair.p2,
    )
    weights = (1 << np.arange(m, dtype=np.uint64)).astype(object)
    out: list[Subset] = []
    trials = 0
    while len(out) < size:
        if trials > max_iterations:
            raise NonTerminationError(
                f"rejection sampler exceeded {max_iterations} iterations "
                f"(p1={pair.p1}, p2={pair.p2})"
            )
        hits = rng.random((batch, m)) < probs[None, :]
        trials += batch
        ok = hits.sum(axis=1) == n
        for row in np.nonzero(ok)[0]:
            masks = int((hits[row] * weights).sum())
            out.append(Subset(ground, masks))
            if len(out) == size:
                break
    return out


def sample_fisher_subset(
    a: Subset,
    pair: BernoulliPair,
    rng: np.random.Generator,
    max_iterations: int = REJECTION_CAP,
) -> Subset:
    return sample_fisher_subsets(a, pair, 1, rng, max_iterations, batch=64)[0]


class NumericalPoolError(RuntimeError):
    """Draw-without-replacement pool exhausted (requires n <= N for u near 1)."""

    def __init__(self, requested: int, available: int):
        super().__init__(
            f"cannot draw {requested} distinct elements from a pool of {available}"
        )


def sample_binomial_subsets(
    a: Subset, u: float, size: int, rng: np.random.Generator
) -> list[Subset]:
    """n repetitions of: flip Bernoulli(u); on success draw an unused
    element of the complement uniformly, otherwise an unused element of
    the center.
    """
    if not 0 <= u <= 1:
        raise ValidationError("binomial sampler requires u in [0, 1]")
    ground = a.ground
    n = a.cardinality
    inside = list(a.indices)
    outside = [i for i in range(ground.size) if not (a.mask >> i) & 1]
    out: list[Subset] = []
    for _ in range(size):
        flips = rng.random(n) < u
        k = int(flips.sum())
        if k > len(outside) or n - k > len(inside):
            raise NumericalPoolError(k, len(outside))
        chosen_out = rng.choice(len(outside), size=k, replace=False)
        chosen_in = rng.choice(len(inside), size=n - k, replace=False)
        mask = 0
        for j in chosen_out:
            mask |= 1 << outside[j]
        for j in chosen_in:
            mask |= 1 << inside[j]
        out.append(Subset(ground, mask))
    return out


def sample_binomial_subset(a: Subset, u: float, rng: np.random.Generator) -> Subset:
    return sample_binomial_subsets(a, u, 1, rng)[0]


# ---------------------------------------------------------------------------
# Priors on the dispersion parameter
# ---------------------------------------------------------------------------

_SERIES_CUTOFF = 1e-4
# g(1 + eps) = sum_m (-1)^m * 2(m+1) / ((m+3)(m+2)) * eps^m
_SERIES_COEFS = [2 * (m + 1) / ((m + 3) * (m + 2)) * (-1) ** m for m in range(6)]


def prior_density_u(u):
    """Density of the dispersion prior induced by a uniform law on the
    probability-pair triangle: g(u) = (4(1-u) + 2(u+1) ln u) / (u-1)^3.

    The removable singularity at u = 1 (value 1/3) is bridged by a series
    branch for |u - 1| < 1e-4; the closed form cancels catastrophically
    there, so a surrounding band is evaluated in extended precision to
    keep the two branches continuous at the switch point.
    """
    scalar = np.isscalar(u)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u <= 0) or np.any(u > 1):
        raise ValidationError("prior density defined on (0, 1]")
    out = np.empty_like(u)
    eps = u - 1.0
    near = np.abs(eps) < _SERIES_CUTOFF
    band = ~near & (np.abs(eps) < 1e-2)
    far = ~near & ~band
    if np.any(far):
        uf = u[far]
        out[far] = (4 * (1 - uf) + 2 * (uf + 1) * np.log(uf)) / (uf - 1) ** 3
    if np.any(band):
        ub = u[band].astype(np.longdouble)
        val = (4 * (1 - ub) + 2 * (ub + 1) * np.log(ub)) / (ub - 1) ** 3
        out[band] = val.astype(float)
    if np.any(near):
        e = eps[near]
        acc = np.zeros_like(e)
        for c in reversed(_SERIES_COEFS):
            acc = acc * e + c
        out[near] = acc
    return float(out[0]) if scalar else out


def prior_log_density_u(u) -> np.ndarray:
    return np.log(prior_density_u(u))


def sample_prior_u(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw from the triangle prior: two uniforms sorted into p2 <= p1,
    mapped through u = odds(p2) / odds(p1).
    """
    a = rng.random(size)
    b = rng.random(size)
    p1 = np.maximum(a, b)
    p2 = np.minimum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = p2 * (1 - p1) / (p1 * (1 - p2))
    return np.where(p1 == 0, 1.0, u)


@dataclass(frozen=True)
class TrianglePrior:
    """Pushforward of the uniform triangle law; the fisher-family default."""

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return sample_prior_u(rng, size)

    def log_density(self, u) -> np.ndarray:
        return prior_log_density_u(u)


@dataclass(frozen=True)
class TruncatedBetaPrior:
    """Beta(a, b) truncated to [0, upper]; the binomial-family default."""

    a: float = 1.0
    b: float = 1.0
    upper: float = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cap = beta_dist.cdf(self.upper, self.a, self.b)
        return beta_dist.ppf(rng.random(size) * cap, self.a, self.b)

    def log_density(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if np.any(u < 0) or np.any(u > self.upper + 1e-12):
            raise ValidationError(f"prior support is [0, {self.upper}]")
        cap = beta_dist.cdf(self.upper, self.a, self.b)
        return beta_dist.logpdf(u, self.a, self.b) - math.log(cap)


def default_prior(family: DispersionFamily):
    if family.kind is FamilyKind.FISHER:
        return TrianglePrior()
    return TruncatedBetaPrior(upper=family.u_max)
