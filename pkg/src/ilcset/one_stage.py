"""Pooled-model inference: brute force over the center support, a
Metropolis-within-Gibbs sampler, evidence estimation and posterior p-values.

The brute-force scheme estimates the marginal likelihood of every candidate
center with one common set of prior dispersion draws (common random numbers
keep the cross-center ratios stable), truncates the support at a relative
tolerance, and samples the dispersion conditional on the center by grid
inversion of its cumulative distribution function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit, logsumexp

from .datasets import Dataset
from .distributions import (
    DispersionFamily,
    FamilyKind,
    HammingModel,
    default_prior,
)
from .errors import NumericalError, ValidationError
from .numerics import GridPosterior, log_mean_exp, make_rng, unit_grid
from .subsets import (
    DEFAULT_ENUMERATION_BUDGET,
    GroundSet,
    Subset,
    iter_subset_masks,
)

SIGNAL_NONE = "none"
SIGNAL_ALERT = "alert"
SIGNAL_ACTION = "action"

DEFAULT_ALERT_THRESHOLD = 0.05
DEFAULT_ACTION_THRESHOLD = 0.005


@dataclass
class Diagnostics:
    method: str
    seed: int
    warnings: list[str] = field(default_factory=list)
    u_acceptance: float | None = None
    a_acceptance: float | None = None
    n_iterations: int | None = None
    burn_in: int | None = None
    thin: int | None = None
    n_chains: int | None = None
    n_prior_draws: int | None = None
    truncated_mass: float | None = None


@dataclass
class PosteriorOneStage:
    """Approximate joint posterior over (center, dispersion)."""

    ground: GroundSet
    family: DispersionFamily
    center_support: tuple[tuple[Subset, float], ...]
    support_std: dict[int, float] | None
    u_values: np.ndarray
    a_masks: np.ndarray
    evidence_log: float | None
    diagnostics: Diagnostics

    @property
    def samples(self) -> list[tuple[float, Subset]]:
        return [
            (float(u), Subset(self.ground, int(mask)))
            for u, mask in zip(self.u_values, self.a_masks)
        ]

    @property
    def mode(self) -> Subset:
        return self.center_support[0][0]

    def support_probability(self, mask: int) -> float:
        for sub, prob in self.center_support:
            if sub.mask == mask:
                return prob
        return 0.0


def _sorted_support(
    ground: GroundSet, masks: Iterable[int], probs: Iterable[float]
) -> tuple[tuple[Subset, float], ...]:
    # descending probability, lexicographically smallest bitmask on ties
    entries = sorted(zip(masks, probs), key=lambda t: (-t[1], t[0]))
    return tuple((Subset(ground, int(m)), float(p)) for m, p in entries)


def log_likelihood(data: Dataset, model: HammingModel) -> float:
    """Sum of per-observation log masses under the model."""
    if data.ground != model.center.ground or data.n != model.family.n:
        raise ValidationError("dataset and model dimensions do not match")
    lq = model.family.log_q_matrix([model.u])[0]
    hist = _k_histograms(
        np.array([model.center.mask], dtype=np.uint64), data.masks(), data.n
    )[0]
    active = hist > 0
    return float(hist[active] @ lq[active])


def _k_histograms(
    a_masks: np.ndarray, obs_masks: np.ndarray, n: int
) -> np.ndarray:
    """Histogram over the outside-count k of each observation, per center."""
    ov = np.bitwise_count(a_masks[:, None] & obs_masks[None, :]).astype(np.int64)
    k = n - ov
    levels = np.arange(n + 1)
    return (k[:, :, None] == levels[None, None, :]).sum(axis=1).astype(float)


def _marginal_log_liks(
    data: Dataset,
    family: DispersionFamily,
    prior,
    n_mc: int,
    seed: int,
    budget: int,
    block: int = 1 << 15,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Monte Carlo marginal log likelihood of every center in P_n.

    Returns (center masks, log P_hat(X | A), prior dispersion draws). One
    common set of prior draws is reused across all centers.
    """
    m, n = data.ground.size, data.n
    total = math.comb(m, n)
    if total > budget:
        from .errors import BudgetExceededError

        raise BudgetExceededError(
            f"C({m},{n}) = {total} centers exceed the enumeration budget {budget}"
        )
    rng = make_rng(seed, "prior-u")
    u_draws = prior.sample(rng, n_mc)
    w = family.log_q_matrix(u_draws)  # (n_mc, n+1)
    obs = data.masks()
    masks = np.fromiter(iter_subset_masks(m, n), dtype=np.uint64, count=total)
    logphat = np.empty(total)
    for start in range(0, total, block):
        chunk = masks[start : start + block]
        h = _k_histograms(chunk, obs, n) if data.p else np.zeros((len(chunk), n + 1))
        ll = h @ w.T  # (chunk, n_mc)
        logphat[start : start + len(chunk)] = log_mean_exp(ll, axis=1)
    return masks, logphat, u_draws


def _conditional_u_posterior(
    hist: np.ndarray, w_grid: np.ndarray, grid: np.ndarray, prior_log: np.ndarray
) -> GridPosterior:
    active = hist > 0
    log_dens = w_grid[:, active] @ hist[active] + prior_log
    return GridPosterior.from_log_density(grid, log_dens)


def brute_force_posterior(
    data: Dataset,
    family: DispersionFamily | None = None,
    prior=None,
    *,
    epsilon: float = 0.01,
    n_mc: int = 1000,
    cdf_grid: int = 10_000,
    n_samples: int = 1000,
    seed: int = 0,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> PosteriorOneStage:
    """Exhaustive scan of all candidate centers.

    Keeps centers whose estimated marginal likelihood exceeds epsilon times
    the evidence (relative to a uniform center prior), then draws joint
    samples: center from the truncated posterior, dispersion by inverting
    the conditional CDF on a uniform grid.
    """
    if data.p < 1:
        raise ValidationError("posterior inference requires at least one observation")
    family = family or DispersionFamily(FamilyKind.FISHER, data.n, data.ground.size - data.n)
    prior = prior or default_prior(family)
    masks, logphat, _ = _marginal_log_liks(data, family, prior, n_mc, seed, budget)
    total = len(masks)
    log_evidence = float(log_mean_exp(logphat))
    log_norm = logsumexp(logphat)
    probs = np.exp(logphat - log_norm)
    retained = logphat + math.log(total) > math.log(epsilon) + log_evidence
    if not retained.any():
        raise NumericalError(
            f"truncation epsilon={epsilon} removed the whole posterior support"
        )
    kept_masks = masks[retained]
    kept_probs = probs[retained]
    truncated_mass = float(1.0 - kept_probs.sum())

    # joint sampling: center, then dispersion | center on a grid
    rng = make_rng(seed, "posterior-draws")
    sel = rng.choice(len(kept_masks), size=n_samples, p=kept_probs / kept_probs.sum())
    grid = unit_grid(cdf_grid, family.domain_upper)
    w_grid = family.log_q_matrix(grid)
    prior_log = np.asarray(prior.log_density(grid))
    obs = data.masks()
    u_values = np.empty(n_samples)
    a_masks = np.empty(n_samples, dtype=np.uint64)
    for idx in np.unique(sel):
        slots = np.nonzero(sel == idx)[0]
        hist = _k_histograms(kept_masks[idx : idx + 1], obs, data.n)[0]
        gp = _conditional_u_posterior(hist, w_grid, grid, prior_log)
        u_values[slots] = gp.sample(rng, len(slots))
        a_masks[slots] = kept_masks[idx]

    diag = Diagnostics(
        method="brute-force",
        seed=seed,
        n_prior_draws=n_mc,
        truncated_mass=truncated_mass,
    )
    return PosteriorOneStage(
        ground=data.ground,
        family=family,
        center_support=_sorted_support(data.ground, kept_masks, kept_probs),
        support_std=None,
        u_values=u_values,
        a_masks=a_masks,
        evidence_log=log_evidence,
        diagnostics=diag,
    )


def estimate_evidence(
    data: Dataset,
    family: DispersionFamily | None = None,
    prior=None,
    *,
    n_mc: int = 1000,
    seed: int = 0,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> float:
    """Log marginal probability of the data under a uniform center prior."""
    family = family or DispersionFamily(FamilyKind.FISHER, data.n, data.ground.size - data.n)
    prior = prior or default_prior(family)
    _, logphat, _ = _marginal_log_liks(data, family, prior, n_mc, seed, budget)
    return float(log_mean_exp(logphat))


# ---------------------------------------------------------------------------
# Metropolis-within-Gibbs
# ---------------------------------------------------------------------------


def _greedy_center(counts: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n most selected elements, lexicographic tie-break."""
    order = np.lexsort((np.arange(len(counts)), -counts))
    return np.sort(order[:n])


def mcmc_posterior(
    data: Dataset,
    family: DispersionFamily | None = None,
    prior=None,
    *,
    sigma2: float = 0.5,
    n_iter: int = 1_000_000,
    burn_in: int = 100_000,
    thin: int = 46,
    n_chains: int = 30,
    seed: int = 0,
    proposal_weights: str = "counts",
    u_fixed: float | None = None,
    engine: str = "auto",
    block: int = 4096,
) -> PosteriorOneStage:
    """Metropolis-within-Gibbs sampler alternating a logit-space Gaussian
    random walk on the dispersion with a single-element replacement move on
    the center, whose proposal favors frequently selected elements
    (weight = selection count + 1, Hastings-corrected).

    All chains run in lockstep on vectorized state. ``u_fixed`` freezes the
    dispersion (targets the conditional posterior of the center), which the
    test suite uses to check detailed balance of the center move.
    """
    if data.p < 1:
        raise ValidationError("posterior inference requires at least one observation")
    if n_iter <= burn_in:
        raise ValidationError("n_iter must exceed burn_in")
    if thin < 1 or n_chains < 1:
        raise ValidationError("thin and n_chains must be positive")
    family = family or DispersionFamily(FamilyKind.FISHER, data.n, data.ground.size - data.n)
    prior = prior or default_prior(family)
    if proposal_weights not in ("counts", "flat"):
        raise ValidationError("proposal_weights must be 'counts' or 'flat'")

    m, n, p = data.ground.size, data.n, data.p
    counts = data.selection_counts().astype(float)
    w_prop = counts + 1.0 if proposal_weights == "counts" else np.ones(m)
    ln_w = np.log(w_prop)

    from .distributions import TrianglePrior

    use_fisher_path = (
        engine == "auto"
        and family.kind is FamilyKind.FISHER
        and isinstance(prior, TrianglePrior)
    )
    runner = _run_chains_fisher if use_fisher_path else _run_chains_generic
    u_rec, a_rec, acc_u, acc_a = runner(
        data, family, prior, counts, w_prop, ln_w,
        sigma2=sigma2, n_iter=n_iter, burn_in=burn_in, thin=thin,
        n_chains=n_chains, seed=seed, u_fixed=u_fixed, block=block,
    )

    u_flat = u_rec.ravel()
    a_flat = a_rec.ravel()
    uniq, freq = np.unique(a_flat, return_counts=True)
    probs = freq / len(a_flat)
    # per-chain frequencies give a dispersion estimate across repetitions
    support_std = {}
    for mask in uniq:
        per_chain = (a_rec == mask).mean(axis=0)
        support_std[int(mask)] = float(per_chain.std(ddof=1)) if n_chains > 1 else 0.0

    diag = Diagnostics(
        method="mcmc",
        seed=seed,
        u_acceptance=acc_u,
        a_acceptance=acc_a,
        n_iterations=n_iter,
        burn_in=burn_in,
        thin=thin,
        n_chains=n_chains,
    )
    for name, rate in (("u", acc_u), ("center", acc_a)):
        if rate is not None and (rate < 0.01 or rate > 0.90):
            diag.warnings.append(
                f"{name}-move acceptance rate {rate:.3f} outside [0.01, 0.90]"
            )
    return PosteriorOneStage(
        ground=data.ground,
        family=family,
        center_support=_sorted_support(data.ground, uniq, probs),
        support_std=support_std,
        u_values=u_flat,
        a_masks=a_flat,
        evidence_log=None,
        diagnostics=diag,
    )


def _chain_init(data: Dataset, counts: np.ndarray, n_chains: int):
    m, n = data.ground.size, data.n
    a0 = _greedy_center(counts, n)
    members = np.tile(a0, (n_chains, 1)).astype(np.int64)
    in_a = np.zeros((n_chains, m), dtype=bool)
    in_a[:, a0] = True
    amask = np.full(n_chains, int(np.sum(1 << a0.astype(np.uint64))), dtype=np.uint64)
    return members, in_a, amask


def _propose_o(weff: np.ndarray, unif: np.ndarray):
    """Categorical draw per row from unnormalized weights."""
    tot = weff.sum(axis=1)
    r = unif * tot
    cum = np.cumsum(weff, axis=1)
    return (cum <= r[:, None]).sum(axis=1)


_G_SERIES = [2 * (m + 1) / ((m + 3) * (m + 2)) * (-1) ** m for m in range(6)]


def _ln_g_lean(u: np.ndarray, lnu: np.ndarray, near: np.ndarray) -> np.ndarray:
    """ln of the triangle-pushforward prior density, no domain checks.

    ``near`` flags entries within 1e-4 of 1, where the closed form cancels
    catastrophically and a series takes over.
    """
    d = u - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log((4.0 - 4.0 * u + (2.0 * u + 2.0) * lnu) / (d * d * d))
    if near.any():
        e = d[near]
        acc = np.zeros_like(e)
        for coef in reversed(_G_SERIES):
            acc = acc * e + coef
        out[near] = np.log(acc)
    return out


def _run_chains_fisher(
    data, family, prior, counts, w_prop, ln_w, *,
    sigma2, n_iter, burn_in, thin, n_chains, seed, u_fixed, block,
):
    """Fast path: the fisher-family log likelihood depends on the center
    only through the total selection count of its elements, so the chain
    state is (member indices, total outside count K, dispersion). Assumes
    the triangle prior on (0, 1]; other priors route to the generic path.
    """
    m, n, p = data.ground.size, data.n, data.p
    rng = make_rng(seed, "mcmc")
    members, in_a, amask = _chain_init(data, counts, n_chains)
    c = n_chains
    rows = np.arange(c)
    sigma = math.sqrt(sigma2)
    cnt_poly = np.exp(family.log_counts())  # Z(u) = sum_k cnt_k u^k
    cs_lw = np.vstack([counts, ln_w])  # fused gather source

    def ln_z(u):
        acc = np.full_like(u, cnt_poly[n])
        for k in range(n - 1, -1, -1):
            acc = acc * u + cnt_poly[k]
        return np.log(acc)

    k_total = np.full(c, float(n * p - counts[members[0]].sum()))
    if u_fixed is None:
        v = np.zeros(c)
        lnu = -np.logaddexp(0.0, -v)
        ln1mu = -np.logaddexp(0.0, v)
        u = np.exp(lnu)
        lng = _ln_g_lean(u, lnu, v > 9.2)
        lnz = ln_z(u)
        state = np.vstack([v, u, lnu, ln1mu, lng, lnz])
    else:
        u = np.full(c, float(u_fixed))
        lnu = np.log(u)
        lnz = ln_z(u)

    n_rec = (n_iter - burn_in) // thin
    u_rec = np.empty((n_rec, c))
    a_rec = np.empty((n_rec, c), dtype=np.uint64)
    rec_i = 0
    bit = np.uint64(1)
    acc_u_count = 0
    acc_a_count = 0

    it = 0
    while it < n_iter:
        b = min(block, n_iter - it)
        z_blk = rng.standard_normal((b, c)) * sigma
        lnu1_blk = np.log(rng.random((b, c)))
        jpos_blk = rng.integers(0, n, size=(b, c))
        u2_blk = rng.random((b, c))
        lnu3_blk = np.log(rng.random((b, c)))
        for s in range(b):
            if u_fixed is None:
                v_new = state[0] + z_blk[s]
                lnu_new = -np.logaddexp(0.0, -v_new)
                ln1mu_new = -np.logaddexp(0.0, v_new)
                u_new = np.exp(lnu_new)
                lng_new = _ln_g_lean(u_new, lnu_new, v_new > 9.2)
                lnz_new = ln_z(u_new)
                # likelihood + prior + logit jacobian, all in log space
                logr = (
                    k_total * (lnu_new - state[2])
                    - p * (lnz_new - state[5])
                    + lng_new - state[4]
                    + lnu_new + ln1mu_new - state[2] - state[3]
                )
                acc = logr >= lnu1_blk[s]
                acc_u_count += int(acc.sum())
                state = np.where(
                    acc, np.vstack([v_new, u_new, lnu_new, ln1mu_new, lng_new, lnz_new]), state
                )
                lnu = state[2]

            j = jpos_blk[s]
            a = members[rows, j]
            weff = w_prop * ~in_a
            weff[rows, a] = w_prop[a]
            o = _propose_o(weff, u2_blk[s])
            ga = cs_lw[:, a]
            go = cs_lw[:, o]
            delta_k = ga[0] - go[0]
            logr = lnu * delta_k + ga[1] - go[1]
            acc = (logr >= lnu3_blk[s]) & (o != a) & (weff[rows, o] > 0)
            n_acc = int(acc.sum())
            if n_acc:
                acc_a_count += n_acc
                ai = rows[acc]
                members[ai, j[acc]] = o[acc]
                in_a[ai, a[acc]] = False
                in_a[ai, o[acc]] = True
                k_total[acc] += delta_k[acc]
                amask[acc] ^= (bit << a[acc].astype(np.uint64)) | (
                    bit << o[acc].astype(np.uint64)
                )

            it += 1
            if it > burn_in and (it - burn_in) % thin == 0 and rec_i < n_rec:
                u_rec[rec_i] = state[1] if u_fixed is None else u
                a_rec[rec_i] = amask
                rec_i += 1

    acc_u = acc_u_count / (n_iter * c) if u_fixed is None else None
    return u_rec[:rec_i], a_rec[:rec_i], acc_u, acc_a_count / (n_iter * c)


def _run_chains_generic(
    data, family, prior, counts, w_prop, ln_w, *,
    sigma2, n_iter, burn_in, thin, n_chains, seed, u_fixed, block,
):
    """Family-agnostic path: tracks the per-observation outside counts and
    their histogram; the log likelihood is the histogram dotted with the
    per-level log masses."""
    m, n, p = data.ground.size, data.n, data.p
    rng = make_rng(seed, "mcmc")
    members, in_a, amask = _chain_init(data, counts, n_chains)
    c = n_chains
    rows = np.arange(c)
    sigma = math.sqrt(sigma2)
    obs = data.masks()
    # memb[x, i] = 1 if element x belongs to observation i
    memb = np.array(
        [[(int(obs[i]) >> x) & 1 for i in range(p)] for x in range(m)], dtype=np.int64
    )
    levels = np.arange(n + 1)

    k_cur = np.tile(n - np.bitwise_count(amask[0] & obs).astype(np.int64), (c, 1))
    hist = (k_cur[:, :, None] == levels[None, None, :]).sum(axis=1).astype(float)

    if u_fixed is None:
        v = np.zeros(c)
        u = expit(v) * family.domain_upper
    else:
        u = np.full(c, float(u_fixed))
    lq = family.log_q_matrix(u)
    loglik = np.einsum("ck,ck->c", hist, lq)
    if u_fixed is None:
        lnprior = np.asarray(prior.log_density(u))
        lnjac = np.log(u) + np.log1p(-u / family.domain_upper)

    n_rec = (n_iter - burn_in) // thin
    u_rec = np.empty((n_rec, c))
    a_rec = np.empty((n_rec, c), dtype=np.uint64)
    rec_i = 0
    bit = np.uint64(1)
    acc_u_count = 0
    acc_a_count = 0

    it = 0
    while it < n_iter:
        b = min(block, n_iter - it)
        z_blk = rng.standard_normal((b, c))
        lnu1_blk = np.log(rng.random((b, c)))
        jpos_blk = rng.integers(0, n, size=(b, c))
        u2_blk = rng.random((b, c))
        lnu3_blk = np.log(rng.random((b, c)))
        for s in range(b):
            if u_fixed is None:
                v_new = v + sigma * z_blk[s]
                u_new = expit(v_new) * family.domain_upper
                lq_new = family.log_q_matrix(u_new)
                loglik_new = np.einsum("ck,ck->c", hist, lq_new)
                lnprior_new = np.asarray(prior.log_density(u_new))
                lnjac_new = np.log(u_new) + np.log1p(-u_new / family.domain_upper)
                logr = (
                    loglik_new - loglik
                    + lnprior_new - lnprior
                    + lnjac_new - lnjac
                )
                acc = logr >= lnu1_blk[s]
                acc_u_count += int(acc.sum())
                accm = acc[:, None]
                v = np.where(acc, v_new, v)
                u = np.where(acc, u_new, u)
                lq = np.where(accm, lq_new, lq)
                loglik = np.where(acc, loglik_new, loglik)
                lnprior = np.where(acc, lnprior_new, lnprior)
                lnjac = np.where(acc, lnjac_new, lnjac)

            j = jpos_blk[s]
            a = members[rows, j]
            weff = w_prop[None, :] * ~in_a
            weff[rows, a] = w_prop[a]
            o = _propose_o(weff, u2_blk[s])
            wo = weff[rows, o]
            k_new = k_cur + memb[a] - memb[o]
            hist_new = (k_new[:, :, None] == levels[None, None, :]).sum(axis=1).astype(float)
            loglik_new = np.einsum("ck,ck->c", hist_new, lq)
            logr = loglik_new - loglik + ln_w[a] - ln_w[o]
            acc = (logr >= lnu3_blk[s]) & (o != a) & (wo > 0)
            acc_a_count += int(acc.sum())
            if acc.any():
                ai = rows[acc]
                members[ai, j[acc]] = o[acc]
                in_a[ai, a[acc]] = False
                in_a[ai, o[acc]] = True
                k_cur = np.where(acc[:, None], k_new, k_cur)
                hist = np.where(acc[:, None], hist_new, hist)
                loglik = np.where(acc, loglik_new, loglik)
                amask[acc] ^= (bit << a[acc].astype(np.uint64)) | (
                    bit << o[acc].astype(np.uint64)
                )

            it += 1
            if it > burn_in and (it - burn_in) % thin == 0 and rec_i < n_rec:
                u_rec[rec_i] = u
                a_rec[rec_i] = amask
                rec_i += 1

    acc_u = acc_u_count / (n_iter * c) if u_fixed is None else None
    return u_rec[:rec_i], a_rec[:rec_i], acc_u, acc_a_count / (n_iter * c)


# ---------------------------------------------------------------------------
# Posterior p-values and signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalEntry:
    operator_id: str
    p_value: float
    deviations: int
    signal: str


@dataclass(frozen=True)
class SignalReport:
    mode: Subset
    alert_threshold: float
    action_threshold: float
    entries: tuple[SignalEntry, ...]

    def by_operator(self) -> dict[str, SignalEntry]:
        return {e.operator_id: e for e in self.entries}


def posterior_p_values(
    data: Dataset,
    posterior: PosteriorOneStage,
    *,
    alert_threshold: float = DEFAULT_ALERT_THRESHOLD,
    action_threshold: float = DEFAULT_ACTION_THRESHOLD,
) -> SignalReport:
    """Posterior-averaged tail probability of deviating at least as much as
    each observation, plus the graded alert/action classification."""
    if len(posterior.u_values) < 100:
        raise ValidationError("posterior p-values need at least 100 joint samples")
    if action_threshold >= alert_threshold:
        raise ValidationError("action threshold must be below the alert threshold")
    family = posterior.family
    n = family.n
    pmf = np.exp(family.log_pmf(posterior.u_values))  # (S, n+1)
    tails = np.cumsum(pmf[:, ::-1], axis=1)[:, ::-1]  # tails[s, k] = sum_{j>=k} e(j)
    obs = data.masks()
    k_mat = n - np.bitwise_count(obs[:, None] & posterior.a_masks[None, :]).astype(int)
    s_idx = np.arange(len(posterior.u_values))
    p_values = tails[s_idx[None, :], k_mat].mean(axis=1)

    mode = posterior.mode
    entries = []
    for i, (op, sub) in enumerate(data.observations):
        pv = float(p_values[i])
        if pv < action_threshold:
            sig = SIGNAL_ACTION
        elif pv < alert_threshold:
            sig = SIGNAL_ALERT
        else:
            sig = SIGNAL_NONE
        dev = (sub.mask & mode.complement_mask()).bit_count()
        entries.append(SignalEntry(op, pv, dev, sig))
    return SignalReport(
        mode=mode,
        alert_threshold=alert_threshold,
        action_threshold=action_threshold,
        entries=tuple(entries),
    )
