"""Analysis orchestration: configuration, report assembly, file emission.

Reports are JSON with a versioned schema. Everything stochastic is pinned
by the seed, so the ``report`` block (and all TSV sidecars) are
byte-identical across runs; wall-clock timestamps live in the separate
``metadata`` block.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import chi2 as chi2_dist

from . import __version__
from .datasets import AnyDataset, Dataset, GroupedDataset
from .distributions import (
    DispersionFamily,
    FamilyKind,
    calibrate_pair,
    check_hamming_monotone,
    default_prior,
    sample_binomial_subsets,
    sample_fisher_subsets,
)
from .errors import ValidationError
from .numerics import make_rng
from .one_stage import (
    DEFAULT_ACTION_THRESHOLD,
    DEFAULT_ALERT_THRESHOLD,
    SignalReport,
    brute_force_posterior,
    estimate_evidence,
    mcmc_posterior,
    posterior_p_values,
)
from .subsets import DEFAULT_ENUMERATION_BUDGET, DEFAULT_MAX_GROUP_SIZE, Subset
from .two_stage import (
    DEFAULT_MAX_COMPOSITIONS,
    DEFAULT_QUAD_NODES,
    TwoStageConfig,
    gamma_statistics,
)

SCHEMA_VERSION = 1


@dataclass
class AnalysisConfig:
    """Everything a run needs besides the data; every knob is
    overridable."""

    model: str = "pooled"                  # pooled | hierarchical
    family: str = "fisher"                 # fisher | binomial (top level)
    lab_family: str | None = None          # defaults to `family`
    inference: str = "brute-force"         # brute-force | mcmc
    epsilon: float = 0.01
    n_mc: int = 1000
    cdf_grid: int = 10_000
    n_samples: int = 1000
    sigma2: float = 0.5
    n_iter: int = 1_000_000
    burn_in: int = 100_000
    thin: int = 46
    n_chains: int = 30
    seed: int = 0
    alert_threshold: float = DEFAULT_ALERT_THRESHOLD
    action_threshold: float = DEFAULT_ACTION_THRESHOLD
    quad_nodes: int = DEFAULT_QUAD_NODES
    budget: int = DEFAULT_ENUMERATION_BUDGET
    max_group_size: int = DEFAULT_MAX_GROUP_SIZE
    max_compositions: int = DEFAULT_MAX_COMPOSITIONS
    threads: int = 1
    compute_bayes_factor: bool = True
    dtable_cache: str | None = None

    def __post_init__(self):
        if self.model not in ("pooled", "hierarchical"):
            raise ValidationError(f"unknown model {self.model!r}")
        if self.family not in ("fisher", "binomial"):
            raise ValidationError(f"unknown family {self.family!r}")
        if self.lab_family is not None and self.lab_family not in ("fisher", "binomial"):
            raise ValidationError(f"unknown lab family {self.lab_family!r}")
        if self.inference not in ("brute-force", "mcmc"):
            raise ValidationError(f"unknown inference {self.inference!r}")
        if self.model == "hierarchical" and self.inference == "mcmc":
            raise ValidationError(
                "MCMC is not available for the hierarchical model; "
                "use the brute-force scheme"
            )
        positive = [
            ("epsilon", self.epsilon), ("n_mc", self.n_mc),
            ("cdf_grid", self.cdf_grid), ("n_samples", self.n_samples),
            ("sigma2", self.sigma2), ("n_iter", self.n_iter),
            ("thin", self.thin), ("n_chains", self.n_chains),
            ("alert_threshold", self.alert_threshold),
            ("action_threshold", self.action_threshold),
            ("quad_nodes", self.quad_nodes), ("budget", self.budget),
            ("max_group_size", self.max_group_size),
            ("max_compositions", self.max_compositions),
            ("threads", self.threads),
        ]
        for name, val in positive:
            if val <= 0:
                raise ValidationError(f"{name} must be positive, got {val}")
        if self.burn_in < 0:
            raise ValidationError("burn_in must be non-negative")
        if self.action_threshold >= self.alert_threshold:
            raise ValidationError("action threshold must be below the alert threshold")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def top_family_for(self, data: AnyDataset) -> DispersionFamily:
        return DispersionFamily(
            FamilyKind(self.family), data.n, data.ground.size - data.n
        )

    def lab_family_for(self, data: AnyDataset) -> DispersionFamily:
        kind = FamilyKind(self.lab_family or self.family)
        return DispersionFamily(kind, data.n, data.ground.size - data.n)

    def two_stage(self) -> TwoStageConfig:
        return TwoStageConfig(
            epsilon=self.epsilon,
            n_mc=self.n_mc,
            cdf_grid=self.cdf_grid,
            n_samples=self.n_samples,
            quad_nodes=self.quad_nodes,
            seed=self.seed,
            budget=self.budget,
            max_p=self.max_group_size,
            max_compositions=self.max_compositions,
            threads=self.threads,
        )


@dataclass
class AnalysisReport:
    config: AnalysisConfig
    report: dict
    u_samples: np.ndarray
    a_sample_labels: list[str]
    selection_histogram: list[tuple[str, int]]
    lab_samples: Optional[list[tuple[str, int, float, int, float]]] = None
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    def file_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": {
                "tool_version": __version__,
                "config": self.config.as_dict(),
                "config_hash": self.config.config_hash(),
                "seed": self.config.seed,
                "created_at": self.created_at,
            },
            "report": self.report,
        }

    def payload_bytes(self) -> bytes:
        """Canonical bytes of everything except wall-clock metadata."""
        payload = self.file_dict()
        payload["metadata"] = {
            k: v for k, v in payload["metadata"].items() if k != "created_at"
        }
        return json.dumps(payload, sort_keys=True, indent=2).encode()

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json"}
        paths["report"].write_text(
            json.dumps(self.file_dict(), sort_keys=True, indent=2) + "\n"
        )

        lines = ["set\tprobability\tmc_std"]
        for row in self.report["posterior_center"]:
            std = row.get("mc_std")
            lines.append(
                "{}\t{!r}\t{}".format(
                    ",".join(row["items"]),
                    row["probability"],
                    "" if std is None else repr(std),
                )
            )
        paths["posterior_a"] = out / "posterior_a.tsv"
        paths["posterior_a"].write_text("\n".join(lines) + "\n")

        lines = ["u\tcenter"]
        for u, labels in zip(self.u_samples, self.a_sample_labels):
            lines.append(f"{float(u)!r}\t{labels}")
        paths["u_samples"] = out / "u_samples.tsv"
        paths["u_samples"].write_text("\n".join(lines) + "\n")

        lines = ["element\tcount"]
        for label, count in self.selection_histogram:
            lines.append(f"{label}\t{count}")
        paths["selection_histogram"] = out / "selection_histogram.tsv"
        paths["selection_histogram"].write_text("\n".join(lines) + "\n")

        if self.lab_samples is not None:
            lines = ["lab\tdraw\tgamma\tk\tu_lab"]
            for lab, draw, gamma, k, u_lab in self.lab_samples:
                lines.append(f"{lab}\t{draw}\t{gamma!r}\t{k}\t{u_lab!r}")
            paths["lab_gamma_samples"] = out / "lab_gamma_samples.tsv"
            paths["lab_gamma_samples"].write_text("\n".join(lines) + "\n")
        return paths


def _support_rows(posterior, limit: int | None = None) -> list[dict]:
    rows = []
    for sub, prob in posterior.center_support[:limit]:
        row = {"items": list(sub.labels), "probability": float(prob)}
        std = getattr(posterior, "support_std", None)
        if std is not None:
            row["mc_std"] = std.get(sub.mask)
        rows.append(row)
    return rows


def _u_summary(u_values: np.ndarray) -> dict:
    qs = [0.025, 0.25, 0.5, 0.75, 0.975]
    return {
        "n_samples": int(len(u_values)),
        "mean": float(np.mean(u_values)),
        "quantiles": {str(q): float(np.quantile(u_values, q)) for q in qs},
        "samples_file": "u_samples.tsv",
    }


def _signal_rows(signals: SignalReport) -> list[dict]:
    return [
        {
            "operator": e.operator_id,
            "p_value": e.p_value,
            "deviations": e.deviations,
            "signal": e.signal,
        }
        for e in signals.entries
    ]


def run_analysis(config: AnalysisConfig, data: AnyDataset) -> AnalysisReport:
    """Dispatch to the configured inference and assemble the full report."""
    if config.model == "hierarchical" and not isinstance(data, GroupedDataset):
        raise ValidationError(
            "hierarchical analysis requires grouped data (a lab column with "
            "more than one laboratory)"
        )
    if config.model == "pooled" and isinstance(data, GroupedDataset):
        data = data.pooled()
    if config.model == "pooled":
        return _run_pooled(config, data)
    return _run_hierarchical(config, data)


def _selection_rows(data: Dataset) -> list[tuple[str, int]]:
    counts = data.selection_counts()
    return [(data.ground.labels[i], int(counts[i])) for i in range(data.ground.size)]


def _run_pooled(config: AnalysisConfig, data: Dataset) -> AnalysisReport:
    family = config.top_family_for(data)
    prior = default_prior(family)
    if config.inference == "brute-force":
        posterior = brute_force_posterior(
            data, family, prior,
            epsilon=config.epsilon, n_mc=config.n_mc, cdf_grid=config.cdf_grid,
            n_samples=config.n_samples, seed=config.seed, budget=config.budget,
        )
    else:
        posterior = mcmc_posterior(
            data, family, prior,
            sigma2=config.sigma2, n_iter=config.n_iter, burn_in=config.burn_in,
            thin=config.thin, n_chains=config.n_chains, seed=config.seed,
        )
    signals = posterior_p_values(
        data, posterior,
        alert_threshold=config.alert_threshold,
        action_threshold=config.action_threshold,
    )
    diag = posterior.diagnostics
    report = {
        "model": "pooled",
        "family": config.family,
        "inference": config.inference,
        "universe_size": data.ground.size,
        "subset_size": data.n,
        "num_observations": data.p,
        "posterior_center": _support_rows(posterior),
        "posterior_mode": list(posterior.mode.labels),
        "u_summary": _u_summary(posterior.u_values),
        "signals": _signal_rows(signals),
        "thresholds": {
            "alert": config.alert_threshold,
            "action": config.action_threshold,
        },
        "evidence": {
            "log_evidence": posterior.evidence_log,
        },
        "diagnostics": {
            "method": diag.method,
            "u_acceptance": diag.u_acceptance,
            "center_acceptance": diag.a_acceptance,
            "truncated_mass": diag.truncated_mass,
            "warnings": diag.warnings,
        },
        "traceability": {
            "posterior_center": f"one_stage.{diag.method}",
            "u_summary": f"one_stage.{diag.method}",
            "signals": "one_stage.posterior_p_values",
            "evidence": "one_stage.estimate_evidence",
            "selection_histogram": "datasets.selection_counts",
        },
    }
    return AnalysisReport(
        config=config,
        report=report,
        u_samples=posterior.u_values,
        a_sample_labels=[
            ",".join(Subset(data.ground, int(m)).labels) for m in posterior.a_masks
        ],
        selection_histogram=_selection_rows(data),
    )


def _run_hierarchical(config: AnalysisConfig, data: GroupedDataset) -> AnalysisReport:
    from .two_stage import IntegralCache, TwoStageModel, load_dtable, sample_posterior, save_dtable

    family_top = config.top_family_for(data)
    family_lab = config.lab_family_for(data)
    prior_top = default_prior(family_top)
    prior_lab = default_prior(family_lab)
    ts_config = config.two_stage()
    precomputed = None
    if config.dtable_cache:
        signature = IntegralCache(
            family_lab, prior_lab, config.quad_nodes
        ).config_signature()
        precomputed = load_dtable(config.dtable_cache, signature)
    model = TwoStageModel(
        data, family_top, family_lab, prior_top, prior_lab, ts_config,
        precomputed=precomputed,
    )
    if config.dtable_cache:
        fresh = {lab.data_hash for lab in model.dtable.labs}
        if precomputed is None or fresh - set(precomputed):
            save_dtable(model.dtable, config.dtable_cache)
    posterior = sample_posterior(model)
    labs = gamma_statistics(posterior)
    evidence = {
        "log_evidence_hierarchical": posterior.evidence_log,
        "log_evidence_pooled": None,
        "log_bayes_factor": None,
        "interpretation": None,
    }
    if config.compute_bayes_factor:
        log_pooled = estimate_evidence(
            data.pooled(), family_top, prior_top,
            n_mc=config.n_mc, seed=config.seed, budget=config.budget,
        )
        from .two_stage import _kass_raftery_band

        log_bf = posterior.evidence_log - log_pooled
        evidence.update(
            log_evidence_pooled=log_pooled,
            log_bayes_factor=log_bf,
            interpretation=_kass_raftery_band(log_bf),
        )
    lab_rows = [
        {
            "lab": s.lab_id,
            "gamma_mean": s.gamma_mean,
            "gamma_median": s.gamma_median,
            "u_median": s.u_median,
            "mean_deviations_posterior_mean": s.mean_deviations_posterior_mean,
            "mean_deviations_at_median_u": s.mean_deviations_at_median_u,
            "k_histogram": list(s.k_histogram),
        }
        for s in labs
    ]
    report = {
        "model": "hierarchical",
        "family": config.family,
        "lab_family": config.lab_family or config.family,
        "inference": config.inference,
        "universe_size": data.ground.size,
        "subset_size": data.n,
        "num_labs": data.num_labs,
        "group_sizes": list(data.group_sizes()),
        "posterior_center": _support_rows(posterior),
        "posterior_mode": list(posterior.mode.labels),
        "u_summary": _u_summary(posterior.u_values),
        "labs": lab_rows,
        "evidence": evidence,
        "traceability": {
            "posterior_center": "two_stage.two_stage_posterior",
            "u_summary": "two_stage.two_stage_posterior",
            "labs": "two_stage.gamma_statistics",
            "evidence": "two_stage.bayes_factor",
            "selection_histogram": "datasets.selection_counts",
        },
    }
    samples = []
    for i, lab_id in enumerate(posterior.lab_ids):
        for s_i in range(len(posterior.u_values)):
            samples.append(
                (
                    lab_id,
                    s_i,
                    float(posterior.gamma_values[s_i, i]),
                    int(posterior.k_values[s_i, i]),
                    float(posterior.lab_u_values[s_i, i]),
                )
            )
    return AnalysisReport(
        config=config,
        report=report,
        u_samples=posterior.u_values,
        a_sample_labels=[
            ",".join(Subset(data.ground, int(m)).labels) for m in posterior.a_masks
        ],
        selection_histogram=_selection_rows(data.pooled()),
        lab_samples=samples,
    )


# ---------------------------------------------------------------------------
# Sampler goodness-of-fit utility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoodnessOfFitReport:
    family: str
    u: float
    n_draws: int
    chi2: float
    dof: int
    p_value: float
    monotonicity: str
    observed: tuple[int, ...]
    expected: tuple[float, ...]


def _pooled_chi2(observed: np.ndarray, expected: np.ndarray, min_expected: float = 5.0):
    """Chi-square after pooling adjacent low-expectation bins."""
    obs_pool, exp_pool = [], []
    acc_o, acc_e = 0.0, 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_pool.append(acc_o)
            exp_pool.append(acc_e)
            acc_o, acc_e = 0.0, 0.0
    if acc_e > 0:
        if exp_pool:
            obs_pool[-1] += acc_o
            exp_pool[-1] += acc_e
        else:
            obs_pool.append(acc_o)
            exp_pool.append(acc_e)
    obs_arr = np.array(obs_pool)
    exp_arr = np.array(exp_pool)
    stat = float(((obs_arr - exp_arr) ** 2 / exp_arr).sum())
    dof = max(len(obs_arr) - 1, 1)
    return stat, dof, float(chi2_dist.sf(stat, dof))


def check_distribution(
    family: DispersionFamily,
    u: float,
    center: Subset,
    n_draws: int = 100_000,
    seed: int = 0,
) -> GoodnessOfFitReport:
    """Draw from the exact sampler and chi-square the Hamming-count
    histogram against the family pmf; also report the monotonicity verdict.
    """
    rng = make_rng(seed, "check-distribution")
    if family.kind is FamilyKind.FISHER:
        pair = calibrate_pair(u, family.n, family.big_n)
        subs = sample_fisher_subsets(center, pair, n_draws, rng)
    else:
        subs = sample_binomial_subsets(center, u, n_draws, rng)
    comp = center.complement_mask()
    ks = np.array([(s.mask & comp).bit_count() for s in subs])
    observed = np.bincount(ks, minlength=family.n + 1).astype(float)
    probs = np.exp(family.log_pmf(u))
    expected = probs * n_draws
    stat, dof, p_value = _pooled_chi2(observed, expected)
    verdict = check_hamming_monotone(family=family, u=u)
    return GoodnessOfFitReport(
        family=family.kind.value,
        u=u,
        n_draws=n_draws,
        chi2=stat,
        dof=dof,
        p_value=p_value,
        monotonicity=verdict.value,
        observed=tuple(int(x) for x in observed),
        expected=tuple(float(x) for x in expected),
    )
