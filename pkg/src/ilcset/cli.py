"""Command-line interface.

Defaults resolve in order: built-ins, then a TOML config file (--config or
ILCSET_CONFIG), then ILCSET_* environment variables, then flags. Exit
codes: 0 success, 2 invalid input, 3 budget exceeded, 4 numerical failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .datasets import GroupedDataset, ingest, write_csv
from .distributions import DispersionFamily, FamilyKind
from .errors import IlcsetError, ValidationError
from .report import AnalysisConfig, check_distribution, run_analysis
from .subsets import GroundSet, Subset
from .two_stage import IntegralCache, build_dtable, load_dtable, save_dtable


def _load_config_file(ctx: click.Context, param, value):
    if not value:
        return None
    try:
        with open(value, "rb") as fh:
            loaded = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise click.ClickException(f"cannot read config file {value}: {exc}")
    defaults = {k.replace("-", "_"): v for k, v in loaded.items()}
    ctx.default_map = ctx.default_map or {}
    for cmd in ("fit", "signals", "bayes-factor", "simulate", "check-distribution"):
        ctx.default_map.setdefault(cmd, {}).update(defaults)
    return value


@click.group(context_settings={"auto_envvar_prefix": "ILCSET"})
@click.version_option(version=__version__)
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    callback=_load_config_file,
    expose_value=False,
    is_eager=True,
    envvar="ILCSET_CONFIG",
    help="TOML file with default option values (flags still win).",
)
def main():
    """Bayesian analysis of set-valued interlaboratory comparison data."""


def _data_options(fn):
    fn = click.option("--data", "data_path", required=True,
                      type=click.Path(exists=True, dir_okay=False),
                      help="CSV file: lab,operator,item_1..item_n (1-based items).")(fn)
    fn = click.option("--universe-size", "-M", type=int, required=True,
                      help="Number of items in the ground set.")(fn)
    fn = click.option("--subset-size", "-n", type=int, required=True,
                      help="Size of every selected subset.")(fn)
    return fn


def _analysis_options(fn):
    opts = [
        click.option("--model", type=click.Choice(["pooled", "hierarchical"]),
                     default="pooled", show_default=True),
        click.option("--family", type=click.Choice(["fisher", "binomial"]),
                     default="fisher", show_default=True),
        click.option("--lab-family", type=click.Choice(["fisher", "binomial"]),
                     default=None, help="Lab-level family (defaults to --family)."),
        click.option("--inference", type=click.Choice(["brute-force", "mcmc"]),
                     default="brute-force", show_default=True),
        click.option("--epsilon", type=float, default=0.01, show_default=True,
                     help="Relative truncation tolerance for the center support."),
        click.option("--n-mc", type=int, default=1000, show_default=True,
                     help="Prior dispersion draws per marginal-likelihood estimate."),
        click.option("--cdf-grid", type=int, default=10_000, show_default=True,
                     help="Grid size for inverting the dispersion CDF."),
        click.option("--n-samples", type=int, default=1000, show_default=True,
                     help="Number of joint posterior samples."),
        click.option("--sigma2", type=float, default=0.5, show_default=True,
                     help="Random-walk variance of the MCMC dispersion move."),
        click.option("--n-iter", type=int, default=1_000_000, show_default=True),
        click.option("--burn-in", type=int, default=100_000, show_default=True),
        click.option("--thin", type=int, default=46, show_default=True),
        click.option("--n-chains", type=int, default=30, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--alert-threshold", type=float, default=0.05, show_default=True),
        click.option("--action-threshold", type=float, default=0.005, show_default=True),
        click.option("--quad-nodes", type=int, default=256, show_default=True,
                     help="Gauss-Legendre nodes for lab-dispersion integrals."),
        click.option("--budget", type=int, default=10_000_000, show_default=True,
                     help="Maximum number of candidate centers to enumerate."),
        click.option("--max-group-size", type=int, default=8, show_default=True,
                     help="Maximum operators per lab for the hierarchical scheme."),
        click.option("--threads", type=int, default=1, show_default=True,
                     help="Worker threads for per-lab precomputation."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(kwargs) -> AnalysisConfig:
    return AnalysisConfig(
        model=kwargs["model"],
        family=kwargs["family"],
        lab_family=kwargs["lab_family"],
        inference=kwargs["inference"],
        epsilon=kwargs["epsilon"],
        n_mc=kwargs["n_mc"],
        cdf_grid=kwargs["cdf_grid"],
        n_samples=kwargs["n_samples"],
        sigma2=kwargs["sigma2"],
        n_iter=kwargs["n_iter"],
        burn_in=kwargs["burn_in"],
        thin=kwargs["thin"],
        n_chains=kwargs["n_chains"],
        seed=kwargs["seed"],
        alert_threshold=kwargs["alert_threshold"],
        action_threshold=kwargs["action_threshold"],
        quad_nodes=kwargs["quad_nodes"],
        budget=kwargs["budget"],
        max_group_size=kwargs["max_group_size"],
        threads=kwargs["threads"],
    )


def _cli_guard(fn):
    """Translate package errors into the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except IlcsetError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@main.command()
@_data_options
@_analysis_options
@click.option("--dtable-cache", type=click.Path(dir_okay=False), default=None,
              help="Reuse (or create) a per-lab likelihood-table cache; "
                   "entries with stale data hashes are recomputed.")
@click.option("--out", type=click.Path(file_okay=False), default="ilcset-out",
              show_default=True, help="Output directory for report and sidecars.")
@_cli_guard
def fit(data_path, universe_size, subset_size, out, dtable_cache, **kwargs):
    """Fit the model and write the full report with TSV sidecars."""
    config = _build_config(kwargs)
    config.dtable_cache = dtable_cache
    data = ingest(data_path, universe_size, subset_size)
    result = run_analysis(config, data)
    paths = result.write(out)
    top = result.report["posterior_center"][0]
    click.echo(f"posterior mode: {{{','.join(top['items'])}}} "
               f"(probability {top['probability']:.6f})")
    ev = result.report["evidence"]
    for key in ("log_evidence", "log_evidence_hierarchical", "log_bayes_factor"):
        if ev.get(key) is not None:
            click.echo(f"{key}: {ev[key]:.4f}")
    click.echo(f"report written to {paths['report']}")


@main.command()
@_data_options
@_analysis_options
@_cli_guard
def signals(data_path, universe_size, subset_size, **kwargs):
    """Fit the pooled model and print the per-operator signal table."""
    kwargs["model"] = "pooled"
    config = _build_config(kwargs)
    data = ingest(data_path, universe_size, subset_size)
    result = run_analysis(config, data)
    click.echo("operator\tdeviations\tp_value\tsignal")
    for row in result.report["signals"]:
        click.echo(
            f"{row['operator']}\t{row['deviations']}\t{row['p_value']:.6f}\t{row['signal']}"
        )


@main.command(name="bayes-factor")
@_data_options
@_analysis_options
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Optional JSON output path.")
@_cli_guard
def bayes_factor_cmd(data_path, universe_size, subset_size, out, **kwargs):
    """Log Bayes factor of the hierarchical model over the pooled model."""
    from .two_stage import bayes_factor

    kwargs["model"] = "hierarchical"
    config = _build_config(kwargs)
    data = ingest(data_path, universe_size, subset_size)
    if not isinstance(data, GroupedDataset):
        raise ValidationError("the Bayes factor needs grouped data (>= 2 labs)")
    result = bayes_factor(
        data,
        config.top_family_for(data),
        config.lab_family_for(data),
        config=config.two_stage(),
    )
    click.echo(f"log_evidence_hierarchical: {result.log_evidence_hierarchical:.4f}")
    click.echo(f"log_evidence_pooled: {result.log_evidence_pooled:.4f}")
    click.echo(f"log_bayes_factor: {result.log_bf:.4f}")
    click.echo(f"interpretation: {result.interpretation}")
    if out:
        Path(out).write_text(json.dumps({
            "log_evidence_hierarchical": result.log_evidence_hierarchical,
            "log_evidence_pooled": result.log_evidence_pooled,
            "log_bayes_factor": result.log_bf,
            "interpretation": result.interpretation,
        }, sort_keys=True, indent=2) + "\n")


@main.command()
@click.option("--universe-size", "-M", type=int, required=True)
@click.option("--subset-size", "-n", type=int, required=True)
@click.option("--center", type=str, default=None,
              help="Comma-separated 1-based items of the true center "
                   "(default: 1..n).")
@click.option("--u", type=float, default=0.1, show_default=True,
              help="Top-level dispersion.")
@click.option("--labs", type=int, default=0, show_default=True,
              help="Number of labs; 0 simulates the pooled model.")
@click.option("--group-sizes", type=str, default="3",
              show_default=True, help="Operators per lab (int or comma list).")
@click.option("--lab-u", type=str, default="prior", show_default=True,
              help="Lab dispersion: a number, or 'prior' to draw from the prior.")
@click.option("--p", "n_obs", type=int, default=12, show_default=True,
              help="Number of observations for the pooled model.")
@click.option("--family", type=click.Choice(["fisher", "binomial"]),
              default="fisher", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output CSV path (truth JSON written alongside).")
@_cli_guard
def simulate(universe_size, subset_size, center, u, labs, group_sizes, lab_u,
             n_obs, family, seed, out):
    """Draw a synthetic dataset and write it with a ground-truth sidecar."""
    from .simulate import simulate_hierarchical, simulate_pooled

    ground = GroundSet(universe_size)
    if center:
        items = [int(x) for x in center.split(",")]
        center_sub = Subset.from_indices(ground, [i - 1 for i in items])
    else:
        center_sub = Subset.from_indices(ground, range(subset_size))
    if center_sub.cardinality != subset_size:
        raise ValidationError("--center must list exactly --subset-size items")
    fam = DispersionFamily(FamilyKind(family), subset_size, universe_size - subset_size)
    if labs > 0:
        sizes = [int(x) for x in group_sizes.split(",")]
        if len(sizes) == 1:
            sizes = sizes * labs
        if len(sizes) != labs:
            raise ValidationError("--group-sizes must give one size or one per lab")
        lab_u_val = None if lab_u == "prior" else float(lab_u)
        data, truth = simulate_hierarchical(
            center_sub, u, sizes, lab_u_val, fam, fam, seed=seed
        )
    else:
        data, truth = simulate_pooled(center_sub, u, n_obs, fam, seed=seed)
    write_csv(data, out)
    truth_path = Path(out).with_suffix(".truth.json")
    truth_path.write_text(json.dumps(truth.as_dict(), sort_keys=True, indent=2) + "\n")
    click.echo(f"dataset written to {out}; ground truth in {truth_path}")


@main.command(name="check-distribution")
@click.option("--family", type=click.Choice(["fisher", "binomial"]),
              default="fisher", show_default=True)
@click.option("--u", type=float, required=True)
@click.option("--universe-size", "-M", type=int, required=True)
@click.option("--subset-size", "-n", type=int, required=True)
@click.option("--center", type=str, default=None,
              help="Comma-separated 1-based items (default 1..n).")
@click.option("--draws", type=int, default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_cli_guard
def check_distribution_cmd(family, u, universe_size, subset_size, center, draws, seed):
    """Chi-square the exact sampler against the family pmf."""
    ground = GroundSet(universe_size)
    if center:
        items = [int(x) for x in center.split(",")]
        center_sub = Subset.from_indices(ground, [i - 1 for i in items])
    else:
        center_sub = Subset.from_indices(ground, range(subset_size))
    fam = DispersionFamily(FamilyKind(family), subset_size, universe_size - subset_size)
    rep = check_distribution(fam, u, center_sub, n_draws=draws, seed=seed)
    click.echo(f"family: {rep.family}  u: {rep.u}  draws: {rep.n_draws}")
    click.echo(f"chi2: {rep.chi2:.4f}  dof: {rep.dof}  p_value: {rep.p_value:.6f}")
    click.echo(f"monotonicity: {rep.monotonicity}")
    click.echo("k\tobserved\texpected")
    for k, (o, e) in enumerate(zip(rep.observed, rep.expected)):
        click.echo(f"{k}\t{o}\t{e:.2f}")


@main.group()
def cache():
    """Manage the precomputed hierarchical-likelihood cache."""


@cache.command(name="build")
@_data_options
@click.option("--quad-nodes", type=int, default=256, show_default=True)
@click.option("--max-group-size", type=int, default=8, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_cli_guard
def cache_build(data_path, universe_size, subset_size, quad_nodes, max_group_size, out):
    """Precompute the per-lab D tables and store them."""
    data = ingest(data_path, universe_size, subset_size)
    if not isinstance(data, GroupedDataset):
        raise ValidationError("the cache applies to grouped data only")
    fam = DispersionFamily(
        FamilyKind.FISHER, subset_size, universe_size - subset_size
    )
    integrals = IntegralCache(fam, nodes=quad_nodes)
    dtable = build_dtable(data, integrals, max_p=max_group_size)
    save_dtable(dtable, out)
    click.echo(f"cache with {len(dtable.labs)} lab tables written to {out}")


@cache.command(name="info")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@_cli_guard
def cache_info(path):
    """Describe a cache file."""
    tables = load_dtable(path)
    if tables is None:
        raise ValidationError(f"{path} is not a readable dtable cache")
    click.echo(f"lab tables: {len(tables)}")
    for table in tables.values():
        click.echo(
            f"  lab {table.lab_id}: p={table.p}, cells={len(table.cell_patterns)}, "
            f"compositions={table.skeys.shape[0]}, hash={table.data_hash.hex()[:12]}"
        )


if __name__ == "__main__":
    main()
