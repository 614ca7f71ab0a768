"""Ingestion, report emission, determinism and the command-line surface."""

import json

import pytest
from click.testing import CliRunner

from ilcset import (
    AnalysisConfig,
    Dataset,
    DispersionFamily,
    FamilyKind,
    GroundSet,
    GroupedDataset,
    Subset,
    ValidationError,
    check_distribution,
    ingest,
    run_analysis,
    write_csv,
)
from ilcset.cli import main as cli_main
from ilcset.simulate import simulate_hierarchical, simulate_pooled

from conftest import EXAMPLE_ROWS

EXAMPLE_CSV = "lab,operator," + ",".join(f"item_{j}" for j in (1, 2, 3)) + "\n" + "\n".join(
    f"lab1,X{i + 1}," + ",".join(str(x) for x in row)
    for i, row in enumerate(EXAMPLE_ROWS)
)


@pytest.fixture
def example_csv(tmp_path):
    path = tmp_path / "example.csv"
    path.write_text(EXAMPLE_CSV + "\n")
    return path


class TestIngest:
    def test_example_file(self, example_csv):
        data = ingest(example_csv, 10, 3)
        assert isinstance(data, Dataset)
        assert data.p == 12
        assert data.observations[11][1].labels == ("5", "6", "8")

    def test_duplicate_item(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lab,operator,item_1,item_2,item_3\nL1,op1,2,2,3\n")
        with pytest.raises(ValidationError, match="line 2.*duplicate item"):
            ingest(path, 10, 3)

    def test_wrong_width(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lab,operator,item_1,item_2,item_3\nL1,op1,1,2\n")
        with pytest.raises(ValidationError, match="line 2"):
            ingest(path, 10, 3)

    def test_unknown_item(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lab,operator,item_1,item_2,item_3\nL1,op1,1,2,11\n")
        with pytest.raises(ValidationError, match="line 2.*11"):
            ingest(path, 10, 3)

    def test_duplicate_operator(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "lab,operator,item_1,item_2,item_3\nL1,op1,1,2,3\nL1,op1,1,2,4\n"
        )
        with pytest.raises(ValidationError, match="op1"):
            ingest(path, 10, 3)

    def test_grouped(self, tmp_path):
        path = tmp_path / "grouped.csv"
        path.write_text(
            "lab,operator,item_1,item_2,item_3\n"
            "L1,op1,1,2,3\nL1,op2,1,2,4\n"
            "L2,op1,1,2,3\nL2,op2,2,3,4\nL2,op3,1,3,4\n"
        )
        data = ingest(path, 10, 3)
        assert isinstance(data, GroupedDataset)
        assert data.num_labs == 2
        assert data.group_sizes() == (2, 3)

    def test_no_lab_column(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("operator,item_1,item_2\nop1,1,2\nop2,2,3\n")
        data = ingest(path, 6, 2)
        assert isinstance(data, Dataset) and data.p == 2

    def test_round_trip(self, tmp_path):
        g = GroundSet(8)
        center = Subset.from_indices(g, [0, 1, 2])
        data, _ = simulate_hierarchical(center, 0.3, [2, 3], lab_u=0.2, seed=4)
        path = tmp_path / "sim.csv"
        write_csv(data, path)
        back = ingest(path, 8, 3)
        assert isinstance(back, GroupedDataset)
        assert back == data

    def test_round_trip_pooled(self, tmp_path):
        g = GroundSet(8)
        center = Subset.from_indices(g, [0, 1, 2])
        data, _ = simulate_pooled(center, 0.3, 7, seed=4)
        path = tmp_path / "sim.csv"
        write_csv(data, path)
        assert ingest(path, 8, 3) == data


class TestRunAnalysis:
    def test_pooled_brute_force(self, example_dataset):
        config = AnalysisConfig(seed=1)
        result = run_analysis(config, example_dataset)
        rep = result.report
        assert rep["posterior_center"][0]["items"] == ["1", "2", "3"]
        assert rep["posterior_center"][0]["probability"] >= 1 - 1e-6
        signals = {r["operator"]: r for r in rep["signals"]}
        assert signals["X12"]["signal"] == "action"
        assert signals["X4"]["signal"] == "none"
        assert rep["evidence"]["log_evidence"] is not None
        assert rep["traceability"]["signals"] == "one_stage.posterior_p_values"

    def test_pooled_mcmc_agrees(self, example_dataset):
        config = AnalysisConfig(
            inference="mcmc", n_iter=60_000, burn_in=10_000, thin=10,
            n_chains=2, seed=3,
        )
        result = run_analysis(config, example_dataset)
        rep = result.report
        assert rep["posterior_center"][0]["items"] == ["1", "2", "3"]
        assert rep["posterior_center"][0]["mc_std"] is not None

    def test_hierarchical_with_planted_effect(self):
        # distinct lab centers with tight within-lab clusters: the report
        # should favor the lab-effect model
        g = GroundSet(10)
        center = Subset.from_indices(g, [0, 1, 2])
        data, _ = simulate_hierarchical(center, 0.5, [3, 3, 3, 3], lab_u=0.05, seed=0)
        config = AnalysisConfig(model="hierarchical", n_mc=300, n_samples=200, seed=2)
        result = run_analysis(config, data)
        rep = result.report
        assert rep["evidence"]["log_bayes_factor"] > 0
        assert rep["evidence"]["interpretation"]
        assert len(rep["labs"]) == 4
        assert result.lab_samples is not None

    def test_hierarchical_needs_grouped(self, example_dataset):
        config = AnalysisConfig(model="hierarchical")
        with pytest.raises(ValidationError):
            run_analysis(config, example_dataset)

    def test_hierarchical_mcmc_rejected(self):
        with pytest.raises(ValidationError):
            AnalysisConfig(model="hierarchical", inference="mcmc")

    def test_threshold_order_enforced(self):
        with pytest.raises(ValidationError):
            AnalysisConfig(alert_threshold=0.01, action_threshold=0.02)

    def test_report_determinism(self, example_dataset, tmp_path):
        config = AnalysisConfig(seed=11, n_samples=200)
        r1 = run_analysis(config, example_dataset)
        r2 = run_analysis(config, example_dataset)
        assert r1.payload_bytes() == r2.payload_bytes()
        out1, out2 = tmp_path / "a", tmp_path / "b"
        p1, p2 = r1.write(out1), r2.write(out2)
        for key in p1:
            if key == "report":
                continue  # report.json carries the timestamp block
            assert p1[key].read_bytes() == p2[key].read_bytes()

    def test_selection_histogram_sidecar(self, example_dataset, tmp_path):
        config = AnalysisConfig(seed=1, n_samples=150)
        paths = run_analysis(config, example_dataset).write(tmp_path / "out")
        lines = paths["selection_histogram"].read_text().strip().splitlines()
        assert lines[0] == "element\tcount"
        counts = {row.split("\t")[0]: int(row.split("\t")[1]) for row in lines[1:]}
        assert counts["2"] == 11 and counts["10"] == 0


class TestCheckDistribution:
    def test_fisher_gof(self):
        fam = DispersionFamily(FamilyKind.FISHER, 3, 7)
        g = GroundSet(10)
        center = Subset.from_indices(g, [0, 1, 2])
        rep = check_distribution(fam, 0.5, center, n_draws=100_000, seed=0)
        assert rep.p_value > 0.01
        assert rep.monotonicity == "decreasing"

    def test_fisher_uniform_verdict(self):
        fam = DispersionFamily(FamilyKind.FISHER, 3, 7)
        g = GroundSet(10)
        center = Subset.from_indices(g, [0, 1, 2])
        rep = check_distribution(fam, 1.0, center, n_draws=2000, seed=0)
        assert rep.monotonicity == "non-increasing"

    def test_binomial_neither_verdict(self):
        fam = DispersionFamily(FamilyKind.BINOMIAL, 3, 7)
        g = GroundSet(10)
        center = Subset.from_indices(g, [0, 1, 2])
        rep = check_distribution(fam, 0.9, center, n_draws=2000, seed=0)
        assert rep.monotonicity == "neither"


class TestCli:
    def run(self, *args, env=None):
        return CliRunner().invoke(cli_main, list(args), env=env)

    def test_fit_example(self, example_csv, tmp_path):
        out = tmp_path / "out"
        res = self.run(
            "fit", "--data", str(example_csv), "-M", "10", "-n", "3",
            "--seed", "1", "--out", str(out),
        )
        assert res.exit_code == 0, res.output
        assert "posterior mode: {1,2,3}" in res.output
        report = json.loads((out / "report.json").read_text())
        assert report["schema_version"] == 1
        assert report["report"]["posterior_center"][0]["probability"] >= 1 - 1e-6
        for sidecar in ("posterior_a.tsv", "u_samples.tsv", "selection_histogram.tsv"):
            assert (out / sidecar).exists()

    def test_signals_output(self, example_csv):
        res = self.run(
            "signals", "--data", str(example_csv), "-M", "10", "-n", "3",
            "--seed", "1",
        )
        assert res.exit_code == 0, res.output
        line = [l for l in res.output.splitlines() if l.startswith("X12")][0]
        assert line.endswith("action")

    def test_exit_code_validation(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("lab,operator,item_1,item_2,item_3\nL1,op1,2,2,3\n")
        res = self.run("fit", "--data", str(bad), "-M", "10", "-n", "3")
        assert res.exit_code == 2

    def test_exit_code_budget(self, example_csv):
        res = self.run(
            "fit", "--data", str(example_csv), "-M", "10", "-n", "3",
            "--budget", "10",
        )
        assert res.exit_code == 3

    def test_simulate_then_fit(self, tmp_path):
        sim = tmp_path / "sim.csv"
        res = self.run(
            "simulate", "-M", "8", "-n", "3", "--u", "0.05", "--labs", "2",
            "--group-sizes", "3", "--lab-u", "0.1", "--seed", "3",
            "--out", str(sim),
        )
        assert res.exit_code == 0, res.output
        truth = json.loads(sim.with_suffix(".truth.json").read_text())
        assert truth["center"] == ["1", "2", "3"]
        assert len(truth["labs"]) == 2
        res = self.run(
            "bayes-factor", "--data", str(sim), "-M", "8", "-n", "3",
            "--n-mc", "300", "--seed", "3",
        )
        assert res.exit_code == 0, res.output
        assert "log_bayes_factor" in res.output

    def test_check_distribution_cmd(self):
        res = self.run(
            "check-distribution", "--family", "fisher", "--u", "0.5",
            "-M", "10", "-n", "3", "--draws", "20000", "--seed", "0",
        )
        assert res.exit_code == 0, res.output
        assert "monotonicity: decreasing" in res.output

    def test_cache_build_and_info(self, tmp_path):
        grouped_csv = tmp_path / "grouped.csv"
        grouped_csv.write_text(
            "lab,operator,item_1,item_2\nL1,op1,1,2\nL1,op2,2,3\nL2,op1,3,4\n"
        )
        cache = tmp_path / "tables.bin"
        res = self.run(
            "cache", "build", "--data", str(grouped_csv), "-M", "6", "-n", "2",
            "--out", str(cache),
        )
        assert res.exit_code == 0, res.output
        res = self.run("cache", "info", str(cache))
        assert res.exit_code == 0
        assert "lab tables: 2" in res.output

    def test_fit_hierarchical_with_cache(self, tmp_path):
        grouped_csv = tmp_path / "grouped.csv"
        grouped_csv.write_text(
            "lab,operator,item_1,item_2\n"
            "L1,op1,1,2\nL1,op2,2,3\nL2,op1,3,4\nL2,op2,3,4\n"
        )
        cache = tmp_path / "tables.bin"
        args = [
            "fit", "--data", str(grouped_csv), "-M", "6", "-n", "2",
            "--model", "hierarchical", "--n-mc", "200", "--n-samples", "100",
            "--seed", "4", "--dtable-cache", str(cache),
        ]
        res = self.run(*args, "--out", str(tmp_path / "out1"))
        assert res.exit_code == 0, res.output
        assert cache.exists()
        stamp = cache.stat().st_mtime_ns
        res = self.run(*args, "--out", str(tmp_path / "out2"))
        assert res.exit_code == 0, res.output
        assert cache.stat().st_mtime_ns == stamp  # second run reused it
        r1 = json.loads((tmp_path / "out1" / "report.json").read_text())
        r2 = json.loads((tmp_path / "out2" / "report.json").read_text())
        assert r1["report"] == r2["report"]

    def test_config_file_defaults(self, example_csv, tmp_path):
        cfg = tmp_path / "ilcset.toml"
        cfg.write_text('seed = 9\nn_samples = 150\n')
        out = tmp_path / "out"
        res = self.run(
            "--config", str(cfg), "fit", "--data", str(example_csv),
            "-M", "10", "-n", "3", "--out", str(out),
        )
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        assert report["metadata"]["seed"] == 9
        assert report["metadata"]["config"]["n_samples"] == 150

    def test_env_var_default(self, example_csv, tmp_path):
        out = tmp_path / "out"
        res = self.run(
            "fit", "--data", str(example_csv), "-M", "10", "-n", "3",
            "--out", str(out),
            env={"ILCSET_FIT_SEED": "7"},
        )
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        assert report["metadata"]["seed"] == 7
