import csv
import json

import pytest

from mfctree.cli import main
from mfctree.config import ConfigError, ExperimentConfig

SMALL = """
[problem]
family = "lq"
params = { q = 0.5, q_T = 1.0, kappa = 0.5, kappa_bar = 0.5, sigma = 0.4, beta = 0.3 }

[grid]
K = 3

[particles]
N = 16
init_std = 0.5

[solver]
grad_tol = 1e-10
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def _run(config, tmp_path, command, *extra, out="out"):
    target = tmp_path / out
    code = main([command, "--config", str(config), "--out", str(target), *extra])
    return code, target


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = ExperimentConfig.load(None, ["grid.K=7", "problem.params.q=0.25", "checks.select=['dpp']"])
        assert cfg["grid"]["K"] == 7 and cfg["problem"]["params"]["q"] == 0.25
        assert cfg["checks"]["select"] == ["dpp"]

    @pytest.mark.parametrize("override", ["grid.L=3", "nokey", "=3", "run.seed=-1", "particles.N=zero"])
    def test_bad_overrides(self, override):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(None, [override])

    def test_parse_error_reports_position(self):
        with pytest.raises(ConfigError, match=r"line 2, column"):
            ExperimentConfig.from_toml("[grid]\nK = = 3\n")

    def test_hash_ignores_workers_and_output(self):
        a = ExperimentConfig.load(None, ["run.workers=4", "run.out='x'"])
        b = ExperimentConfig.load(None, [])
        c = ExperimentConfig.load(None, ["grid.K=5"])
        assert a.hash() == b.hash() != c.hash()


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nK = [1,\n")
    code = main(["solve", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "line" in capsys.readouterr().err


def test_refusal_exit_code(tmp_path):
    code = main(["solve", "--override", "problem.family='double-well-running-cost'", "--override",
                 "problem.params.w=3.0", "--override", "grid.K=2", "--override", "particles.N=4",
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_solve_outputs_and_manifest(config, tmp_path):
    code, out = _run(config, tmp_path, "solve", "--seed", "3")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert list(summary) == sorted(summary) and summary["seed"] == 3 and summary["converged"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == summary["config_hash"]
    assert set(manifest["versions"]) == {"mfctree", "numpy", "python"}
    assert manifest["wall_clock_seconds"] >= 0
    with open(out / "initial.csv") as fh:
        assert next(csv.reader(fh)) == ["particle", "x0", "u0", "z0"]


def test_summaries_bitwise_identical_across_workers(config, tmp_path):
    _, one = _run(config, tmp_path, "solve", "--workers", "1", out="w1")
    _, four = _run(config, tmp_path, "solve", "--workers", "4", out="w4")
    for name in ("summary.json", "initial.csv", "history.csv"):
        assert (one / name).read_bytes() == (four / name).read_bytes()


def test_lq_bench_columns(config, tmp_path):
    code, out = _run(config, tmp_path, "lq-bench", "--override", "bench.K_values=[2, 4]", "--override", "bench.N=8")
    assert code == 0
    with open(out / "lq_bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["K", "N", "B", "control_error_tree", "value_error_tree", "value_error_riccati",
                             "riccati_control_gap", "fitted_order"]
    assert all(float(r["control_error_tree"]) <= 1e-8 for r in rows)


def test_lq_bench_needs_lq_family(config, tmp_path):
    code, _ = _run(config, tmp_path, "lq-bench", "--override", "problem.family='random-smooth'",
                   "--override", "problem.params={seed=0}")
    assert code == 2


def test_derivatives_outputs(config, tmp_path):
    code, out = _run(config, tmp_path, "derivatives", "--override", "derivatives.x_num=3",
                     "--override", "derivatives.directions=2")
    assert code == 0
    with open(out / "U.csv") as fh:
        assert len(list(csv.reader(fh))) == 4
    spectra = json.loads((out / "derivatives.json").read_text())["second_derivative"]
    assert spectra["max_asymmetry"] <= 1e-6 and spectra["min"] > 0


def test_verify_prints_one_line_per_check(config, tmp_path, capsys):
    code, out = _run(config, tmp_path, "verify", "--override", "checks.select=['gradient', 'dpp', 'flow']")
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split(":")[0] for line in lines] == ["gradient_exactness", "dpp", "flow"]
    assert len(json.loads((out / "report.json").read_text())) == 3


def test_master_residual_command(config, tmp_path):
    code, out = _run(config, tmp_path, "master-residual", "--override", "problem.params.beta=0.0",
                     "--override", "grid.K=4", "--override", "particles.N=32")
    assert code == 0
    assert json.loads((out / "master.json").read_text())["status"] == "PASS"
