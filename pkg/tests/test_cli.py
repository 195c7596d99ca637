import subprocess
import sys

import pandas as pd
import pytest
import yaml
from scipy import special

from crtimpute.cli import _index_list, main


def test_index_list():
    assert _index_list("0,5,10-12") == [0, 5, 10, 11, 12]


def test_calibrate_eta_zero(capsys):
    assert main(["calibrate", "--mechanism", "individual", "--eta", "0", "--target", "0.2"]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header == "mechanism,eta,target,alpha0"
    assert float(row.split(",")[-1]) == pytest.approx(special.logit(0.2), abs=1e-10)


def test_bad_target_exits_with_error(capsys):
    assert main(["calibrate", "--mechanism", "individual", "--eta", "1", "--target", "1.5"]) == 2
    assert "error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"factors": {"mechanism": "individual", "design": "few_large", "eta": "low",
                                               "nonresponse": "equal", "icc": ["low", "high"]},
                                   "run": {"M": 2, "burn_in": 10, "thin": 2}}))
    out = root / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "9", "--replicates", "3",
                 "--methods", "CCA,SMI"]) == 0
    return out


def test_run_writes_outputs(run_dir):
    records = pd.read_csv(run_dir / "records.csv")
    assert len(records) == 2 * 3 * 2 * 2
    assert set(records["method"]) == {"CCA", "SMI"}
    assert (run_dir / "performance.csv").exists() and (run_dir / "scenarios.yaml").exists()


def test_summarize(run_dir, tmp_path):
    assert main(["summarize", "--in", str(run_dir), "--out", str(tmp_path)]) == 0
    cov = pd.read_csv(tmp_path / "table_coverage.csv")
    assert len(cov) == 2 * 2 * 2 and "overcoverage" in cov.columns


def test_anova_needs_residual_df(run_dir, tmp_path, capsys):
    # two scenarios differing in one factor leave no residual degrees of freedom
    assert main(["anova", "--in", str(run_dir), "--measure", "coverage", "--out", str(tmp_path / "a.csv")]) == 2
    assert "saturated" in capsys.readouterr().err


def test_unknown_scenario_index(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--out", str(tmp_path), "--scenarios", "999", "--replicates", "1"])


def test_acceptance_subcommand(tmp_path, capsys):
    suite = tmp_path / "suite.yaml"
    suite.write_text("cases:\n  - name: oracles\n    check: oracles\n")
    assert main(["acceptance", "--suite", str(suite), "--out", str(tmp_path / "report.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(l.startswith("PASS") for l in lines)
    assert len(pd.read_csv(tmp_path / "report.csv")) == 5


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "crtimpute", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "calibrate", "summarize", "anova", "acceptance"):
        assert cmd in out.stdout


def test_anova_on_performance_table(tmp_path):
    from test_anova import perf_frame

    perf_frame().to_csv(tmp_path / "performance.csv", index=False)
    out = tmp_path / "anova" / "coverage.csv"
    assert main(["anova", "--in", str(tmp_path), "--measure", "coverage", "--out", str(out)]) == 0
    table = pd.read_csv(out)
    scaled = pd.read_csv(out.with_name("coverage_scaled.csv"))
    assert {"method", "outcome", "term", "F"} <= set(table.columns)
    assert list(scaled.columns[:4]) == ["method", "measure", "term", "scaled_value"]
