import csv
import json

import pytest

from walnuts import cli, oracles


def run(args):
    return cli.main(args)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_sample_writes_outputs(tmp_path):
    out = tmp_path / "run"
    code = run(["sample", "--target", "std_gaussian", "--dim", "100", "--sampler", "walnuts_d", "--h", "0.443",
                "--delta", "0.3", "--iters", "60", "--seed", "7", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "draws.csv")
    assert rows[0] == [f"theta{k + 1}" for k in range(100)]
    assert len(rows) == 61
    stats = read_csv(out / "stats.csv")
    assert stats[0][:3] == ["chain", "iter", "i"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == cli.SCHEMA_VERSION
    assert "ess" in summary["summary"]["parameters"][rows[0][0]]
    assert summary["total_gradients"] > 0 and summary["warning"] is None


def test_sample_is_deterministic(tmp_path):
    args = ["sample", "--target", "funnel", "--d", "4", "--iters", "30", "--warmup", "40", "--seed", "3", "--chains", "2"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "draws.csv").read_bytes() == (tmp_path / "b" / "draws.csv").read_bytes()
    assert (tmp_path / "a" / "stats.csv").read_bytes() == (tmp_path / "b" / "stats.csv").read_bytes()
    header = read_csv(tmp_path / "a" / "stats.csv")[0]
    assert header[-2:] == ["min_omega", "max_omega"]
    draws = read_csv(tmp_path / "a" / "draws.csv")
    assert draws[0][0] == "omega" and len(draws) == 61


def test_worker_pool_matches_serial(tmp_path):
    args = ["sample", "--target", "std_gaussian", "--dim", "3", "--iters", "20", "--chains", "2", "--seed", "1"]
    assert run(args + ["--out", str(tmp_path / "s")]) == 0
    assert run(args + ["--workers", "2", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "s" / "draws.csv").read_bytes() == (tmp_path / "p" / "draws.csv").read_bytes()


def test_draws_roundtrip_full_precision(tmp_path):
    out = tmp_path / "r"
    assert run(["sample", "--dim", "2", "--iters", "12", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    rows = read_csv(out / "draws.csv")[1:]
    first = [float(r[0]) for r in rows]
    assert max(first) == summary["summary"]["parameters"]["theta1"]["max"]
    assert all(repr(float(v)) == v for r in rows for v in r)


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\ntarget = funnel\nd = 3\nh = 0.25\niters = 15\n")
    out = tmp_path / "o"
    assert run(["sample", "--config", str(cfg), "--h", "0.3", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["target"] == "funnel"
    assert summary["config"]["h"] == 0.3
    assert summary["config"]["iters"] == 15


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert run(["sample", "--dim", "2", "--iters", "12"]) == 0
    assert (tmp_path / "env" / "draws.csv").exists()


@pytest.mark.parametrize(
    "args",
    [
        ["sample", "--chains", "0"],
        ["sample", "--h", "-1"],
        ["sample", "--data", "/nonexistent.csv", "--target", "stock_watson"],
        ["sample", "--sampler", "exact_bp", "--target", "funnel"],
        ["sample", "--config", "/nonexistent.cfg"],
        ["validate", "bogus"],
        ["tune", "--warmup", "0"],
    ],
)
def test_usage_errors_exit_2(args, tmp_path):
    assert run(args + ([] if args[0] == "validate" else ["--out", str(tmp_path)])) == 2


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stepsize = 1\n")
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_tune_writes_parameters(tmp_path):
    out = tmp_path / "t"
    assert run(["tune", "--target", "std_gaussian", "--dim", "2", "--warmup", "80", "--out", str(out)]) == 0
    tuned = json.loads((out / "tuned.json").read_text())["tuned"][0]
    assert tuned["h"] > 0 and tuned["delta"] > 0


def test_validate_exit_codes(monkeypatch, capsys):
    assert run(["validate", "triangular", "--m", "5", "--n", "200000"]) == 0
    assert "PASS triangular_chi2_p" in capsys.readouterr().out
    failing = lambda **kw: [oracles.CheckResult("always_fails", False, 1.0, 0.0)]
    monkeypatch.setitem(oracles.SUITES, "triangular", failing)
    assert run(["validate", "triangular"]) == 1


def test_compare_matched_budget(tmp_path, capsys):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("target = funnel\nd = 5\nsampler = walnuts_r2p\nh = 0.36\ndelta = 0.21\niters = 60\n")
    b.write_text("target = funnel\nd = 5\nsampler = nuts\nh = 0.1\niters = 60\n")
    out = tmp_path / "cmp"
    assert run(["compare", str(a), str(b), "--match-nuts-step", "--out", str(out)]) == 0
    report = json.loads((out / "compare.json").read_text())
    assert report["b"]["total_gradients"] <= report["budget_per_chain"]
    assert report["b"]["h"] != 0.1
    assert "min" in report["a"] and "omega" in report["a"]["min"]
    assert "min(omega)" in capsys.readouterr().out


def test_compare_identical_configs(tmp_path):
    a = tmp_path / "a.cfg"
    a.write_text("target = std_gaussian\ndim = 3\niters = 30\n")
    out = tmp_path / "same"
    assert run(["compare", str(a), str(a), "--out", str(out)]) == 0
    report = json.loads((out / "compare.json").read_text())
    assert report["a"]["min"] == report["b"]["min"]
    assert report["a"]["total_gradients"] == report["b"]["total_gradients"]


def test_compare_budget_too_small(tmp_path):
    a = tmp_path / "a.cfg"
    a.write_text("target = std_gaussian\ndim = 3\n")
    assert run(["compare", str(a), str(a), "--budget", "1", "--out", str(tmp_path)]) == 2
