import json

import numpy as np
import pytest
import yaml

from needlecheck.cli import EXIT_OK, EXIT_USAGE, EXIT_VIOLATED, RunConfig, classify, main
from needlecheck.problem import UsageError


def _run(tmp_path, *args, config=None):
    argv = list(args) + ["--out", str(tmp_path)]
    if config is not None:
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump(config))
        argv += ["--config", str(cfg)]
    return main(argv)


def test_examples_listing(tmp_path, capsys):
    assert _run(tmp_path, "examples") == EXIT_OK
    out = capsys.readouterr().out
    assert "example1" in out and "example2" in out
    assert (tmp_path / "examples.csv").exists()
    assert (tmp_path / "manifest_examples.json").exists()


def test_simulate_example2_zero_cost(tmp_path):
    assert _run(tmp_path, "simulate", "--problem", "example2", "--paths", "50", "--steps", "64") == 0
    cost = json.loads((tmp_path / "cost.json").read_text())
    assert cost["cost"] == 0.0
    assert (tmp_path / "trajectory.png").stat().st_size > 0
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,mean_x1,std_x1"


def test_adjoint_outputs(tmp_path):
    code = _run(tmp_path, "adjoint", "--problem", "example1", "--order", "2", "--steps", "64",
                "--paths", "50")
    assert code == EXIT_OK
    lines = (tmp_path / "adjoint_p2.csv").read_text().splitlines()
    assert lines[0] == "t,p2_11,q2_11"
    assert all(float(line.split(",")[1]) == pytest.approx(1.0) for line in lines[1:])
    assert not (tmp_path / "adjoint_p1.csv").exists()
    out = tmp_path / "ex2"
    assert _run(out, "adjoint", "--problem", "example2", "--steps", "1000", "--paths", "50") == 0
    summary = json.loads((out / "adjoints.json").read_text())
    assert summary["p4"]["at_t0"][0] == pytest.approx(-403.42879349, rel=1e-6)
    assert (out / "adjoints.png").exists()


def test_usage_errors(tmp_path, capsys):
    assert _run(tmp_path, "simulate", "--paths", "0") == EXIT_USAGE
    assert "paths" in capsys.readouterr().err
    assert _run(tmp_path, "simulate", config={"bogus": 1}) == EXIT_USAGE
    assert _run(tmp_path, "simulate", "--problem", "nope") == EXIT_USAGE
    with pytest.raises(UsageError):
        RunConfig.from_dict({"ito": {"colour": 1}})


def test_config_digest_ignores_output_dir():
    a = RunConfig.from_dict({"seed": 3, "out": "a"})
    b = RunConfig.from_dict({"seed": 3, "out": "b"})
    c = RunConfig.from_dict({"seed": 4, "out": "a"})
    assert a.digest() == b.digest() != c.digest()


@pytest.mark.parametrize("problem,code,text", [
    ("example1", EXIT_VIOLATED, "singular; second-order VIOLATED ⇒ not optimal"),
    ("example2", EXIT_OK, "singular optimal candidate; second-order satisfied"),
])
def test_check_summary(tmp_path, capsys, problem, code, text):
    cfg = {"problem": problem, "steps": 64, "paths": 300, "V": [[-1.0], [0.0], [1.0]]}
    assert _run(tmp_path, "check", config=cfg) == code
    assert text in capsys.readouterr().out
    summary = json.loads((tmp_path / "check_summary.json").read_text())
    assert summary["summary"] == text
    for test in ("first_order", "second_order_pointwise", "second_order_zero_s"):
        assert (tmp_path / f"check_{test}.csv").exists()
        assert (tmp_path / f"check_{test}.png").exists()
    manifest = json.loads((tmp_path / "manifest_check.json").read_text())
    assert manifest["status"] == ("violated" if code else "ok")
    assert "check_summary.json" in manifest["outputs"]


def test_classify():
    assert classify("violated", True, "satisfied").startswith("first-order VIOLATED")
    assert "not singular" in classify("satisfied", False, None)
    assert classify("satisfied", True, "inconclusive") == "singular; second-order inconclusive"


def test_rerun_is_byte_identical(tmp_path):
    args = ("simulate", "--problem", "gbm", "--paths", "40", "--steps", "32", "--seed", "7")
    assert _run(tmp_path / "a", *args) == 0
    assert _run(tmp_path / "b", *args) == 0
    ma = json.loads((tmp_path / "a" / "manifest_simulate.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest_simulate.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]
    assert {k: v["sha256"] for k, v in ma["outputs"].items()} == \
        {k: v["sha256"] for k, v in mb["outputs"].items()}
    for name in ("trajectory.csv", "cost.json", "trajectory.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_increments(tmp_path):
    assert _run(tmp_path / "a", "simulate", "--problem", "gbm", "--paths", "20", "--steps", "16") == 0
    assert _run(tmp_path / "b", "simulate", "--problem", "gbm", "--paths", "20", "--steps", "16",
                "--seed", "1") == 0
    a = json.loads((tmp_path / "a" / "cost.json").read_text())
    b = json.loads((tmp_path / "b" / "cost.json").read_text())
    assert a["increments_sha256"] != b["increments_sha256"]
    assert np.isfinite(a["cost"])
