import csv
import json
from importlib import resources

import numpy as np
import pytest

from gaugerl.cli import EXIT_CERT, EXIT_INPUT, EXIT_OK, main
from gaugerl.plant import default_case_path

SCALAR = str(resources.files("gaugerl") / "data" / "scalar.json")
GRID = str(default_case_path())


@pytest.fixture(scope="module")
def grid_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    assert main(["synth", "--case", GRID, "--out", str(out)]) == EXIT_OK
    return out


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def test_synth_scalar(tmp_path):
    assert main(["synth", "--case", SCALAR, "--out", str(tmp_path)]) == EXIT_OK
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert "config_hash" in cert["meta"]
    report = json.loads((tmp_path / "synth_report.json").read_text())
    assert report["config_hash"] == cert["meta"]["config_hash"]
    assert main(["verify", "--case", SCALAR, "--cert", str(tmp_path / "certificate.json"),
                 "--out", str(tmp_path)]) == EXIT_OK


def test_synth_and_verify_grid(grid_dir, capsys):
    cert = grid_dir / "certificate.json"
    assert main(["verify", "--case", GRID, "--cert", str(cert), "--out", str(grid_dir)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("# config_hash=")
    assert json.loads((grid_dir / "verify_report.json").read_text())["valid"] is True


def test_tampered_certificate_exits_4(grid_dir, tmp_path, capsys):
    d = json.loads((grid_dir / "certificate.json").read_text())
    d["s_bar"] = [2.0 * s for s in d["s_bar"]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["verify", "--case", GRID, "--cert", str(bad), "--out", str(tmp_path)]) == EXIT_CERT
    assert "violated" in capsys.readouterr().err
    assert main(["eval", "--case", GRID, "--cert", str(bad), "--out", str(tmp_path), "--episodes", "1"]) == EXIT_CERT


def test_disconnected_case_exits_2(tmp_path):
    d = json.loads(open(GRID).read())
    gen_bus = d["generators"][0]["bus"]
    d["lines"] = [ln for ln in d["lines"] if gen_bus not in (ln["from"], ln["to"])]
    path = tmp_path / "cut.json"
    path.write_text(json.dumps(d))
    assert main(["synth", "--case", str(path), "--out", str(tmp_path)]) == EXIT_INPUT


def test_bad_inputs_exit_2(tmp_path):
    assert main(["synth", "--case", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["verify", "--case", SCALAR, "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["nonsense"]) == EXIT_INPUT
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"no_such_key": 1}}))
    main(["synth", "--case", SCALAR, "--out", str(tmp_path)])
    assert main(["train", "--case", SCALAR, "--cert", str(tmp_path / "certificate.json"), "--config", str(cfg),
                 "--out", str(tmp_path)]) == EXIT_INPUT


def test_train_single_step(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    assert main(["train", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--episodes", "1",
                 "--steps", "1"]) == EXIT_OK
    header, rows = read_csv(tmp_path / "train_safe.csv")
    assert header.startswith("# config_hash=") and len(rows) == 1
    assert (tmp_path / "safe_checkpoint.npz").exists()
    assert json.loads((tmp_path / "train_safe.json").read_text())["episodes"] == 1


def test_eval_linear_twice_identical(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    assert main(["eval", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--paired",
                 "--policies", "linear,linear", "--episodes", "5", "--steps", "20"]) == EXIT_OK
    s = json.loads((tmp_path / "eval.json").read_text())
    assert set(s["policies"]) == {"linear", "linear_2"}
    assert s["policies"]["linear"]["mean_cost"] == s["policies"]["linear_2"]["mean_cost"]
    assert s["paired"][0]["mean_diff"] == 0.0


def test_default_paired_eval_safe_has_no_violations(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    assert main(["eval", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--paired"]) == EXIT_OK
    s = json.loads((tmp_path / "eval.json").read_text())
    assert s["episodes"] == 100 and s["steps"] == 100
    assert s["policies"]["safe"]["violations"] == 0
    assert s["policies"]["safe"]["action_violations"] == 0


def test_train_then_eval_and_rollout_from_checkpoint(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    for kind in ("safe", "penalty"):
        assert main(["train", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--kind", kind,
                     "--episodes", "2", "--steps", "10"]) == EXIT_OK
    assert main(["eval", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--paired",
                 "--policies", "safe,penalty,linear", "--safe", str(tmp_path / "safe_checkpoint.npz"),
                 "--penalty", str(tmp_path / "penalty_checkpoint.npz"), "--episodes", "3", "--steps", "20"]) == EXIT_OK
    _, rows = read_csv(tmp_path / "eval.csv")
    assert len(rows) == 9 and {r["policy"] for r in rows} == {"safe", "penalty", "linear"}
    assert main(["rollout", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--policy", "safe",
                 "--checkpoint", str(tmp_path / "safe_checkpoint.npz"), "--steps", "15"]) == EXIT_OK
    _, rows = read_csv(tmp_path / "rollout_safe.csv")
    assert len(rows) == 15


def test_rollout_with_explicit_x0(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    assert main(["rollout", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--x0", "0,0,0,0,0,0",
                 "--steps", "5"]) == EXIT_OK
    _, rows = read_csv(tmp_path / "rollout_linear.csv")
    assert float(rows[0]["x_1"]) == 0.0 and float(rows[0]["max_abs_angle"]) == 0.0
    assert main(["rollout", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--x0", "0,0"]) == EXIT_INPUT


def test_reruns_are_byte_identical(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        # global flags may follow the subcommand
        assert main(["train", "--case", GRID, "--cert", cert, "--out", str(out), "--episodes", "2",
                     "--steps", "20", "--seed", "3"]) == EXIT_OK
        assert main(["eval", "--case", GRID, "--cert", cert, "--out", str(out), "--paired", "--episodes", "4",
                     "--steps", "20", "--safe", str(out / "safe_checkpoint.npz"), "--seed", "3"]) == EXIT_OK
        assert main(["--seed", "3", "synth", "--case", SCALAR, "--out", str(out)]) == EXIT_OK
        outs.append(out)
    a, b = outs
    for name in ("eval.csv", "eval.json", "certificate.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ha, ra = read_csv(a / "train_safe.csv")
    hb, rb = read_csv(b / "train_safe.csv")
    assert ha == hb
    for x, y in zip(ra, rb):
        x.pop("wallclock_s")
        y.pop("wallclock_s")
        assert x == y
    ca = np.load(a / "safe_checkpoint.npz")
    cb = np.load(b / "safe_checkpoint.npz")
    for key in ca.files:
        assert np.array_equal(ca[key], cb[key]), key


def test_hash_depends_on_seed(grid_dir, tmp_path):
    cert = str(grid_dir / "certificate.json")
    heads = []
    for seed in ("0", "1"):
        main(["rollout", "--case", GRID, "--cert", cert, "--out", str(tmp_path), "--seed", seed, "--steps", "2"])
        heads.append(read_csv(tmp_path / "rollout_linear.csv")[0])
    assert heads[0] != heads[1] and all(h.startswith("# config_hash=") for h in heads)
