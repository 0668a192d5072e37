import csv
import json
from fractions import Fraction

import numpy as np
import pytest

from lomaq_lab import harness
from lomaq_lab.cli import main
from lomaq_lab.lomaq import ConfigError

DECOUPLED_INI = """\
[run]
kind = train
seeds = 0 1 2
steps = 600
out = {out}

[env]
name = decoupled
mdp_seed = 3
horizon = 25

[algo]
eval_every = 200
eval_episodes = 3
eps_anneal = 400
"""


def write_ini(tmp_path, out, text=DECOUPLED_INI):
    p = tmp_path / "run.ini"
    p.write_text(text.format(out=out))
    return p


def test_load_config_parses_sections(tmp_path):
    cfg = harness.load_config(write_ini(tmp_path, "x"))
    assert cfg.kind == "train" and cfg.seeds == [0, 1, 2] and cfg.steps == 600
    assert cfg.env == {"name": "decoupled", "mdp_seed": 3, "horizon": 25}
    assert cfg.algo["eval_every"] == 200


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        harness.RunConfig(seeds=[]).validate()
    with pytest.raises(ConfigError):
        harness.RunConfig(kind="dance").validate()
    with pytest.raises(ConfigError):
        harness.RunConfig(algo={"partition": str(tmp_path / "nope.txt")}).validate()
    with pytest.raises(ConfigError):
        harness.lomaq_config({"learning_rate": 0.1})


def test_run_suite_three_seeds_and_rerun(tmp_path):
    cfg = harness.load_config(write_ini(tmp_path, str(tmp_path / "a")))
    root, ok = harness.run_suite(cfg)
    assert ok
    per_seed = {}
    for s in (0, 1, 2):
        d = root / f"seed_{s}"
        per_seed[s] = harness.read_metrics(d / "metrics.csv")
        assert [r["step"] for r in per_seed[s]] == [200, 400, 600]
        man = json.loads((d / "run.json").read_text())
        assert man["seed"] == s and man["algo"]["gamma"] == 0.9 and man["env"]["mdp_seed"] == 3
        assert (d / "ckpt_600.txt").exists()
    with open(root / "aggregate.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for row in rows:
        vals = [float(row[f"seed{s}"]) for s in (0, 1, 2)]
        assert float(row["min"]) <= float(row["mean"]) <= float(row["max"])
        assert float(row["mean"]) == float(np.mean(vals))
    cfg.out = str(tmp_path / "b")
    root_b, _ = harness.run_suite(cfg)
    for s in (0, 1, 2):
        a = (root / f"seed_{s}" / "metrics.csv").read_bytes()
        assert a == (root_b / f"seed_{s}" / "metrics.csv").read_bytes()


def test_failed_seed_preserves_artifacts(tmp_path):
    cfg = harness.load_config(write_ini(tmp_path, str(tmp_path / "f")))
    cfg.env["n_states"] = 0  # invalid chain
    root, ok = harness.run_suite(cfg)
    assert not ok
    assert (root / "seed_0" / "error.txt").exists()


def test_aggregate_matches_exact_mean():
    rng = np.random.default_rng(0)
    per_seed = {s: [{"step": t, "test_return_mean": float(rng.integers(0, 2000)) / 4} for t in (10, 20)]
                for s in range(3)}
    for row in harness.aggregate(per_seed):
        exact = sum(Fraction(row[f"seed{s}"]) for s in range(3)) / 3
        assert abs(Fraction(row["mean"]) - exact) <= Fraction(1, 2 ** 40)
        assert row["min"] <= row["mean"] <= row["max"]


def test_output_root_env_var(monkeypatch, tmp_path):
    monkeypatch.setenv("LOMAQ_LAB_OUT", str(tmp_path))
    assert harness.output_root("runs/x") == tmp_path / "runs" / "x"
    assert harness.output_root("/abs/y") == harness.Path("/abs/y")
    monkeypatch.delenv("LOMAQ_LAB_OUT")
    assert harness.output_root("runs/x") == harness.Path("runs/x")


def test_matrix_game_visitation_and_joint_fit():
    res = harness.matrix_game_experiment("joint", seed=0, steps=10_000)
    assert np.all(np.abs(res["visits"] - 0.25) <= 0.03)
    assert res["block_error"][0] <= 0.05


def test_cli_train_and_eval(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LOMAQ_LAB_OUT", str(tmp_path))
    ini = write_ini(tmp_path, "cli_runs")
    assert main(["train", "--config", str(ini), "--seed", "4", "--steps", "400"]) == 0
    ckpt = tmp_path / "cli_runs" / "seed_4" / "ckpt_400.txt"
    assert ckpt.exists()
    assert main(["eval", "--config", str(ini), "--checkpoint", str(ckpt), "--episodes", "5", "--out", "e.json"]) == 0
    stats = json.loads((tmp_path / "e.json").read_text())
    assert stats["episodes"] == 5
    assert stats["test_return_min"] <= stats["test_return_mean"] <= stats["test_return_max"]


def test_cli_bandit_run(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bandit-run", "--n", "2", "--k", "2", "--d", "2", "--horizon", "50", "--seeds", "0", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["seed", "t", "cumulative_regret"] and len(rows) == 1 + 2 * 50


def test_cli_matrix_game(tmp_path):
    out = tmp_path / "m.csv"
    assert main(["matrix-game", "--partition", "singletons", "--steps", "200", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 8 and {r["block"] for r in rows} == {"0", "1"}


def test_cli_decompose_viz(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["decompose-viz", "--max-card", "2", "--steps", "20", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert set(rows[0]) == {"dx1", "dx2", "r_I_name", "value"}
    assert {r["r_I_name"] for r in rows} == {"r_0", "r_1", "r_0_1", "r_pred"}
    assert len(rows) == 7 * 7 * 4


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 2
    assert "error" in capsys.readouterr().err
