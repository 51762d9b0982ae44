import json

import pytest

from plansafe.cli import COMMANDS, build_parser, main

TINY = {
    "model": {"d_model": 8, "heads": 2},
    "train": {"epochs": 1, "batch": 2, "plans_per_scene": 8, "val_fraction": 0.3},
    "frt": {"n_xy_3d": 21, "n_theta_3d": 9, "n_xy_4d": 11, "n_theta_4d": 7, "n_v_4d": 5, "speeds_3d": [0.0, 15.0], "speeds_4d": [0.0, 15.0]},
    "game": {"extent": 40.0, "n_xy": 21, "n_theta": 9, "speeds": [0.0, 15.0]},
    "eval": {"n_boot": 10},
    "heatmap": {"resolution": 20.0},
    "bench": {"repeats": 1, "warmup": 0, "n_plans": 16},
}


def test_help_lists_every_flag(capsys):
    assert main(["--help"]) == 0
    parser = build_parser()
    sub = parser._subparsers._group_actions[0]
    for name in COMMANDS:
        p = sub.choices[name]
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"
        assert main([name, "--help"]) == 0


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["nonsense"]) == 1
    assert main(["gen-data", "--n", "2"]) == 1  # missing --out
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-scenes", "--n", "1", "--out", str(tmp_path), "--config", str(cfg)]) == 1
    assert "unknown" in capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def run(workdir, *argv):
    return main(list(argv) + ["--config", str(workdir / "cfg.json"), "--seed", "3"])


def test_pipeline(workdir, capsys):
    d = workdir
    assert run(d, "gen-scenes", "--n", "2", "--out", str(d / "scenes")) == 0
    assert sorted(p.name for p in (d / "scenes").glob("scene_*.json")) == ["scene_00000.json", "scene_00001.json"]
    assert run(d, "gen-data", "--n", "4", "--out", str(d / "data.jsonl"), "--p-no-failure", "0.25") == 0
    meta = json.loads((d / "meta.json").read_text())
    assert meta["n_samples"] == 4
    assert run(d, "reach-precompute", "--out", str(d / "tables")) == 0
    assert len(list((d / "tables").glob("*.vgrd"))) == 2 + 2 + 4
    assert run(d, "train", "--data", str(d / "data.jsonl"), "--out", str(d / "model")) == 0
    assert (d / "model" / "model.spqm").read_bytes()[:4] == b"SPQM"
    assert len((d / "model" / "train_log.jsonl").read_text().splitlines()) == 1
    run_cfg = json.loads((d / "model" / "run_config.json").read_text())
    assert run_cfg["config"]["model"]["d_model"] == 8 and len(run_cfg["hash"]) == 16

    ck = str(d / "model" / "model.spqm")
    assert run(d, "eval", "--data", str(d / "data.jsonl"), "--checkpoint", ck, "--tables", str(d / "tables"), "--out", str(d / "eval"), "--filter-data", str(d / "data.jsonl")) == 0
    for m in ("monitor", "frt3d", "frt4d", "game"):
        assert (d / "eval" / f"confusion_{m}.csv").exists()
    text = (d / "eval" / "metrics.csv").read_text().splitlines()
    assert text[0].startswith("method,") and len(text) == 5
    assert "flagged" in json.loads((d / "eval" / "filter.json").read_text())

    scene = str(d / "scenes" / "scene_00000.json")
    capsys.readouterr()
    assert run(d, "monitor", "--scene", scene, "--checkpoint", ck, "--failure", "30,0,3.1,5") == 0
    verdict = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert verdict["class"] in ("Safe", "Risky", "Critical") and len(verdict["candidate_probs"]) == 3
    assert run(d, "monitor", "--scene", scene, "--checkpoint", ck, "--failure", "1,2") == 1

    assert run(d, "heatmap", "--scene", scene, "--checkpoint", ck, "--out", str(d / "hm"), "--svg") == 0
    rows = (d / "hm" / "grid.csv").read_text().splitlines()
    assert rows[0] == "x_local,y_local,x,y,class" and len(rows) == 1 + 6 * 5
    assert (d / "hm" / "grid.svg").read_text().startswith("<svg")

    assert run(d, "bench", "--checkpoint", ck, "--out", str(d / "bench")) == 0
    b = json.loads((d / "bench" / "bench.json").read_text())
    assert b["n_plans"] == 16 and b["batched"]["hz"] > 0


def test_eval_monitor_needs_checkpoint(workdir):
    d = workdir
    if not (d / "data.jsonl").exists():
        pytest.skip("pipeline test did not run")
    assert run(d, "eval", "--data", str(d / "data.jsonl"), "--out", str(d / "e2"), "--methods", "monitor") == 1
    assert run(d, "eval", "--data", str(d / "data.jsonl"), "--out", str(d / "e3"), "--methods", "frt3d") == 2


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "2", "--seed", "9", "--out", str(tmp_path / name / "d.jsonl")]) == 0
    assert (tmp_path / "a" / "d.jsonl").read_bytes() == (tmp_path / "b" / "d.jsonl").read_bytes()
