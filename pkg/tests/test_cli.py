import json

import pytest

from asyncmic import cli

SMALL_TRAIN = {
    "steps": 2, "batch_size": 2, "eval_every": 1, "n_val": 2,
    "backbone": {"d_hidden": 16, "n_blocks": 1},
    "delayed_copy": {"pool_size": 2, "noise_pool_size": 2, "duration_s": 0.5, "max_image_order": 1},
}
SMALL_SCENES = {"preset": "desk", "duration_s": 0.5, "n_noise_sources": 2, "max_image_order": 1,
                "n_mics": [2, 3]}


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_subcommand(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert error_of(capsys)["exit"] == 2


def test_missing_config(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in error_of(capsys)["message"]


def test_bad_override_and_unknown_key(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", SMALL_TRAIN)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path), "noequals"]) == 2
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path), "stepz=3"]) == 2
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path), "--workers", "0"]) == 2


def test_apply_overrides():
    cfg = cli.apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=[1, 2]", "d=text"])
    assert cfg == {"a": {"b": 2, "c": [1, 2]}, "d": "text"}
    with pytest.raises(cli.UsageError):
        cli.apply_overrides({"a": 1}, ["a.b=2"])


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    assert cli.resolve_seed(None, 7) == 7
    assert cli.resolve_seed(None) == 0
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert cli.resolve_seed(None, 7) == 5
    assert cli.resolve_seed(3, 7) == 3
    monkeypatch.setenv(cli.SEED_ENV, "x")
    with pytest.raises(cli.UsageError):
        cli.resolve_seed(None)


def test_simulate_deterministic(tmp_path, capsys):
    cfg = write(tmp_path, "d.json", SMALL_SCENES)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--count", "2", "--seed", "1"]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--count", "2", "--seed", "1",
                     "--workers", "2"]) == 0
    for i in range(2):
        for f in ("mic_00.wav", "target.wav", "metadata.json"):
            a = (tmp_path / "a" / f"scene_{i:03d}" / f).read_bytes()
            assert a == (tmp_path / "b" / f"scene_{i:03d}" / f).read_bytes()


def test_simulate_spec_and_geometry_error(tmp_path, capsys):
    spec = {"room": {"dims": [4, 4, 3], "reflection_coeff": 0.5, "max_image_order": 1},
            "speakers": [{"position": [1, 1, 1.5]}], "mics": [{"position": [2, 2, 1.2]}],
            "duration_s": 0.5, "n_noise_sources": 2}
    assert cli.main(["simulate", "--config", write(tmp_path, "s.json", spec), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "scene_000" / "mic_00.wav").is_file()
    spec["mics"] = [{"position": [9, 2, 1.2]}]
    assert cli.main(["simulate", "--config", write(tmp_path, "s.json", spec), "--out", str(tmp_path / "o")]) == 2
    assert error_of(capsys)["error"] == "GeometryError"


def test_train_then_eval(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", SMALL_TRAIN)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert (out / "metrics.csv").is_file() and json.loads((out / "config.json").read_text())["seed"] == 3
    assert cli.main(["eval", "--checkpoint", info["checkpoint"], "--out", str(tmp_path / "ev"),
                     "--count", "2"]) == 0
    assert len((tmp_path / "ev" / "eval_scenes.csv").read_text().strip().splitlines()) == 3
    # evaluate on a simulated scene directory as well
    scenes = write(tmp_path, "d.json", SMALL_SCENES)
    assert cli.main(["simulate", "--config", scenes, "--out", str(tmp_path / "sc"), "--count", "2"]) == 0
    assert cli.main(["eval", "--checkpoint", info["checkpoint"], "--out", str(tmp_path / "ev2"),
                     "--scenes", str(tmp_path / "sc")]) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 2


def test_compare(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", SMALL_TRAIN)
    assert cli.main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp"), "--count", "1"]) == 0
    assert (tmp_path / "cmp" / "report.md").is_file()
    assert cli.main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp"), "--kinds", "LSTM"]) == 2


def test_bench(tmp_path, capsys):
    cfg = write(tmp_path, "b.json", {"T": [512, 1024], "d": 8})
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert "memory_ratio" in capsys.readouterr().out
    assert (tmp_path / "b" / "ratios.csv").is_file()
    cfg = write(tmp_path, "b2.json", {"bogus": 1})
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 2


def test_gradcheck_exit_zero(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "end_to_end" in out and "WindowedXAttn" in out
