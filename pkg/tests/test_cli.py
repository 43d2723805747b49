import dataclasses
import json
import subprocess
import sys

import pytest

from oracle_grasp.cli import ABLATIONS, build_parser, main
from oracle_grasp.io import load_rgb
from oracle_grasp.pipeline import PipelineConfig
from oracle_grasp.transcript import read_transcript


@pytest.fixture
def scenes(tmp_path):
    out = tmp_path / "scenes"
    assert main(["synth", "--scene", "handle-hole", "--seed", "3", "--count", "3", "--out-dir", str(out)]) == 0
    return out


def run(args, capsys):
    code = main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_every_config_field_has_a_flag():
    helps = {name: sub.format_help() for name, sub in build_parser()._subparsers._group_actions[0].choices.items()}
    for cmd in ("predict", "batch-eval", "record", "replay"):
        for f in dataclasses.fields(PipelineConfig):
            assert "--" + f.name.replace("_", "-") in helps[cmd], (cmd, f.name)
        assert "--ablate" in helps[cmd] and "--config" in helps[cmd]
    assert set(ABLATIONS) == {"scp", "or", "be", "gr"}


def test_synth_outputs(scenes):
    names = sorted(p.name for p in scenes.iterdir())
    assert "manifest.json" in names and "handle-hole-000_depth.png" in names
    assert load_rgb(scenes / "handle-hole-001.png").shape == (240, 320, 3)


def test_synth_unknown_scene(tmp_path, capsys):
    code, _, err = run(["synth", "--scene", "teapot", "--out-dir", tmp_path], capsys)
    assert code == 2 and "unknown scene" in err


def test_predict_writes_result_and_overlay(scenes, tmp_path, capsys):
    out, ov = tmp_path / "r.json", tmp_path / "o.png"
    code, _, _ = run(["predict", scenes / "handle-hole-000.png", "--depth", scenes / "handle-hole-000_depth.png",
                      "--target", "150,100", "--out", out, "--overlay-out", ov], capsys)
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["early_stopped"] and doc["depth_refinement"]["refined"]
    assert load_rgb(ov).shape == (240, 320, 3)


def test_predict_to_stdout_and_flags(scenes, capsys):
    code, out, _ = run(["predict", scenes / "handle-hole-000.png", "--target", "10,10", "--no-use-scp",
                        "--grid-schedule", "3x3,4x4,5x5,6x6,7x7,8x8", "--overlay-color", "0,255,0",
                        "--stop-factor", "0.2"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["diagnostics"]["scene_context"] is None


def test_missing_image_is_usage_error(tmp_path, capsys):
    code, _, err = run(["predict", tmp_path / "none.png"], capsys)
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"].startswith("image not found")


def test_http_without_endpoint(scenes, capsys, monkeypatch):
    monkeypatch.delenv("ORACLE_GRASP_ENDPOINT", raising=False)
    code, _, err = run(["predict", scenes / "handle-hole-000.png", "--oracle", "http"], capsys)
    assert code == 2 and "endpoint not configured" in err


def test_bad_config_value(scenes, capsys):
    code, _, err = run(["predict", scenes / "handle-hole-000.png", "--stop-window", "9"], capsys)
    assert code == 2 and "stop_window" in err


def test_bad_flag_syntax(scenes):
    with pytest.raises(SystemExit) as e:
        main(["predict", str(scenes / "handle-hole-000.png"), "--grid-schedule", "3by3"])
    assert e.value.code == 2


def test_record_then_replay(scenes, tmp_path, capsys):
    img, t = scenes / "handle-hole-001.png", tmp_path / "t.jsonl"
    code, _, _ = run(["record", img, "--transcript", t, "--out", tmp_path / "a.json", "--noise-radius", "20",
                      "--seed", "7"], capsys)
    assert code == 0
    assert (tmp_path / "t.jsonl.images").is_dir() and (tmp_path / "t.jsonl.meta.json").is_file()
    assert read_transcript(t).kinds()[0] == "SCP"
    code, _, _ = run(["replay", img, "--transcript", t, "--out", tmp_path / "b.json"], capsys)
    assert code == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_replay_rejects_changed_config(scenes, tmp_path, capsys):
    img, t = scenes / "handle-hole-001.png", tmp_path / "t.jsonl"
    run(["record", img, "--transcript", t, "--out", tmp_path / "a.json"], capsys)
    code, _, err = run(["replay", img, "--transcript", t, "--iou-threshold", "0.5"], capsys)
    assert code == 1 and "config digest mismatch" in err


def test_replay_exhausted_transcript(scenes, tmp_path, capsys):
    img, t = scenes / "handle-hole-001.png", tmp_path / "t.jsonl"
    run(["record", img, "--transcript", t, "--out", tmp_path / "a.json"], capsys)
    lines = t.read_text().splitlines()
    t.write_text("\n".join(lines[:3]) + "\n")
    code, _, err = run(["replay", img, "--transcript", t], capsys)
    assert code == 1 and "transcript exhausted" in err


def test_replay_other_image(scenes, tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    run(["record", scenes / "handle-hole-001.png", "--transcript", t, "--out", tmp_path / "a.json"], capsys)
    code, _, err = run(["replay", scenes / "handle-hole-002.png", "--transcript", t], capsys)
    assert code == 1 and "image digest mismatch" in err


def test_batch_eval_report(scenes, tmp_path, capsys):
    rep = tmp_path / "rep.json"
    code, out, _ = run(["batch-eval", scenes / "manifest.json", "--out", rep, "--jobs", "3",
                        "--results-dir", tmp_path / "res"], capsys)
    assert code == 0 and "mean±std" in out
    doc = json.loads(rep.read_text())
    assert [r["image"] for r in doc["rows"]] == ["handle-hole-000", "handle-hole-001", "handle-hole-002"]
    assert all(r["depth_refined"] for r in doc["rows"])
    assert len(list((tmp_path / "res").iterdir())) == 3

    # same report regardless of concurrency
    rep1 = tmp_path / "rep1.json"
    run(["batch-eval", scenes / "manifest.json", "--out", rep1, "--jobs", "1"], capsys)
    assert json.loads(rep1.read_text())["rows"] == doc["rows"]


def test_batch_eval_ablations(scenes, tmp_path, capsys):
    rep = tmp_path / "rep.json"
    code, _, _ = run(["batch-eval", scenes / "manifest.json", "--out", rep, "--ablate", "gr", "--ablate", "scp"],
                     capsys)
    doc = json.loads(rep.read_text())
    assert code == 0 and doc["settings"]["ablations"] == ["gr", "scp"]
    assert doc["settings"]["depth_refinement"] is False
    assert not any(r["depth_refined"] for r in doc["rows"])


def test_batch_eval_missing_annotation(tmp_path, scenes, capsys):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"entries": [{"id": "x", "image": str(scenes / "handle-hole-000.png")}]}))
    code, _, err = run(["batch-eval", m], capsys)
    assert code == 2 and "without annotations" in err


def test_module_entry_point(scenes):
    proc = subprocess.run([sys.executable, "-m", "oracle_grasp.cli", "predict", str(scenes / "handle-hole-000.png"),
                           "--target", "5,5"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["pose"]["x"] < 60


def test_predict_via_server(scenes, tmp_path, capsys, monkeypatch):
    from fastapi.testclient import TestClient

    import httpx
    from oracle_grasp.service.app import create_app

    client = TestClient(create_app())
    monkeypatch.setattr(httpx, "post", lambda url, json, timeout: client.post(url.replace("http://svc", ""), json=json))
    local = tmp_path / "local.json"
    remote = tmp_path / "remote.json"
    args = ["predict", scenes / "handle-hole-000.png", "--depth", scenes / "handle-hole-000_depth.png",
            "--target", "150,100"]
    assert run(args + ["--out", local], capsys)[0] == 0
    assert run(args + ["--out", remote, "--server", "http://svc"], capsys)[0] == 0
    assert json.loads(local.read_text()) == json.loads(remote.read_text())


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--scene", "handle-hole", "--seed", "7", "--count", "2", "--out-dir",
                     str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_synth_bar_angle(tmp_path):
    assert main(["synth", "--scene", "bar", "--angle", "30", "--out-dir", str(tmp_path)]) == 0
    ann = json.loads((tmp_path / "bar.json").read_text())
    assert ann["grasps"][0]["theta_deg"] == 30


def test_batch_eval_partial_failure(scenes, tmp_path, capsys):
    (scenes / "handle-hole-001.png").write_bytes(b"not a png")
    rep = tmp_path / "rep.json"
    code, _, _ = run(["batch-eval", scenes / "manifest.json", "--out", rep], capsys)
    doc = json.loads(rep.read_text())
    assert code == 1
    assert list(doc["failures"]) == ["handle-hole-001"]
    assert [r["image"] for r in doc["rows"]] == ["handle-hole-000", "handle-hole-002"]


def test_every_argument_is_documented():
    for name, sub in build_parser()._subparsers._group_actions[0].choices.items():
        for action in sub._actions:
            if action.dest != "help":
                assert action.help, (name, action.dest)
