import pytest

from oracle_grasp.config import OracleSettings, build_settings, load_settings, make_oracle
from oracle_grasp.geometry import Point
from oracle_grasp.oracle import HttpOracle, ReplayOracle, ScriptedOracle
from oracle_grasp.pipeline import ConfigError
from oracle_grasp.transcript import OracleTranscript, write_transcript


def test_defaults():
    s = build_settings()
    assert s.pipeline.grp_iterations == 6 and s.focal_length_px == 500 and s.clearance_radius_m == 0.04
    assert s.oracle.backend == "scripted" and s.oracle.temperature == 0.6


def test_file_sections_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(
        "pipeline:\n  stop_window: 2\n  grp_iterations: 5\n"
        "camera:\n  focal_length_px: 600\n"
        "gripper:\n  clearance_radius_m: 0.05\n"
        "oracle:\n  backend: http\n  endpoint: http://x/v1\n"
    )
    s = load_settings(p, pipeline_overrides={"stop_window": 1, "iou_threshold": None})
    assert (s.pipeline.stop_window, s.pipeline.grp_iterations, s.pipeline.iou_threshold) == (1, 5, 0.4)
    assert (s.focal_length_px, s.clearance_radius_m, s.oracle.endpoint) == (600, 0.05, "http://x/v1")


@pytest.mark.parametrize(
    "doc",
    [
        {"robot": {}},
        {"pipeline": {"K": 3}},
        {"pipeline": []},
        {"oracle": {"backend": "magic"}},
        {"oracle": {"colour": 1}},
        {"camera": {"focal_length_px": -1}},
        {"pipeline": {"stop_window": "three"}},
    ],
)
def test_bad_config(doc):
    with pytest.raises(ConfigError):
        build_settings(doc)


def test_digest_tracks_prediction_settings_only():
    a = build_settings()
    assert a.digest() == build_settings({"oracle": {"seed": 9}}).digest()
    assert a.digest() != build_settings({"camera": {"focal_length_px": 501}}).digest()
    assert a.digest() != build_settings(pipeline_overrides={"use_scp": False}).digest()


def test_make_oracle_backends(tmp_path, monkeypatch):
    assert isinstance(make_oracle(OracleSettings(), Point(1, 1)), ScriptedOracle)
    with pytest.raises(ConfigError):
        make_oracle(OracleSettings())
    write_transcript(tmp_path / "t.jsonl", OracleTranscript())
    assert isinstance(make_oracle(OracleSettings(backend="replay", transcript=str(tmp_path / "t.jsonl"))),
                      ReplayOracle)
    with pytest.raises(ConfigError):
        make_oracle(OracleSettings(backend="replay"))
    o = make_oracle(OracleSettings(backend="http", endpoint="http://x/v1", model="m"))
    assert isinstance(o, HttpOracle) and o.model == "m"
    o.close()
