import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from oracle_grasp.config import build_settings
from oracle_grasp.geometry import Point
from oracle_grasp.io import encode_depth_png, encode_png
from oracle_grasp.oracle import ScriptedOracle
from oracle_grasp.pipeline import PipelineConfig, predict_grasp
from oracle_grasp.service.app import create_app
from oracle_grasp.synth import handle_hole

from conftest import blank_image


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


@pytest.fixture
def client():
    return TestClient(create_app(build_settings()))


@pytest.fixture
def scene():
    return handle_hole(2)


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_predict_matches_in_process(client):
    img = blank_image(200, 160)
    r = client.post("/v1/predict", json={"image_png_b64": b64(encode_png(img)),
                                         "oracle": {"targets": [[40, 30]]}})
    assert r.status_code == 200, r.text
    local = predict_grasp(img, ScriptedOracle([Point(40, 30)]))
    assert r.json()["result"]["pose"] == {"x": local.pose.x, "y": local.pose.y, "theta_deg": local.pose.theta_deg}


def test_predict_with_depth_and_overrides(client, scene):
    body = {
        "image_png_b64": b64(encode_png(scene.rgb)),
        "depth_png_b64": b64(encode_depth_png(scene.depth)),
        "pipeline": {"use_scp": False},
        "focal_length_px": 500,
        "oracle": {"targets": [list(scene.annotation.grasps[0].position.as_tuple())]},
    }
    r = client.post("/v1/predict", json=body)
    doc = r.json()["result"]
    assert r.status_code == 200 and doc["depth_refinement"]["refined"]
    assert doc["diagnostics"]["scene_context"] is None


@pytest.mark.parametrize(
    "body,status",
    [
        ({"image_png_b64": "%%%"}, 422),
        ({"image_png_b64": b64(b"not a png")}, 422),
        ({"image_png_b64": b64(encode_png(blank_image(20, 20))), "pipeline": {"stop_window": 10}}, 422),
        ({"image_png_b64": b64(encode_png(blank_image(20, 20))), "pipeline": {"bogus": 1}}, 422),
        ({"image_png_b64": b64(encode_png(blank_image(20, 20))), "oracle": {"backend": "replay"}}, 422),
        ({"image_png": "x"}, 422),
    ],
)
def test_bad_requests(client, body, status):
    r = client.post("/v1/predict", json=body)
    assert r.status_code == status


def test_depth_size_mismatch(client):
    bad = encode_depth_png(np.full((5, 5), 500, dtype=np.uint16))
    r = client.post("/v1/predict", json={"image_png_b64": b64(encode_png(blank_image(20, 20))),
                                         "depth_png_b64": b64(bad)})
    assert r.status_code == 422 and "does not match" in r.json()["error"]


def test_unreachable_oracle_is_502(client):
    r = client.post("/v1/predict", json={"image_png_b64": b64(encode_png(blank_image(20, 20))),
                                         "oracle": {"backend": "http", "endpoint": "http://127.0.0.1:9/x",
                                                    "timeout": 1}})
    assert r.status_code == 502 and r.json()["type"] == "PipelineError"


def test_http_oracle_through_service(client, chat_stub):
    stub = chat_stub(["a ring"], default="GRID_CELL: 4")
    r = client.post("/v1/predict", json={"image_png_b64": b64(encode_png(blank_image(90, 90))),
                                         "oracle": {"backend": "http", "endpoint": stub.url}})
    assert r.status_code == 200
    assert r.json()["result"]["transcript"]["entries"] == len(stub.requests)


def test_evaluate(client, scene):
    item = {
        "id": "ring",
        "image_png_b64": b64(encode_png(scene.rgb)),
        "depth_png_b64": b64(encode_depth_png(scene.depth)),
        "annotation": scene.annotation.to_dict(),
    }
    r = client.post("/v1/evaluate", json={"items": [item, dict(item, id="ring2")]})
    assert r.status_code == 200, r.text
    rep = r.json()["report"]
    assert [row["image"] for row in rep["rows"]] == ["ring", "ring2"]
    assert rep["aggregate"]["nrmse"]["n"] == 2


def test_evaluate_needs_items(client):
    assert client.post("/v1/evaluate", json={"items": []}).status_code == 422


def test_server_defaults_apply(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("pipeline:\n  use_scp: false\n")
    monkeypatch.setenv("ORACLE_GRASP_CONFIG", str(cfg))
    client = TestClient(create_app())
    r = client.post("/v1/predict", json={"image_png_b64": b64(encode_png(blank_image(50, 50)))})
    assert r.status_code == 200
    assert r.json()["result"]["config_digest"] == PipelineConfig(use_scp=False).digest()
