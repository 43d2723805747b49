import base64
import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracle_grasp.geometry import Point
from oracle_grasp.io import decode_png_rgb, image_digest
from oracle_grasp.oracle import (
    SCP_PROMPT,
    CellRangeError,
    EmptyContextError,
    GraspRegionChoice,
    HttpOracle,
    OracleError,
    OracleRequest,
    ParseError,
    ReplayOracle,
    SceneContext,
    ScriptedOracle,
    TranscriptDivergence,
    TranscriptExhausted,
    TransportError,
    build_grp,
    build_scp,
    format_grp_response,
    parse_grp_response,
    query_grasp_region,
    query_scene_context,
)
from oracle_grasp.tiling import CropStep, FrameTransform, GridSpec, cell_mask
from oracle_grasp.transcript import OracleTranscript, read_transcript, write_transcript

from conftest import blank_image

G3 = GridSpec(3, 3, 90, 90)

EXPECTED_GRP_MUG_3X3 = (
    "Based on the following image context: a mug with a handle, analyze the provided image and "
    "determine the optimal grid cell, from (0,0) to (3, 2), that corresponds to the best grasping "
    "area for the object. Focus exclusively on the object (ignore all background and surrounding "
    "elements).\n"
    "CONSIDER THE FOLLOWING:\n"
    "1. Prioritize areas that resemble handles or have handle-like features.\n"
    "2. If no handle is present, select the most stable area.\n"
    "3. Avoid areas that could interfere with the object's functionality.\n"
    "IMPORTANT:\n"
    "1. Your response MUST follow exactly the format below.\n"
    "2. DO NOT include any additional text, markdown formatting, or commentary.\n"
    "OUTPUT FORMAT:\n"
    "GRID_CELL: <cell_number>\n"
    "EXPLANATION: <brief explanation of your choice>"
)


# prompts

def test_scene_prompt_text():
    assert build_scp() == SCP_PROMPT
    assert build_scp().startswith(
        "Please provide a short, concise description of the principal object present in the image"
    )
    assert build_scp().endswith("Keep your answer to one sentence.")


def test_grasp_prompt_frozen_text():
    assert build_grp(SceneContext("a mug with a handle"), G3) == EXPECTED_GRP_MUG_3X3


def test_grasp_prompt_without_explanation():
    text = build_grp(SceneContext("a mug"), G3, include_explanation=False)
    assert "EXPLANATION" not in text
    assert text.endswith("GRID_CELL: <cell_number>")


def test_grasp_prompt_without_context_starts_capitalized():
    text = build_grp(None, GridSpec(4, 5, 100, 100))
    assert text.startswith("Analyze the provided image")
    assert "from (0,0) to (4, 4)" in text
    assert "image context" not in text


def test_prompts_are_deterministic():
    ctx = SceneContext("x")
    assert build_grp(ctx, G3) == build_grp(ctx, G3)


def test_empty_context_rejected():
    with pytest.raises(EmptyContextError, match="empty context"):
        SceneContext("   ")


# parsing

@pytest.mark.parametrize(
    "raw,grid,expected",
    [
        ("GRID_CELL: 7\nEXPLANATION: near the handle", G3, (7, "near the handle")),
        ("GRID_CELL: (2,1)", GridSpec(4, 3, 100, 100), (6, "")),
        ("```\nGRID_CELL: 3\n```", G3, (3, "")),
        ("Sure! **GRID_CELL:** 5\n**EXPLANATION:** the grip", G3, (5, "the grip")),
        ("grid cell = 2", G3, (2, "")),
        ("GRID_CELL: [1, 2]", G3, (7, "")),
    ],
)
def test_parse_accepts_variants(raw, grid, expected):
    c = parse_grp_response(raw, grid)
    assert (c.cell_index, c.explanation) == expected


def test_parse_unparseable():
    with pytest.raises(ParseError, match="unparseable response"):
        parse_grp_response("I think the best area is the top.", G3)


@pytest.mark.parametrize("raw", ["GRID_CELL: 9", "GRID_CELL: (3,0)", "GRID_CELL: (0,3)"])
def test_parse_out_of_range(raw):
    with pytest.raises(CellRangeError, match="cell out of range"):
        parse_grp_response(raw, G3)


@given(st.integers(1, 9), st.integers(1, 9), st.data())
def test_parse_format_round_trip(u, v, data):
    grid = GridSpec(u, v, 200, 200)
    idx = data.draw(st.integers(0, grid.n_cells - 1))
    expl = data.draw(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=40).map(str.strip))
    c = GraspRegionChoice(idx, expl)
    assert parse_grp_response(format_grp_response(c), grid) == c


# scripted

def _grp(grid, frame=None):
    return OracleRequest("GRP", "p", b"", grid, frame or FrameTransform.identity())


def test_scripted_center_and_corner():
    o = ScriptedOracle([Point(45, 45)])
    assert parse_grp_response(o.respond(_grp(G3)), G3).cell_index == 4
    o = ScriptedOracle([Point(0, 0)])
    for u in range(1, 10):
        g = GridSpec(u, u, 90, 90)
        assert parse_grp_response(o.respond(_grp(g)), g).cell_index == 0


@given(st.integers(1, 9), st.integers(1, 9), st.floats(0, 199.99), st.floats(0, 149.99))
def test_scripted_cell_contains_target(u, v, x, y):
    grid = GridSpec(u, v, 200, 150)
    o = ScriptedOracle([Point(x, y)])
    idx = parse_grp_response(o.respond(_grp(grid)), grid).cell_index
    assert cell_mask(grid, idx).contains_point(Point(x, y))


def test_scripted_maps_target_through_frame():
    frame = FrameTransform.identity().then(CropStep(30, 30))
    o = ScriptedOracle([Point(40, 40)])
    # (40,40) in the root frame is (10,10) in the crop: top-left cell of a 3x3 on 60x60
    g = GridSpec(3, 3, 60, 60)
    assert parse_grp_response(o.respond(_grp(g, frame)), g).cell_index == 0


def test_scripted_random_is_seeded():
    a = [ScriptedOracle(mode="random", seed=5).respond(_grp(G3)) for _ in range(3)]
    b = [ScriptedOracle(mode="random", seed=5).respond(_grp(G3)) for _ in range(3)]
    assert a == b


def test_scripted_context_text():
    t = OracleTranscript()
    ctx, entry = query_scene_context(ScriptedOracle([Point(0, 0)], context_text="a red mug"), blank_image(), t)
    assert ctx.text == "a red mug" and entry.kind == "SCP" and len(t) == 1


def test_scene_query_empty_reply():
    class Silent(ScriptedOracle):
        def respond(self, request):
            return "  "

    t = OracleTranscript()
    with pytest.raises(EmptyContextError):
        query_scene_context(Silent([Point(0, 0)]), blank_image(), t)
    assert len(t) == 1


# transcript + replay

def _record(n=3):
    t = OracleTranscript()
    o = ScriptedOracle([Point(10, 80)], context_text="a bar")
    img = blank_image(90, 90)
    ctx, _ = query_scene_context(o, img, t)
    for _ in range(n):
        query_grasp_region(o, img, G3, ctx, True, t)
    return t, ctx, img


def test_transcript_entries_are_ordered_and_digested():
    t, _, img = _record()
    assert t.kinds() == ["SCP", "GRP", "GRP", "GRP"]
    assert [e.index for e in t.entries] == [0, 1, 2, 3]
    assert all(e.image_digest in t.images for e in t.entries)
    assert image_digest(t.images[t.entries[0].image_digest]) == t.entries[0].image_digest
    assert t.entries[1].grid == {"columns": 3, "rows": 3, "image_width": 90, "image_height": 90}


def test_content_digest_ignores_timing():
    t1, _, _ = _record()
    t2, _, _ = _record()
    t2.entries[0] = dataclasses.replace(t2.entries[0], latency_ms=123.0, timestamp="then")
    assert t1.content_digest() == t2.content_digest()
    t2.entries[0] = dataclasses.replace(t2.entries[0], response="other")
    assert t1.content_digest() != t2.content_digest()


def test_replay_returns_recorded_responses(tmp_path):
    t, ctx, img = _record()
    path = tmp_path / "t.jsonl"
    write_transcript(path, t)
    loaded = read_transcript(path)
    assert [e.to_dict() for e in loaded.entries] == [e.to_dict() for e in t.entries]
    assert sorted(p.stem for p in (tmp_path / "t.jsonl.images").iterdir()) == sorted(t.images)

    replay = ReplayOracle(loaded)
    t2 = OracleTranscript()
    ctx2, _ = query_scene_context(replay, img, t2)
    assert ctx2 == ctx
    for e in t.entries[1:]:
        choice, _ = query_grasp_region(replay, img, G3, ctx2, True, t2)
        assert format_grp_response(choice) == e.response
    with pytest.raises(TranscriptExhausted, match="transcript exhausted"):
        query_grasp_region(replay, img, G3, ctx2, True, t2)
    assert len(t2) == len(t) + 1 and t2.entries[-1].error == "transcript exhausted"


def test_replay_detects_divergence():
    t, ctx, img = _record()
    replay = ReplayOracle(t)
    with pytest.raises(TranscriptDivergence):
        query_grasp_region(replay, img, G3, ctx, True, OracleTranscript())


def test_read_transcript_rejects_disordered(tmp_path):
    t, _, _ = _record(2)
    lines = [json.dumps(e.to_dict()) for e in t.entries]
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join([lines[1], lines[0]]))
    with pytest.raises(ValueError, match="strictly ordered"):
        read_transcript(p)
    p.write_text(json.dumps({"kind": "SCP"}))
    with pytest.raises(ValueError, match="prompt missing"):
        read_transcript(p)


# HTTP

def test_http_payload_shape(chat_stub):
    stub = chat_stub(["a mug", "GRID_CELL: 4\nEXPLANATION: middle"])
    o = HttpOracle(stub.url, model="test-model", api_key="secret")
    t = OracleTranscript()
    img = blank_image(90, 90)
    ctx, _ = query_scene_context(o, img, t)
    choice, _ = query_grasp_region(o, img, G3, ctx, True, t)
    o.close()
    assert ctx.text == "a mug" and choice == GraspRegionChoice(4, "middle")

    body = stub.requests[1]
    assert body["model"] == "test-model" and body["temperature"] == 0.6
    (msg,) = body["messages"]
    assert msg["role"] == "user"
    text, image = msg["content"]
    assert text == {"type": "text", "text": build_grp(ctx, G3)}
    url = image["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    png = base64.b64decode(url.split(",", 1)[1])
    assert image_digest(png) == t.entries[1].image_digest
    assert decode_png_rgb(png).shape == (90, 90, 3)
    assert stub.headers[0]["Authorization"] == "Bearer secret"


def test_http_errors(chat_stub):
    stub = chat_stub([500, b"not json", json.dumps({"choices": []}).encode()])
    o = HttpOracle(stub.url)
    req = OracleRequest("SCP", "p", b"")
    with pytest.raises(TransportError):
        o.respond(req)
    with pytest.raises(ParseError):
        o.respond(req)
    with pytest.raises(ParseError):
        o.respond(req)
    o.close()


def test_http_unreachable():
    o = HttpOracle("http://127.0.0.1:9/none", timeout=1)
    with pytest.raises(TransportError):
        o.respond(OracleRequest("SCP", "p", b""))


def test_http_from_env(monkeypatch):
    monkeypatch.delenv("ORACLE_GRASP_ENDPOINT", raising=False)
    with pytest.raises(OracleError, match="endpoint not configured"):
        HttpOracle.from_env()
    monkeypatch.setenv("ORACLE_GRASP_ENDPOINT", "http://example.invalid/v1")
    monkeypatch.setenv("ORACLE_GRASP_MODEL", "m1")
    o = HttpOracle.from_env()
    assert o.endpoint == "http://example.invalid/v1" and o.model == "m1"
    o.close()
