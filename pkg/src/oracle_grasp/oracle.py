"""Prompts, response parsing and the interchangeable oracle backends.

Every backend answers an :class:`OracleRequest` with raw response text.
The ``query_*`` functions wrap a backend: they build the prompt, encode the
image, dispatch, append one transcript entry and parse the answer.
"""

from __future__ import annotations

import base64
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import httpx
import numpy as np

from .geometry import Point
from .io import encode_png, image_digest
from .tiling import FrameTransform, GridSpec
from .transcript import OracleTranscript, TranscriptEntry

SCP_PROMPT = (
    "Please provide a short, concise description of the principal object present in "
    "the image, focusing on the parts of the object that could be used for grasping. "
    "If the object has a clear handle or grip, mention that; if not, describe a "
    "cylindrical or otherwise ergonomically graspable section of the object. Avoid "
    "extraneous details unrelated to how one might physically grasp the object. Keep "
    "your answer to one sentence."
)

_GRP_HEAD = (
    "analyze the provided image and determine the optimal grid cell, from (0,0) to "
    "({columns}, {last_row}), that corresponds to the best grasping area for the object. "
    "Focus exclusively on the object (ignore all background and surrounding elements)."
)

_GRP_BODY = (
    "CONSIDER THE FOLLOWING:\n"
    "1. Prioritize areas that resemble handles or have handle-like features.\n"
    "2. If no handle is present, select the most stable area.\n"
    "3. Avoid areas that could interfere with the object's functionality.\n"
    "IMPORTANT:\n"
    "1. Your response MUST follow exactly the format below.\n"
    "2. DO NOT include any additional text, markdown formatting, or commentary.\n"
    "OUTPUT FORMAT:\n"
    "GRID_CELL: <cell_number>"
)

_EXPLANATION_LINE = "EXPLANATION: <brief explanation of your choice>"

ENDPOINT_ENV = "ORACLE_GRASP_ENDPOINT"
API_KEY_ENV = "ORACLE_GRASP_API_KEY"
MODEL_ENV = "ORACLE_GRASP_MODEL"


class OracleError(RuntimeError):
    pass


class ParseError(OracleError):
    """Response text carried no usable grid cell. Retryable."""


class CellRangeError(ParseError):
    pass


class TransportError(OracleError):
    pass


class EmptyContextError(OracleError):
    pass


class TranscriptExhausted(OracleError):
    pass


class TranscriptDivergence(OracleError):
    pass


@dataclass(frozen=True)
class SceneContext:
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise EmptyContextError("empty context")


@dataclass(frozen=True)
class GraspRegionChoice:
    cell_index: int
    explanation: str = ""


def build_scp() -> str:
    return SCP_PROMPT


def build_grp(context: SceneContext | None, grid: GridSpec, include_explanation: bool = True) -> str:
    """Grasp-region prompt for ``grid``.

    ``context=None`` drops the leading context clause entirely (the no-SCP
    ablation).
    """
    head = _GRP_HEAD.format(columns=grid.columns, last_row=grid.rows - 1)
    if context is None:
        first = head[0].upper() + head[1:]
    else:
        first = f"Based on the following image context: {context.text.strip()}, {head}"
    text = f"{first}\n{_GRP_BODY}"
    if include_explanation:
        text += "\n" + _EXPLANATION_LINE
    return text


def format_grp_response(choice: GraspRegionChoice) -> str:
    text = f"GRID_CELL: {choice.cell_index}"
    if choice.explanation:
        text += f"\nEXPLANATION: {choice.explanation}"
    return text


_FENCE = re.compile(r"^\s*```[\w-]*\s*$", re.MULTILINE)
_CELL = re.compile(
    r"GRID[_ ]CELL\s*[:=]?\s*(?:\(\s*(\d+)\s*,\s*(\d+)\s*\)|\[\s*(\d+)\s*,\s*(\d+)\s*\]|(\d+))",
    re.IGNORECASE,
)
_EXPL = re.compile(r"EXPLANATION\s*:\s*(.*)", re.IGNORECASE | re.DOTALL)
_CANONICAL = re.compile(r"\s*GRID_CELL: (\d+)(?:\nEXPLANATION: (.*))?", re.DOTALL)


def parse_grp_response(raw: str, grid: GridSpec) -> GraspRegionChoice:
    exact = _CANONICAL.fullmatch(raw)
    if exact is not None:
        # replies already in the requested format keep their explanation untouched
        index = int(exact.group(1))
        if not 0 <= index < grid.n_cells:
            raise CellRangeError(f"cell out of range: {index} for {grid.columns}x{grid.rows} grid")
        return GraspRegionChoice(index, (exact.group(2) or "").strip())
    text = _FENCE.sub("", raw).replace("**", "")
    m = _CELL.search(text)
    if m is None:
        raise ParseError(f"unparseable response: {raw[:200]!r}")
    if m.group(5) is not None:
        index = int(m.group(5))
    else:
        col = int(m.group(1) or m.group(3))
        row = int(m.group(2) or m.group(4))
        if col >= grid.columns or row >= grid.rows:
            raise CellRangeError(f"cell out of range: ({col},{row}) for {grid.columns}x{grid.rows} grid")
        index = row * grid.columns + col
    if not 0 <= index < grid.n_cells:
        raise CellRangeError(f"cell out of range: {index} for {grid.columns}x{grid.rows} grid")
    e = _EXPL.search(text, m.end())
    explanation = e.group(1).strip() if e else ""
    return GraspRegionChoice(index, explanation)


# ---------------------------------------------------------------------------
# backends


@dataclass(frozen=True)
class OracleRequest:
    kind: str  # "SCP" or "GRP"
    prompt: str
    image_png: bytes
    grid: GridSpec | None = None
    frame: FrameTransform = field(default_factory=FrameTransform.identity)


class Oracle:
    """Base class. Subclasses implement :meth:`respond`."""

    name = "oracle"

    def respond(self, request: OracleRequest) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ScriptedOracle(Oracle):
    """Deterministic test double.

    ``mode="target"`` picks the cell containing the next target point (targets
    are cycled per grasp-region query), optionally jittered uniformly within
    ``noise_radius`` pixels. ``mode="random"`` picks a uniformly random cell.
    Targets are given in root-image coordinates and mapped through the
    request's frame transform.
    """

    name = "scripted"

    def __init__(
        self,
        targets: Sequence[Point] = (),
        context_text: str = "an object with a graspable body",
        noise_radius: float = 0.0,
        mode: str = "target",
        seed: int = 0,
    ) -> None:
        if mode not in ("target", "random"):
            raise ValueError(f"unknown scripted mode {mode!r}")
        if mode == "target" and not targets:
            raise ValueError("target mode needs at least one target point")
        self.targets = list(targets)
        self.context_text = context_text
        self.noise_radius = float(noise_radius)
        self.mode = mode
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._grp_count = 0
        self._lock = threading.Lock()

    def respond(self, request: OracleRequest) -> str:
        if request.kind == "SCP":
            return self.context_text
        grid = request.grid
        with self._lock:
            k = self._grp_count
            self._grp_count += 1
            if self.mode == "random":
                cell = int(self._rng.integers(grid.n_cells))
                return format_grp_response(GraspRegionChoice(cell, "scripted random cell"))
            t = self.targets[k % len(self.targets)]
            if self.noise_radius > 0:
                r = self.noise_radius * math.sqrt(self._rng.random())
                phi = 2 * math.pi * self._rng.random()
                t = Point(t.x + r * math.cos(phi), t.y + r * math.sin(phi))
        cell = grid.cell_of_point(request.frame.forward(t))
        return format_grp_response(GraspRegionChoice(cell, "scripted target"))


class ReplayOracle(Oracle):
    """Answers from a recorded transcript, strictly in order."""

    name = "replay"

    def __init__(self, transcript: OracleTranscript | Sequence[TranscriptEntry], check_prompts: bool = True) -> None:
        entries = transcript.entries if isinstance(transcript, OracleTranscript) else transcript
        self.entries = list(entries)
        self.check_prompts = check_prompts
        self._cursor = 0
        self._lock = threading.Lock()

    def respond(self, request: OracleRequest) -> str:
        with self._lock:
            if self._cursor >= len(self.entries):
                raise TranscriptExhausted("transcript exhausted")
            entry = self.entries[self._cursor]
            self._cursor += 1
        if entry.kind != request.kind:
            raise TranscriptDivergence(
                f"transcript divergence at entry {entry.index}: recorded {entry.kind}, requested {request.kind}"
            )
        if self.check_prompts and entry.prompt != request.prompt:
            raise TranscriptDivergence(f"transcript divergence at entry {entry.index}: prompt differs")
        if entry.error is not None:
            raise TransportError(entry.error)
        return entry.response

    @property
    def remaining(self) -> int:
        return len(self.entries) - self._cursor


class HttpOracle(Oracle):
    """Client for an OpenAI-style multimodal chat-completions endpoint."""

    name = "http"

    def __init__(
        self,
        endpoint: str,
        model: str = "llama-3.2-11b-vision",
        api_key: str | None = None,
        temperature: float = 0.6,
        timeout: float = 60.0,
        max_tokens: int | None = 256,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout)

    @classmethod
    def from_env(cls, **kwargs) -> HttpOracle:
        endpoint = kwargs.pop("endpoint", None) or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise OracleError("endpoint not configured")
        kwargs.setdefault("api_key", os.environ.get(API_KEY_ENV))
        if os.environ.get(MODEL_ENV) and "model" not in kwargs:
            kwargs["model"] = os.environ[MODEL_ENV]
        return cls(endpoint, **kwargs)

    def payload(self, request: OracleRequest) -> dict:
        data_url = "data:image/png;base64," + base64.b64encode(request.image_png).decode("ascii")
        body = {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
            "temperature": self.temperature,
        }
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body

    def respond(self, request: OracleRequest) -> str:
        try:
            resp = self._client.post(self.endpoint, json=self.payload(request))
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.endpoint}: {exc}") from exc
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"unparseable response: malformed completion body ({exc!r})") from exc
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str):
            raise ParseError("unparseable response: message content is not text")
        return content

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# queries


def _dispatch(oracle: Oracle, request: OracleRequest, transcript: OracleTranscript) -> tuple[str, TranscriptEntry]:
    digest = image_digest(request.image_png)
    transcript.add_image(digest, request.image_png)
    grid = None
    if request.grid is not None:
        grid = {"columns": request.grid.columns, "rows": request.grid.rows,
                "image_width": request.grid.image_width, "image_height": request.grid.image_height}
    stamp = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        raw = oracle.respond(request)
    except OracleError as exc:
        transcript.append(kind=request.kind, prompt=request.prompt, response="", image_digest=digest,
                          grid=grid, error=str(exc),
                          latency_ms=(time.perf_counter() - t0) * 1e3, timestamp=stamp)
        raise
    entry = transcript.append(kind=request.kind, prompt=request.prompt, response=raw, image_digest=digest,
                              grid=grid, latency_ms=(time.perf_counter() - t0) * 1e3, timestamp=stamp)
    return raw, entry


def query_scene_context(
    oracle: Oracle, image: np.ndarray, transcript: OracleTranscript
) -> tuple[SceneContext, TranscriptEntry]:
    if image.size == 0:
        raise OracleError("empty image")
    request = OracleRequest("SCP", build_scp(), encode_png(image))
    raw, entry = _dispatch(oracle, request, transcript)
    return SceneContext(raw.strip()), entry


def query_grasp_region(
    oracle: Oracle,
    overlaid: np.ndarray,
    grid: GridSpec,
    context: SceneContext | None,
    include_explanation: bool,
    transcript: OracleTranscript,
    frame: FrameTransform | None = None,
) -> tuple[GraspRegionChoice, TranscriptEntry]:
    h, w = overlaid.shape[:2]
    if (w, h) != (grid.image_width, grid.image_height):
        raise OracleError(f"grid {grid.image_width}x{grid.image_height} does not match image {w}x{h}")
    request = OracleRequest(
        "GRP",
        build_grp(context, grid, include_explanation),
        encode_png(overlaid),
        grid,
        frame or FrameTransform.identity(),
    )
    raw, entry = _dispatch(oracle, request, transcript)
    return parse_grp_response(raw, grid), entry
