"""Director protocol: prompt decomposition and step-by-step trajectory queries.

A :class:`Director` turns typed queries into :class:`DirectorRequest` objects,
hands them to a transport (deterministic fixture mock, live HTTP endpoint, or
an audit-log replay), records every raw response in an append-only audit log,
and parses the fenced payload block into domain types. Answers that fail to
parse are re-asked up to ``max_retries`` times; coordinates are never invented.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field
import hashlib
import json
import logging
import os
from pathlib import Path
import re
import time

import numpy as np

from .core import BBox2D
from .errors import (
    ConfigError, DirectorMalformed, DirectorProtocolError, DirectorUnreachable,
    TrajectoryDegenerate,
)

log = logging.getLogger(__name__)

TASKS = ("decompose", "scale", "endpoints", "path", "score")
DEFAULT_PATH_POINTS = 8
DEFAULT_RETRIES = 2

URL_ENV = "C3V_DIRECTOR_URL"
KEY_ENV = "C3V_DIRECTOR_KEY"

# Editable query templates. Fields: {prompt}, {object}, {motion}.
DEFAULT_TEMPLATES = {
    "decompose": (
        "Split the following video description into separate prompts: one for the "
        "background scene, one for every object that appears, and one motion "
        "description per object.\n"
        "Description: {prompt}\n"
        "Reply with a ```json block: {{\"scene\": str, \"objects\": "
        "[{{\"id\": str, \"object\": str, \"motion\": str}}]}}."
    ),
    "scale": (
        "The image shows the scene. If {object} were standing in it, how large would "
        "its bounding box be in pixels? Reply with a ```json block {{\"H\": int, \"W\": int}}."
    ),
    "start": (
        "{object} is about to start {motion}. Using its bounding box size from the "
        "context, give the pixel of the box's lower-left corner where it starts. "
        "Reply with a ```json block {{\"start\": [x, y]}}."
    ),
    "end": (
        "{object} finishes {motion}. Using its bounding box size from the context, "
        "give the pixel of the box's lower-left corner where it ends. "
        "Reply with a ```json block {{\"end\": [x, y]}}."
    ),
    "path": (
        "{object} moves from the start to the end pixel given in the context while "
        "{motion}. List the requested number of lower-left box corners along a "
        "plausible path, first at the start and last at the end. "
        "Reply with a ```json block {{\"points\": [[x, y], ...]}}."
    ),
}

STATIC_MOTIONS = ("standing still", "still", "static", "idle", "none", "")


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.strip().encode("utf-8")).hexdigest()[:16]


def is_static_motion(motion: str) -> bool:
    return motion.strip().lower() in STATIC_MOTIONS


# ----------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class PromptDecomposition:
    scene_prompt: str
    object_prompts: tuple
    motion_prompts: tuple
    object_ids: tuple

    def __post_init__(self):
        if not self.scene_prompt.strip():
            raise DirectorMalformed("decomposition has an empty scene prompt")
        if not (len(self.object_prompts) == len(self.motion_prompts) == len(self.object_ids)):
            raise DirectorMalformed("object and motion prompt lists differ in length")

    def assignments(self):
        """(kind, identifier, prompt) triples used to route concepts to asset sources."""
        out = [("scene", "scene", self.scene_prompt)]
        for oid, obj, mot in zip(self.object_ids, self.object_prompts, self.motion_prompts):
            out.append(("object", oid, obj))
            out.append(("motion", oid, mot))
        return out


@dataclass(frozen=True)
class ScaleEstimate:
    bbox: BBox2D
    flags: tuple = ()


@dataclass(frozen=True)
class EndpointEstimate:
    start_px: tuple
    end_px: tuple
    flags: tuple = ()


@dataclass(frozen=True)
class PathEstimate:
    points: tuple
    flags: tuple = ()

    @property
    def N(self) -> int:
        return len(self.points)


@dataclass
class DirectorRequest:
    task: str
    prompt: str
    image_png: bytes | None = None
    context: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def key(self) -> str:
        return f"{self.task}:{prompt_hash(self.prompt)}"

    def image_sha(self) -> str | None:
        return hashlib.sha256(self.image_png).hexdigest()[:16] if self.image_png else None

    def wire(self) -> dict:
        return {
            "task": self.task,
            "prompt": self.prompt,
            "image": base64.b64encode(self.image_png).decode("ascii") if self.image_png else None,
            "context": self.context,
            "params": self.params,
        }


@dataclass
class DirectorResponse:
    task: str
    payload: object
    raw: str
    audit_ref: str | None = None


# ----------------------------------------------------------------------------
# payload parsing

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.DOTALL)


def extract_block(raw: str) -> str:
    """Content of the first fenced block; text around it is ignored."""
    m = _FENCE.search(raw)
    if not m:
        raise DirectorMalformed("response has no fenced payload block")
    return m.group(1).strip()


def parse_block(raw: str):
    """JSON payload, or a ``key:value,key:value`` line as a dict of strings."""
    block = extract_block(raw)
    try:
        return json.loads(block)
    except json.JSONDecodeError:
        pass
    pairs = [p for p in re.split(r"[,;\n]", block) if p.strip()]
    out = {}
    for p in pairs:
        if ":" not in p:
            raise DirectorMalformed(f"cannot parse payload {block!r}")
        k, v = p.split(":", 1)
        out[k.strip()] = v.strip()
    return out


def _number(v, what) -> float:
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise DirectorMalformed(f"{what} is not numeric: {v!r}") from None
    if not np.isfinite(x):
        raise DirectorMalformed(f"{what} is not finite")
    return x


def _point(v, what):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise DirectorMalformed(f"{what} must be an [x, y] pair, got {v!r}")
    return (_number(v[0], what), _number(v[1], what))


def _get(d, *names):
    if not isinstance(d, dict):
        raise DirectorMalformed("payload must be an object")
    for n in names:
        if n in d:
            return d[n]
    raise DirectorMalformed(f"payload lacks field {names[0]!r}")


def clamp_point(p, width: int, height: int):
    """Clamp to the pixel-center rectangle; returns (point, was_clamped)."""
    x = min(max(p[0], 0.0), float(width - 1))
    y = min(max(p[1], 0.0), float(height - 1))
    return (x, y), (x, y) != tuple(p)


def parse_decomposition(payload) -> PromptDecomposition:
    scene = _get(payload, "scene", "scene_prompt")
    objs = _get(payload, "objects")
    if not isinstance(scene, str) or not isinstance(objs, list):
        raise DirectorMalformed("decomposition payload has wrong types")
    ids, names, motions = [], [], []
    for i, o in enumerate(objs):
        if not isinstance(o, dict):
            raise DirectorMalformed("object entries must be objects")
        ids.append(str(o.get("id", f"obj{i}")))
        names.append(str(_get(o, "object", "prompt")))
        motions.append(str(o.get("motion", "")))
    return PromptDecomposition(scene, tuple(names), tuple(motions), tuple(ids))


def parse_scale(payload, width: int, height: int) -> ScaleEstimate:
    h = _number(_get(payload, "H", "height", "h"), "H")
    w = _number(_get(payload, "W", "width", "w"), "W")
    if h <= 0 or w <= 0:
        raise DirectorMalformed(f"bounding box must be positive, got H={h} W={w}")
    flags = []
    if h > height:
        flags.append(f"scale.H clamped {h:g}->{height}")
        h = float(height)
    if w > width:
        flags.append(f"scale.W clamped {w:g}->{width}")
        w = float(width)
    return ScaleEstimate(BBox2D(h, w), tuple(flags))


def parse_points(payload, n_expected: int | None):
    pts = _get(payload, "points", "path")
    if not isinstance(pts, list):
        raise DirectorMalformed("points must be a list")
    pts = [_point(p, f"points[{i}]") for i, p in enumerate(pts)]
    if n_expected is not None and len(pts) != n_expected:
        raise DirectorMalformed(f"expected {n_expected} path points, got {len(pts)}")
    return pts


def validate_trajectory(path: PathEstimate, bounds, S: ScaleEstimate | BBox2D | None = None,
                        endpoints: EndpointEstimate | None = None) -> PathEstimate:
    """Clamp, de-duplicate and anchor a director path.

    ``bounds`` is ``(width, height)``. With ``endpoints`` given, the start (end)
    point is prepended (appended) when the first (last) path point is farther
    than ``2 * max(H_2D, W_2D)`` pixels from it.
    """
    width, height = bounds
    flags = list(path.flags)
    pts = []
    for i, p in enumerate(path.points):
        if not all(np.isfinite(p)):
            raise DirectorMalformed(f"path point {i} is not finite")
        q, clamped = clamp_point(p, width, height)
        if clamped:
            flags.append(f"path[{i}] clamped ({p[0]:g},{p[1]:g})->({q[0]:g},{q[1]:g})")
        pts.append(q)
    deduped = []
    for i, q in enumerate(pts):
        if deduped and q == deduped[-1]:
            flags.append(f"path[{i}] duplicate removed")
            continue
        deduped.append(q)
    if endpoints is not None and deduped:
        bbox = S.bbox if isinstance(S, ScaleEstimate) else S
        reach = 2.0 * max(bbox.height_px, bbox.width_px) if bbox is not None else 0.0
        start, _ = clamp_point(endpoints.start_px, width, height)
        end, _ = clamp_point(endpoints.end_px, width, height)
        if np.hypot(*np.subtract(deduped[0], start)) > reach:
            flags.append("start prepended")
            deduped.insert(0, start)
        if np.hypot(*np.subtract(deduped[-1], end)) > reach:
            flags.append("end appended")
            deduped.append(end)
    if len(deduped) < 2:
        raise TrajectoryDegenerate(f"trajectory has {len(deduped)} distinct point(s)")
    return PathEstimate(tuple(deduped), tuple(flags))


def resample_polyline(points, n: int):
    """``n`` points evenly spaced by arc length along a 2D polyline."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0:
        return [tuple(pts[0])] * n
    targets = np.linspace(0.0, cum[-1], n)
    xs = np.interp(targets, cum, pts[:, 0])
    ys = np.interp(targets, cum, pts[:, 1])
    out = [(float(x), float(y)) for x, y in zip(xs, ys)]
    out[0] = tuple(map(float, pts[0]))
    out[-1] = tuple(map(float, pts[-1]))
    return out


# ----------------------------------------------------------------------------
# transports


class MockTransport:
    """Answers from a fixture table keyed by (task, prompt hash).

    A pure function of (table, request). Path entries are resampled to the
    requested point count; a two-point request returns the endpoints from the
    request context.
    """

    def __init__(self, table: dict):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "MockTransport":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"director fixture file not found: {path}")
        data = json.loads(path.read_text())
        return cls({k: v["payload"] for k, v in data.get("entries", {}).items()})

    @staticmethod
    def entry(task: str, prompt: str, payload) -> tuple:
        return f"{task}:{prompt_hash(prompt)}", {"prompt": prompt, "payload": payload}

    def send(self, request: DirectorRequest) -> str:
        key = request.key()
        if key not in self.table:
            raise DirectorMalformed(f"mock director has no fixture for {request.task!r} "
                                    f"prompt {request.prompt[:60]!r}")
        payload = self.table[key]
        if request.task == "path":
            n = int(request.context.get("n_points", DEFAULT_PATH_POINTS))
            if n == 2 and "start" in request.context:
                pts = [list(request.context["start"]), list(request.context["end"])]
            else:
                pts = payload["points"]
                if len(pts) != n:
                    pts = [list(p) for p in resample_polyline(pts, n)]
            payload = {"points": pts}
        return "```json\n" + json.dumps(payload, sort_keys=True) + "\n```"


class HttpTransport:
    """POST ``{url}/director`` with the JSON request; the reply body is JSON with a
    ``content`` string (or plain text) containing the fenced payload."""

    def __init__(self, url: str, key: str | None = None, timeout: float = 60.0,
                 client=None, max_retries: int = DEFAULT_RETRIES):
        import httpx

        self.url = url.rstrip("/")
        self.key = key
        self.timeout = timeout
        self.max_retries = max_retries
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, **kw) -> "HttpTransport":
        url = os.environ.get(URL_ENV)
        if not url:
            raise ConfigError(f"live director mode requires the {URL_ENV} environment variable")
        return cls(url, os.environ.get(KEY_ENV), **kw)

    def send(self, request: DirectorRequest) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.key}"} if self.key else {}
        last = None
        for _ in range(self.max_retries + 1):
            try:
                r = self._client.post(f"{self.url}/director", json=request.wire(), headers=headers,
                                      timeout=self.timeout)
            except httpx.HTTPError as e:
                last = e
                continue
            if r.status_code >= 500:
                last = f"HTTP {r.status_code}"
                continue
            if r.status_code >= 400:
                raise DirectorUnreachable(f"director rejected request: HTTP {r.status_code}")
            try:
                body = r.json()
            except ValueError:
                return r.text
            if isinstance(body, dict) and isinstance(body.get("content"), str):
                return body["content"]
            return r.text
        raise DirectorUnreachable(f"director at {self.url} unreachable: {last}")


class ReplayTransport:
    """Replays raw responses from an audit log, matching records in order by
    (task, prompt hash)."""

    def __init__(self, audit_path):
        self.records = [json.loads(line) for line in Path(audit_path).read_text().splitlines()
                        if line.strip()]
        self._used = set()

    def send(self, request: DirectorRequest) -> str:
        key = request.key()
        for i, rec in enumerate(self.records):
            if i not in self._used and rec.get("key") == key:
                self._used.add(i)
                return rec["response"]
        raise DirectorUnreachable(f"no recorded response for {key}")


class AuditLog:
    """Append-only NDJSON of request/response pairs."""

    def __init__(self, path=None, clock=time.time):
        self.path = Path(path) if path else None
        self.records = []
        self.clock = clock
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, request: DirectorRequest, raw: str, attempt: int) -> str:
        rec = {
            "seq": len(self.records),
            "time": self.clock(),
            "key": request.key(),
            "task": request.task,
            "prompt": request.prompt,
            "image_sha": request.image_sha(),
            "context": request.context,
            "attempt": attempt,
            "response": raw,
        }
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return f"{request.key()}#{attempt}"

    def flag(self, ref: str, flags):
        if flags:
            log.warning("director output adjusted (%s): %s", ref, "; ".join(flags))


# ----------------------------------------------------------------------------


class Director:
    def __init__(self, transport, audit: AuditLog | None = None, templates: dict | None = None,
                 max_retries: int = DEFAULT_RETRIES):
        self.transport = transport
        self.audit = audit or AuditLog()
        self.templates = {**DEFAULT_TEMPLATES, **(templates or {})}
        self.max_retries = max_retries

    def _ask(self, request: DirectorRequest, parse):
        err = None
        for attempt in range(self.max_retries + 1):
            raw = self.transport.send(request)
            ref = self.audit.append(request, raw, attempt)
            try:
                return parse(parse_block(raw)), ref
            except DirectorMalformed as e:
                err = e
                log.info("director answer rejected (%s): %s", ref, e)
        raise DirectorMalformed(f"{request.task}: {err} (after {self.max_retries} retries)")

    def query_text(self, name: str, **fields) -> str:
        return self.templates[name].format(**fields)

    def decompose(self, prompt: str) -> PromptDecomposition:
        if not prompt or not prompt.strip():
            raise ConfigError("decompose requires a non-empty prompt")
        req = DirectorRequest("decompose", self.query_text("decompose", prompt=prompt.strip()),
                              context={"prompt": prompt.strip()})
        return self._ask(req, parse_decomposition)[0]

    def session(self, object_prompt: str, motion_prompt: str, image_png: bytes | None,
                width: int, height: int) -> "DirectorSession":
        return DirectorSession(self, object_prompt, motion_prompt, image_png, width, height)


class DirectorSession:
    """One object's scale -> endpoints -> path exchange; the order is enforced."""

    def __init__(self, director: Director, object_prompt: str, motion_prompt: str,
                 image_png, width: int, height: int):
        self.d = director
        self.object_prompt = object_prompt
        self.motion_prompt = motion_prompt
        self.image = image_png
        self.width, self.height = int(width), int(height)
        self.scale: ScaleEstimate | None = None
        self.endpoints: EndpointEstimate | None = None
        self.refs: list = []

    def _fields(self):
        return {"object": self.object_prompt, "motion": self.motion_prompt}

    def estimate_scale(self) -> ScaleEstimate:
        req = DirectorRequest("scale", self.d.query_text("scale", **self._fields()), self.image,
                              {"image_size": [self.width, self.height]})
        self.scale, ref = self.d._ask(req, lambda p: parse_scale(p, self.width, self.height))
        self.refs.append(ref)
        self.d.audit.flag(ref, self.scale.flags)
        return self.scale

    def _bbox_context(self):
        b = self.scale.bbox
        return {"image_size": [self.width, self.height], "bbox": {"H": b.height_px, "W": b.width_px}}

    def _ask_point(self, name, field_name):
        req = DirectorRequest("endpoints", self.d.query_text(name, **self._fields()), self.image,
                              {**self._bbox_context(), "which": field_name})
        p, ref = self.d._ask(req, lambda pl: _point(_get(pl, field_name), field_name))
        self.refs.append(ref)
        return p

    def estimate_endpoints(self, moving: bool = True) -> EndpointEstimate:
        if self.scale is None:
            raise DirectorProtocolError("estimate_endpoints called before estimate_scale")
        for attempt in range(2):
            start = self._ask_point("start", "start")
            end = self._ask_point("end", "end")
            flags = []
            s, cs = clamp_point(start, self.width, self.height)
            e, ce = clamp_point(end, self.width, self.height)
            if cs:
                flags.append(f"start clamped {start}->{s}")
            if ce:
                flags.append(f"end clamped {end}->{e}")
            if not moving or s != e:
                self.endpoints = EndpointEstimate(s, e, tuple(flags))
                self.d.audit.flag(self.refs[-1], flags)
                return self.endpoints
            log.info("director returned identical endpoints for a moving object; re-querying")
        raise TrajectoryDegenerate("director returned identical start and end points twice")

    def estimate_path(self, n_points: int = DEFAULT_PATH_POINTS) -> PathEstimate:
        if self.endpoints is None:
            raise DirectorProtocolError("estimate_path called before estimate_endpoints")
        if n_points < 2:
            raise ConfigError("path point count must be at least 2")
        req = DirectorRequest("path", self.d.query_text("path", **self._fields()), self.image,
                              {**self._bbox_context(), "start": list(self.endpoints.start_px),
                               "end": list(self.endpoints.end_px), "n_points": n_points})
        pts, ref = self.d._ask(req, lambda p: parse_points(p, n_points))
        self.refs.append(ref)
        return PathEstimate(tuple(pts))


def build_director(mode: str, fixtures=None, audit_path=None, templates=None,
                   max_retries: int = DEFAULT_RETRIES, replay=None) -> Director:
    """Director for ``mode`` in {"mock", "live", "replay"}."""
    if mode == "mock":
        if fixtures is None:
            raise ConfigError("mock director needs a fixture file")
        transport = MockTransport.from_file(fixtures)
    elif mode == "live":
        transport = HttpTransport.from_env(max_retries=max_retries)
    elif mode == "replay":
        transport = ReplayTransport(replay)
    else:
        raise ConfigError(f"unknown director mode {mode!r}")
    return Director(transport, AuditLog(audit_path), templates, max_retries)


def write_fixture_file(path, entries) -> None:
    """``entries``: iterable of (task, prompt, payload)."""
    table = {}
    for task, prompt, payload in entries:
        k, v = MockTransport.entry(task, prompt, payload)
        table[k] = v
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"version": 1, "entries": table}, indent=2, sort_keys=True) + "\n")

