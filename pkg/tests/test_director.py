import json

import httpx
import pytest

from gscompose.core import BBox2D
from gscompose.director import (
    AuditLog, Director, EndpointEstimate, HttpTransport, MockTransport, PathEstimate,
    ReplayTransport, ScaleEstimate, build_director, parse_block, validate_trajectory,
    write_fixture_file,
)
from gscompose.errors import (
    ConfigError, DirectorMalformed, DirectorProtocolError, DirectorUnreachable, TrajectoryDegenerate,
)

ALIEN = "an alien walking in a forest cabin"


def fixture_director(tmp_path=None, extra=()):
    d = Director(MockTransport({}))
    entries = [
        ("decompose", d.query_text("decompose", prompt=ALIEN),
         {"scene": "magical cabin in a forest", "objects": [{"id": "alien", "object": "an alien", "motion": "walking"}]}),
        ("decompose", d.query_text("decompose", prompt="two robots dancing and a dog running in a park"),
         {"scene": "a park", "objects": [{"id": "r", "object": "two robots", "motion": "dancing"},
                                         {"id": "d", "object": "a dog", "motion": "running"}]}),
        ("scale", d.query_text("scale", object="an alien", motion="walking"), {"H": 128, "W": 64}),
        ("endpoints", d.query_text("start", object="an alien", motion="walking"), {"start": [100, 400]}),
        ("endpoints", d.query_text("end", object="an alien", motion="walking"), {"end": [420, 380]}),
        ("path", d.query_text("path", object="an alien", motion="walking"),
         {"points": [[100, 400], [210, 395], [320, 388], [420, 380]]}),
        *extra,
    ]
    table = dict(MockTransport.entry(*e) for e in entries)
    return Director(MockTransport({k: v["payload"] for k, v in table.items()}))


def alien_session(director):
    return director.session("an alien", "walking", b"\x89PNG fake", 512, 512)


def test_decompose_fixture():
    dec = fixture_director().decompose(ALIEN)
    assert dec.scene_prompt == "magical cabin in a forest"
    assert dec.object_prompts == ("an alien",)
    assert dec.motion_prompts == ("walking",)


def test_decompose_two_objects_aligned():
    dec = fixture_director().decompose("two robots dancing and a dog running in a park")
    assert len(dec.object_prompts) == len(dec.motion_prompts) == 2
    assert dec.object_prompts[1] == "a dog" and dec.motion_prompts[1] == "running"
    kinds = [k for k, _, _ in dec.assignments()]
    assert kinds == ["scene", "object", "motion", "object", "motion"]


def test_decompose_empty_prompt():
    with pytest.raises(ConfigError):
        fixture_director().decompose("   ")


def test_step_by_step_fixture():
    s = alien_session(fixture_director())
    scale = s.estimate_scale()
    assert (scale.bbox.height_px, scale.bbox.width_px) == (128, 64)
    ends = s.estimate_endpoints()
    assert ends.start_px == (100, 400) and ends.end_px == (420, 380)
    path = s.estimate_path(4)
    assert path.points == ((100, 400), (210, 395), (320, 388), (420, 380))
    assert s.estimate_path(2).points == ((100, 400), (420, 380))
    assert s.estimate_path(8).N == 8


def test_protocol_order_enforced():
    s = alien_session(fixture_director())
    with pytest.raises(DirectorProtocolError):
        s.estimate_endpoints()
    s.estimate_scale()
    with pytest.raises(DirectorProtocolError):
        s.estimate_path(4)


def test_mock_is_pure():
    a = alien_session(fixture_director())
    b = alien_session(fixture_director())
    for s in (a, b):
        s.estimate_scale()
        s.estimate_endpoints()
    assert a.estimate_path(6) == b.estimate_path(6)


class Scripted:
    """Transport returning canned raw answers in order."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.calls = 0

    def send(self, request):
        self.calls += 1
        return self.answers.pop(0)


def test_scale_clamped_and_flagged(caplog):
    s = Director(Scripted(["sure:\n```\nH:600,W:64\n```\n"])).session("x", "walking", None, 512, 512)
    scale = s.estimate_scale()
    assert scale.bbox.height_px == 512 and scale.bbox.width_px == 64
    assert any("clamped" in f for f in scale.flags)


@pytest.mark.parametrize("answer", ["```json\n{\"H\": 0, \"W\": 10}\n```", "```json\n{\"H\": -3, \"W\": 10}\n```",
                                    "```\nH:tall,W:64\n```", "no block here"])
def test_scale_malformed_after_retries(answer):
    t = Scripted([answer] * 3)
    s = Director(t).session("x", "walking", None, 512, 512)
    with pytest.raises(DirectorMalformed):
        s.estimate_scale()
    assert t.calls == 3  # one try plus two retries


def test_identical_endpoints_requeried_then_error():
    answers = ["```json\n{\"H\": 100, \"W\": 40}\n```"] + ["```json\n{\"start\": [50, 60]}\n```",
                                                          "```json\n{\"end\": [50, 60]}\n```"] * 2
    t = Scripted(answers)
    s = Director(t).session("x", "walking", None, 512, 512)
    s.estimate_scale()
    with pytest.raises(TrajectoryDegenerate):
        s.estimate_endpoints()
    assert t.calls == 5


def test_endpoint_outside_image_clamped():
    answers = ["```json\n{\"H\": 100, \"W\": 40}\n```", "```json\n{\"start\": [-20, 600]}\n```",
               "```json\n{\"end\": [300, 200]}\n```"]
    s = Director(Scripted(answers)).session("x", "walking", None, 512, 512)
    s.estimate_scale()
    e = s.estimate_endpoints()
    assert e.start_px == (0, 511)
    assert e.flags


def test_path_wrong_count_retried_then_malformed():
    answers = ["```json\n{\"H\": 100, \"W\": 40}\n```", "```json\n{\"start\": [10, 10]}\n```",
               "```json\n{\"end\": [300, 200]}\n```"] + ["```json\n{\"points\": [[10,10],[300,200]]}\n```"] * 3
    t = Scripted(answers)
    s = Director(t).session("x", "walking", None, 512, 512)
    s.estimate_scale()
    s.estimate_endpoints()
    with pytest.raises(DirectorMalformed):
        s.estimate_path(3)
    assert t.calls == 6


def test_path_wrong_count_recovers_on_retry():
    answers = ["```json\n{\"H\": 100, \"W\": 40}\n```", "```json\n{\"start\": [10, 10]}\n```",
               "```json\n{\"end\": [300, 200]}\n```", "```json\n{\"points\": [[10,10],[300,200]]}\n```",
               "ok ```json\n{\"points\": [[10,10],[100,80],[300,200]]}\n``` done"]
    s = Director(Scripted(answers)).session("x", "walking", None, 512, 512)
    s.estimate_scale()
    s.estimate_endpoints()
    assert s.estimate_path(3).N == 3


def test_validate_clamps_out_of_bounds():
    p = validate_trajectory(PathEstimate(((-5, 200), (100, 200), (200, 210))), (512, 512))
    assert p.points[0] == (0, 200)
    assert any("clamped" in f for f in p.flags)


def test_validate_removes_duplicates():
    p = validate_trajectory(PathEstimate(((10, 10), (20, 20), (20, 20), (30, 30))), (512, 512))
    assert p.N == 3
    assert any("duplicate" in f for f in p.flags)


def test_validate_degenerate():
    with pytest.raises(TrajectoryDegenerate):
        validate_trajectory(PathEstimate(((7, 7),) * 4), (512, 512))


def test_validate_anchors_far_endpoints():
    ends = EndpointEstimate((10.0, 400.0), (500.0, 380.0))
    path = PathEstimate(((200, 400), (300, 390)))
    out = validate_trajectory(path, (512, 512), ScaleEstimate(BBox2D(40, 20)), ends)
    assert out.points[0] == (10, 400) and out.points[-1] == (500, 380)
    near = validate_trajectory(PathEstimate(((20, 400), (490, 380))), (512, 512), BBox2D(40, 20), ends)
    assert near.N == 2


def test_parse_block_ignores_surrounding_text():
    assert parse_block("Here you go!\n```json\n{\"H\": 3}\n```\nAnything else?") == {"H": 3}


def test_fixture_file_round_trip(tmp_path):
    d = Director(MockTransport({}))
    path = tmp_path / "fx.json"
    write_fixture_file(path, [("scale", d.query_text("scale", object="cat", motion="sleeping"), {"H": 20, "W": 30})])
    director = build_director("mock", fixtures=path)
    s = director.session("cat", "sleeping", None, 64, 64)
    assert s.estimate_scale().bbox.width_px == 30


def test_live_requires_url(monkeypatch):
    monkeypatch.delenv("C3V_DIRECTOR_URL", raising=False)
    with pytest.raises(ConfigError, match="C3V_DIRECTOR_URL"):
        build_director("live")


def _live(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpTransport("http://director.test", key="secret", client=client, **kw)


def test_live_wire_format(tmp_path):
    seen = []

    def handler(request: httpx.Request):
        seen.append(request)
        body = json.loads(request.content)
        assert body["task"] == "scale"
        assert body["image"]  # base64 PNG
        return httpx.Response(200, json={"content": "```json\n{\"H\": 50, \"W\": 20}\n```"})

    audit = tmp_path / "audit.ndjson"
    director = Director(_live(handler), AuditLog(audit))
    s = director.session("a robot", "rolling", b"\x89PNG...", 128, 128)
    assert s.estimate_scale().bbox.height_px == 50
    assert seen[0].url.path == "/director"
    assert seen[0].headers["authorization"] == "Bearer secret"
    records = [json.loads(line) for line in audit.read_text().splitlines()]
    assert records[0]["response"].startswith("```json")


def test_live_unreachable_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused")

    director = Director(_live(handler))
    with pytest.raises(DirectorUnreachable):
        director.session("a", "walking", None, 64, 64).estimate_scale()
    assert len(calls) == 3


def test_replay_reproduces_inputs(tmp_path):
    audit = tmp_path / "audit.ndjson"
    live = fixture_director()
    live.audit = AuditLog(audit)
    s = alien_session(live)
    first = (s.estimate_scale(), s.estimate_endpoints(), s.estimate_path(5))
    replayed = Director(ReplayTransport(audit))
    r = alien_session(replayed)
    second = (r.estimate_scale(), r.estimate_endpoints(), r.estimate_path(5))
    assert first == second
