import json

import httpx
import numpy as np
import pytest

from vlcfusion import vlm as V


def _req(schema="boolean_map", n=2, prompt="1. Is it dark?\n2. Is it raining?", images=("img0",)):
    return V.VlmRequest("sys", prompt, tuple(V.ImageRef(r) for r in images), schema, n if schema == "boolean_map" else None)


@pytest.mark.parametrize("raw,expected", [
    ('{"1": true, "2": false}', [True, False]),
    ('```json\n{"1": "True", "2": "false"}\n```', [True, False]),
    ("{\"1\": True, \"2\": False}", [True, False]),
])
def test_boolean_map_parsing(raw, expected):
    assert V.parse_response(raw, "boolean_map", 2) == expected


@pytest.mark.parametrize("raw,match", [
    ('{"1": true}', "missing=\\['2'\\]"),
    ('{"1": true, "2": false, "3": true}', "extra=\\['3'\\]"),
    ('{"1": "maybe", "2": false}', "not a boolean"),
    ("not json", "not JSON"),
    ("[true, false]", "JSON object"),
])
def test_boolean_map_rejects(raw, match):
    with pytest.raises(V.VlmSchemaError, match=match) as info:
        V.parse_response(raw, "boolean_map", 2)
    assert info.value.raw_text == raw


def test_caption_and_condition_list_parsing():
    assert V.parse_response('{"Conditions": " wet road "}', "caption") == "wet road"
    assert V.parse_response('{"Conditions": ["Is it dark?", " "]}', "condition_list") == ["Is it dark?"]
    for bad in ('{"Conditions": ""}', '{"Other": "x"}', '{"Conditions": 3}'):
        with pytest.raises(V.VlmSchemaError):
            V.parse_response(bad, "caption")
    with pytest.raises(V.VlmSchemaError):
        V.parse_response('{"Conditions": [1, 2]}', "condition_list")


def test_request_validation_and_digest():
    with pytest.raises(ValueError):
        V.VlmRequest("s", "u", (), "boolean_map")
    with pytest.raises(ValueError):
        V.VlmRequest("s", "u", (), "essay")
    assert _req().digest() == _req().digest()
    assert _req().digest() != _req(images=("img1",)).digest()


def test_parse_question_list_orders_by_number():
    assert V.parse_question_list("Questions:\n2. b?\n1. a?\n") == ["a?", "b?"]


def test_mock_answers_and_flip_statistics():
    truth = {"Is it dark?": True, "Is it raining?": False}
    m = V.MockVLM(answer=lambda ref, q: truth[q], flip={"Is it raining?": 0.5}, seed=3)
    out = [V.query(_req(), m).parsed for _ in range(400)]
    assert all(o[0] is True for o in out)
    frac = np.mean([o[1] for o in out])
    assert 0.4 < frac < 0.6


def test_mock_is_reproducible_across_instances():
    def run():
        m = V.MockVLM(answer=lambda r, q: True, flip=0.3, seed=9)
        return [V.query(_req(images=(f"i{k % 3}",)), m).parsed for k in range(30)]
    assert run() == run()


def test_mock_caption_extract_and_responder():
    m = V.MockVLM(captions=lambda r: f"scene {r}", extracted=["Is it dark?"])
    assert V.query(_req("caption", prompt="p"), m).parsed == "scene img0"
    assert V.query(_req("condition_list", prompt="p"), m).parsed == ["Is it dark?"]
    scripted = V.MockVLM(responder=lambda req, i: "oops" if i == 0 else '{"1": true, "2": true}')
    with pytest.raises(V.VlmSchemaError):
        V.query(_req(), scripted)
    assert V.query(_req(), scripted).parsed == [True, True]


def test_token_bucket_waits_for_refill():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    tb = V.TokenBucket(rate=2.0, capacity=1.0, clock=lambda: now[0], sleep=sleep)
    tb.acquire()
    tb.acquire()
    assert slept == [pytest.approx(0.5)]
    with pytest.raises(ValueError):
        V.TokenBucket(0)


def test_config_from_env():
    cfg = V.VlmConfig.from_env({"VLCFUSION_VLM_MODEL": "tiny", "VLCFUSION_VLM_TIMEOUT": "5",
                                "VLCFUSION_VLM_RATE_LIMIT": "100"})
    assert cfg.model == "tiny" and cfg.timeout == 5.0 and cfg.rate_limit == 100.0


def _backend(handler):
    cfg = V.VlmConfig(endpoint="http://vlm.test/v1/chat", api_key="k", model="m", rate_limit=1000)
    return V.HttpVlmBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))


def test_http_backend_payload_and_reply(tmp_path):
    np.savez(tmp_path / "s.npz", modality_a=np.random.default_rng(0).standard_normal((3, 4, 4)))
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"1": true, "2": false}'}}]})

    req = V.VlmRequest("sys", "1. a?\n2. b?", (V.ImageRef("s", str(tmp_path / "s.npz")),), "boolean_map", 2)
    resp = V.query(req, _backend(handler))
    assert resp.parsed == [True, False]
    body = seen["body"]
    assert body["temperature"] == 0 and body["model"] == "m" and seen["auth"] == "Bearer k"
    url = body["messages"][1]["content"][1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")


@pytest.mark.parametrize("handler,exc", [
    (lambda r: httpx.Response(503, text="busy"), V.VlmNetworkError),
    (lambda r: (_ for _ in ()).throw(httpx.ConnectError("down")), V.VlmNetworkError),
    (lambda r: (_ for _ in ()).throw(httpx.ReadTimeout("slow")), V.VlmTimeoutError),
    (lambda r: httpx.Response(200, json={"nope": 1}), V.VlmSchemaError),
])
def test_http_backend_errors(handler, exc):
    with pytest.raises(exc):
        _backend(handler).complete(_req(images=()))


def test_image_without_path_is_an_error():
    with pytest.raises(V.VlmError):
        V.image_data_url(V.ImageRef("x"))


def test_benchmark_backend_reports_mean_latency():
    prof = V.benchmark_backend(V.MockVLM(delay=0.01), [V.ImageRef("a"), V.ImageRef("b")])
    assert prof.seconds_per_image >= 0.01
    with pytest.raises(ValueError):
        V.benchmark_backend(V.MockVLM(), [])
