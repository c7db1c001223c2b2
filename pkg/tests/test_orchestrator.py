import asyncio
import json

import httpx
import pytest

from cxrfusion.core import CaseRecord, LabelVector, Verdict, ViewType
from cxrfusion.orchestrator import (
    PROMPT_TEMPLATE,
    BackendConfig,
    BackendError,
    BackendKind,
    ConfigError,
    DispatchError,
    ErrorProfile,
    HttpBackend,
    ImagePart,
    MockBackend,
    PromptPayload,
    ReplayBackend,
    RequestLog,
    TransientBackendError,
    build_prompt,
    call_with_retry,
    dispatch_all,
    dispatch_case,
    load_fixture,
    mock_verdict,
    write_fixture,
)

IMG = ImagePart("aGVsbG8=")


def payload(case_id="c1", context=""):
    return PromptPayload.build(case_id, [IMG], context=context)


def case(case_id="c1", truth=1):
    return CaseRecord(case_id, ("x.jpg",), ViewType.PA, LabelVector.from_positive(), Verdict(truth))


def run(coro):
    return asyncio.run(coro)


class Scripted:
    """Backend replaying a list of results; exceptions are raised, strings returned."""

    def __init__(self, backend_id, script, **cfg):
        self.backend_id = backend_id
        self.config = BackendConfig(backend_id, BackendKind.REPLAY, fixture_path="-", **cfg)
        self.script = list(script)
        self.calls = []

    async def invoke(self, p):
        self.calls.append(p)
        item = self.script.pop(0)
        if isinstance(item, BaseException):
            raise item
        if item == "hang":
            await asyncio.sleep(10)
        return item


class FakeSleep:
    def __init__(self):
        self.delays = []

    async def __call__(self, seconds):
        self.delays.append(seconds)


# ---------------------------------------------------------------- prompt


def test_prompt_substitutes_context_and_question():
    text = build_prompt("62-year-old with cough", "Any abnormality?")
    assert "Context: 62-year-old with cough\nQuestion: Any abnormality?\n" in text
    assert text.endswith("POSSIBLE DIAGNOSES:\n<either 1 or 0>")
    assert "{context}" not in text and "{question}" not in text
    assert build_prompt("", "q").count("Context: \n") == 1


def test_prompt_lists_thirteen_abnormalities():
    from cxrfusion.core import ABNORMALITIES

    for f in ABNORMALITIES:
        assert f.value in PROMPT_TEMPLATE
    assert "No Finding" not in PROMPT_TEMPLATE


def test_empty_question_rejected():
    with pytest.raises(ValueError):
        build_prompt("ctx", "  ")


def test_payload_needs_images_and_digest_tracks_content():
    with pytest.raises(ValueError):
        PromptPayload.build("c1", [])
    assert payload().digest() == payload().digest()
    assert payload(context="a").digest() != payload(context="b").digest()


# ---------------------------------------------------------------- config


def test_backend_config_kind_requirements():
    with pytest.raises(ConfigError):
        BackendConfig("a", BackendKind.LIVE_HTTP, endpoint="http://x")
    with pytest.raises(ConfigError):
        BackendConfig("a", BackendKind.REPLAY)
    with pytest.raises(ConfigError):
        BackendConfig("a", BackendKind.REPLAY, fixture_path="f", error_profile=ErrorProfile(1, 1))
    with pytest.raises(ConfigError):
        ErrorProfile(1.2, 0.5)


def test_backend_config_from_dict_aliases():
    cfg = BackendConfig.from_dict({"id": "m", "kind": "mock", "sensitivity": 0.8, "specificity": 0.9, "seed": 4})
    assert cfg.error_profile == ErrorProfile(0.8, 0.9, 4)
    assert BackendConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        BackendConfig.from_dict({"id": "m", "kind": "replay", "fixture": "f", "colour": "red"})


# ---------------------------------------------------------------- replay and mock


def test_fixture_round_trip_and_miss(tmp_path):
    path = tmp_path / "f.jsonl"
    write_fixture(path, [("a", "c1", "POSSIBLE DIAGNOSES:\n1\n"), ("b", "c1", "0")])
    assert load_fixture(path)[("a", "c1")] == "POSSIBLE DIAGNOSES:\n1\n"
    backend = ReplayBackend(BackendConfig("a", BackendKind.REPLAY, fixture_path=str(path)))
    assert run(backend.invoke(payload())) == "POSSIBLE DIAGNOSES:\n1\n"
    out = run(call_with_retry(backend, payload("c9"), RequestLog()))
    assert out.failed and out.error.startswith("fixture_miss")


def test_conflicting_fixture_rejected(tmp_path):
    path = tmp_path / "f.jsonl"
    write_fixture(path, [("a", "c1", "1"), ("a", "c1", "0")])
    with pytest.raises(ConfigError):
        load_fixture(path)


def test_mock_calibration_ten_thousand_cases():
    profile = ErrorProfile(0.8, 0.9, seed=7)
    pos = [mock_verdict(profile, f"p{i}", Verdict.POSITIVE) for i in range(10_000)]
    neg = [mock_verdict(profile, f"n{i}", Verdict.NEGATIVE) for i in range(10_000)]
    assert abs(sum(int(v) for v in pos) / 10_000 - 0.8) <= 0.01
    assert abs(sum(1 - int(v) for v in neg) / 10_000 - 0.9) <= 0.01


def test_mock_is_deterministic_per_seed():
    p = ErrorProfile(0.5, 0.5, seed=1)
    a = [mock_verdict(p, f"c{i}", Verdict.POSITIVE) for i in range(200)]
    assert a == [mock_verdict(p, f"c{i}", Verdict.POSITIVE) for i in range(200)]
    assert a != [mock_verdict(ErrorProfile(0.5, 0.5, 2), f"c{i}", Verdict.POSITIVE) for i in range(200)]


def test_mock_backend_output_parses():
    b = MockBackend(BackendConfig("m", BackendKind.MOCK, error_profile=ErrorProfile(1.0, 1.0)), {"c1": Verdict.POSITIVE})
    out = run(call_with_retry(b, payload(), RequestLog()))
    assert out.verdict is Verdict.POSITIVE and out.error is None


# ---------------------------------------------------------------- retry and timeout


def test_transient_errors_retry_with_exponential_backoff():
    b = Scripted("a", [TransientBackendError("HTTP 503"), TransientBackendError("HTTP 429"), "POSSIBLE DIAGNOSES: 0"],
                 backoff_initial_ms=100)
    sleep, log = FakeSleep(), RequestLog()
    out = run(call_with_retry(b, payload(), log, sleep))
    assert out.verdict is Verdict.NEGATIVE and len(b.calls) == 3
    assert sleep.delays == [0.1, 0.2]
    assert [r["outcome"] for r in log.records] == ["transient: HTTP 503", "transient: HTTP 429", "ok"]


def test_retries_exhausted_gives_failed_output():
    b = Scripted("a", [TransientBackendError("x")] * 4, max_retries=3, backoff_initial_ms=10)
    sleep = FakeSleep()
    out = run(call_with_retry(b, payload(), RequestLog(), sleep))
    assert out.failed and len(b.calls) == 4 and sleep.delays == [0.01, 0.02, 0.04]


def test_non_transient_error_is_not_retried():
    b = Scripted("a", [BackendError("HTTP 400")])
    out = run(call_with_retry(b, payload(), RequestLog(), FakeSleep()))
    assert out.failed and len(b.calls) == 1 and out.error == "backend_error: HTTP 400"


def test_timeout_is_retried():
    b = Scripted("a", ["hang", "POSSIBLE DIAGNOSES: 1"], timeout_ms=20)
    out = run(call_with_retry(b, payload(), RequestLog(), FakeSleep()))
    assert out.verdict is Verdict.POSITIVE and len(b.calls) == 2


def test_parse_failure_is_not_a_backend_failure():
    out = run(call_with_retry(Scripted("a", ["I cannot tell"]), payload(), RequestLog()))
    assert not out.failed and out.verdict is None and out.error == "parse: missing_header"


def test_unexpected_exception_contained():
    out = run(call_with_retry(Scripted("a", [RuntimeError("boom")]), payload(), RequestLog()))
    assert out.failed and "RuntimeError" in out.error


# ---------------------------------------------------------------- dispatch


def test_dispatch_sends_identical_payload_and_sorts():
    a, b = Scripted("zeta", ["1"]), Scripted("alpha", ["0"])
    outs = run(dispatch_case(case(), payload(), [a, b]))
    assert [o.backend_id for o in outs] == ["alpha", "zeta"]
    assert a.calls[0] is b.calls[0]


def test_dispatch_one_failure_still_returns():
    outs = run(dispatch_case(case(), payload(), [Scripted("a", [BackendError("x")]), Scripted("b", ["1"])]))
    assert outs[0].failed and outs[1].verdict is Verdict.POSITIVE


def test_dispatch_all_failed_raises():
    with pytest.raises(DispatchError) as info:
        run(dispatch_case(case(), payload(), [Scripted("a", [BackendError("x")]), Scripted("b", [BackendError("y")])]))
    assert len(info.value.outputs) == 2


def test_dispatch_needs_two_unique_backends():
    with pytest.raises(ConfigError):
        run(dispatch_case(case(), payload(), [Scripted("a", ["1"])]))
    with pytest.raises(ConfigError):
        run(dispatch_case(case(), payload(), [Scripted("a", ["1"]), Scripted("a", ["1"])]))


def test_dispatch_all_bounded_concurrency_and_unevaluable():
    in_flight, peak = 0, 0

    class Slow:
        def __init__(self, backend_id):
            self.backend_id = backend_id
            self.config = BackendConfig(backend_id, BackendKind.REPLAY, fixture_path="-")

        async def invoke(self, p):
            nonlocal in_flight, peak
            in_flight += 1
            peak = max(peak, in_flight)
            await asyncio.sleep(0.005)
            in_flight -= 1
            if p.case_id == "c3":
                raise BackendError("down")
            return "POSSIBLE DIAGNOSES: 1"

    items = [(case(f"c{i}"), payload(f"c{i}")) for i in range(8)]
    seen = []
    results = run(dispatch_all(items, [Slow("a"), Slow("b")], concurrency=2, on_result=seen.append))
    assert peak <= 4
    assert [r.case_id for r in results] == sorted(f"c{i}" for i in range(8))
    assert [r.case_id for r in results if r.unevaluable] == ["c3"]
    assert len(seen) == 8


# ---------------------------------------------------------------- http adapters


def http_backend(adapter, handler, env=None):
    cfg = BackendConfig("h", BackendKind.LIVE_HTTP, endpoint="https://api.example/v1", model_name="m1",
                        credential_env_var="TEST_KEY", adapter=adapter, max_retries=1, backoff_initial_ms=0)
    client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
    return HttpBackend(cfg, client=client, environ={"TEST_KEY": "sk-secret"} if env is None else env)


def test_openai_adapter_wire_format():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "POSSIBLE DIAGNOSES:\n1"}}]})

    out = run(call_with_retry(http_backend("openai", handler), payload(), RequestLog()))
    assert out.verdict is Verdict.POSITIVE
    assert seen["auth"] == "Bearer sk-secret"
    content = seen["body"]["messages"][0]["content"]
    assert content[0]["type"] == "text" and content[1]["image_url"]["url"] == "data:image/jpeg;base64,aGVsbG8="


def test_anthropic_adapter_wire_format():
    seen = {}

    def handler(request):
        seen["key"] = request.headers["x-api-key"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"content": [{"type": "text", "text": "POSSIBLE DIAGNOSES: 0"}]})

    out = run(call_with_retry(http_backend("anthropic", handler), payload(), RequestLog()))
    assert out.verdict is Verdict.NEGATIVE and seen["key"] == "sk-secret"
    assert seen["body"]["messages"][0]["content"][0]["source"]["data"] == "aGVsbG8="


def test_http_status_classification():
    codes = iter([503, 200])

    def flaky(request):
        code = next(codes)
        return httpx.Response(code, json={"choices": [{"message": {"content": "1"}}]})

    out = run(call_with_retry(http_backend("openai", flaky), payload(), RequestLog(), FakeSleep()))
    assert out.verdict is Verdict.POSITIVE

    calls = []

    def bad_request(request):
        calls.append(1)
        return httpx.Response(400, json={})

    out = run(call_with_retry(http_backend("openai", bad_request), payload(), RequestLog(), FakeSleep()))
    assert out.failed and len(calls) == 1


def test_credential_required_and_never_logged(tmp_path):
    with pytest.raises(ConfigError):
        http_backend("openai", lambda r: httpx.Response(200), env={})
    log = RequestLog(tmp_path / "req.jsonl")
    b = http_backend("openai", lambda r: httpx.Response(500))
    run(call_with_retry(b, payload(), log, FakeSleep()))
    assert "sk-secret" not in (tmp_path / "req.jsonl").read_text()
    assert "sk-secret" not in repr(b)
