import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tmas.backend import (
    API_KEY_ENV,
    ENDPOINT_ENV,
    MODEL_ENV,
    CompletionRequest,
    CompletionResult,
    FinishReason,
    LiveBackend,
    RequestRecord,
    RetryPolicy,
    RoleTag,
    ScriptEntry,
    ScriptedBackend,
    load_script,
)
from tmas.errors import ParseError, SchemaError, ScriptMatchError, TransportError


def req(role=RoleTag.SOLUTION, system="sys", user="usr", seq=None):
    return CompletionRequest(
        system_prompt=system, user_prompt=user, role_tag=role, sequence=seq
    )


# -- request and entry validation ----------------------------------------------


def test_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest(system_prompt="s", user_prompt="u",
                          role_tag=RoleTag.SOLUTION, temperature=-0.5)
    with pytest.raises(ValueError):
        CompletionRequest(system_prompt="s", user_prompt="u",
                          role_tag=RoleTag.SOLUTION, top_p=0.0)
    with pytest.raises(ValueError):
        CompletionRequest(system_prompt="s", user_prompt="u",
                          role_tag=RoleTag.SOLUTION, max_output_tokens=0)


def test_prompt_hash_depends_on_both_prompts():
    a = req(system="s1", user="u1").prompt_hash()
    assert a == req(system="s1", user="u1").prompt_hash()
    assert a != req(system="s2", user="u1").prompt_hash()
    assert a != req(system="s1", user="u2").prompt_hash()
    # the separator prevents boundary ambiguity
    assert req(system="ab", user="c").prompt_hash() != req(system="a", user="bc").prompt_hash()


def test_script_entry_key_validation():
    ScriptEntry(role_tag=RoleTag.SOLUTION, key="seq:0", response="x")
    ScriptEntry(role_tag=RoleTag.SOLUTION, key="sha256:" + "0" * 64, response="x")
    with pytest.raises(ValueError):
        ScriptEntry(role_tag=RoleTag.SOLUTION, key="idx:0", response="x")
    with pytest.raises(ValueError):
        ScriptEntry(role_tag=RoleTag.SOLUTION, key="seq:x", response="x")
    with pytest.raises(ValueError):
        ScriptEntry(role_tag=RoleTag.SOLUTION, key="seq:0", response="x", fail="boom")


# -- script file loading ----------------------------------------------------------


def test_load_script_roundtrip(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(
        '{"role_tag": "solution", "key": "seq:0", "response": "hi"}\n'
        '{"role_tag": "verification", "key": "seq:0", "response": "ho", "fail": "transport"}\n'
    )
    entries = load_script(path)
    assert len(entries) == 2
    assert entries[0].role_tag is RoleTag.SOLUTION
    assert entries[1].fail == "transport"


def test_load_script_line_numbers_on_errors(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text('{"role_tag": "solution", "key": "seq:0", "response": "x"}\nnope\n')
    with pytest.raises(ParseError) as err:
        load_script(path)
    assert err.value.line == 2


def test_load_script_rejects_duplicates(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(
        '{"role_tag": "solution", "key": "seq:0", "response": "a"}\n'
        '{"role_tag": "solution", "key": "seq:0", "response": "b"}\n'
    )
    with pytest.raises(ParseError):
        load_script(path)


def test_load_script_rejects_unknown_role(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text('{"role_tag": "oracle", "key": "seq:0", "response": "x"}\n')
    with pytest.raises(ParseError):
        load_script(path)


# -- scripted backend ---------------------------------------------------------------


def test_scripted_matches_by_sequence():
    backend = ScriptedBackend([ScriptEntry(RoleTag.SOLUTION, "seq:3", "reply")])
    result = backend.complete(req(seq=3))
    assert result.text == "reply"
    assert result.finish_reason is FinishReason.STOP


def test_scripted_matches_by_hash():
    request = req(system="a", user="b")
    backend = ScriptedBackend(
        [ScriptEntry(RoleTag.SOLUTION, f"sha256:{request.prompt_hash()}", "hashed")]
    )
    assert backend.complete(request).text == "hashed"


def test_scripted_no_match_raises():
    backend = ScriptedBackend([ScriptEntry(RoleTag.SOLUTION, "seq:0", "x")])
    with pytest.raises(ScriptMatchError):
        backend.complete(req(seq=1))
    with pytest.raises(ScriptMatchError):
        backend.complete(req(role=RoleTag.SUMMARY, seq=0))


def test_scripted_ambiguous_match_raises():
    request = req(seq=0)
    backend = ScriptedBackend([
        ScriptEntry(RoleTag.SOLUTION, "seq:0", "a"),
        ScriptEntry(RoleTag.SOLUTION, f"sha256:{request.prompt_hash()}", "b"),
    ])
    with pytest.raises(ScriptMatchError):
        backend.complete(request)


def test_scripted_failure_simulation():
    backend = ScriptedBackend([
        ScriptEntry(RoleTag.SOLUTION, "seq:0", "", fail="transport"),
        ScriptEntry(RoleTag.SOLUTION, "seq:1", "", fail="schema"),
    ])
    with pytest.raises(TransportError):
        backend.complete(req(seq=0))
    with pytest.raises(SchemaError):
        backend.complete(req(seq=1))


def test_scripted_length_capped():
    backend = ScriptedBackend(
        [ScriptEntry(RoleTag.SOLUTION, "seq:0", "cut", finish_reason=FinishReason.LENGTH_CAPPED)]
    )
    assert backend.complete(req(seq=0)).finish_reason is FinishReason.LENGTH_CAPPED


def test_scripted_duplicate_entries_rejected():
    with pytest.raises(ParseError):
        ScriptedBackend([
            ScriptEntry(RoleTag.SOLUTION, "seq:0", "a"),
            ScriptEntry(RoleTag.SOLUTION, "seq:0", "b"),
        ])


def test_request_log_records_prompts():
    backend = ScriptedBackend([ScriptEntry(RoleTag.SOLUTION, "seq:0", "x")])
    backend.complete(req(system="S", user="U", seq=0))
    assert backend.request_log == [
        RequestRecord(role_tag=RoleTag.SOLUTION, sequence=0,
                      prompt_hash=req(system="S", user="U").prompt_hash(),
                      system_prompt="S", user_prompt="U")
    ]


def test_describe_is_stable_under_entry_order():
    a = ScriptedBackend([
        ScriptEntry(RoleTag.SOLUTION, "seq:0", "x"),
        ScriptEntry(RoleTag.SUMMARY, "seq:0", "y"),
    ])
    b = ScriptedBackend([
        ScriptEntry(RoleTag.SUMMARY, "seq:0", "y"),
        ScriptEntry(RoleTag.SOLUTION, "seq:0", "x"),
    ])
    assert a.describe() == b.describe()
    assert a.describe().startswith("script:")


# -- concurrency budget --------------------------------------------------------------


class SlowBackend(ScriptedBackend):
    def _serve(self, request):
        time.sleep(0.002)
        return super()._serve(request)


def test_budget_enforced_under_stress():
    entries = [ScriptEntry(RoleTag.SOLUTION, f"seq:{k}", "ok") for k in range(200)]
    backend = SlowBackend(entries, max_in_flight=4)
    with ThreadPoolExecutor(max_workers=32) as pool:
        results = list(pool.map(lambda k: backend.complete(req(seq=k)), range(200)))
    assert all(r.text == "ok" for r in results)
    assert backend.peak_in_flight <= 4
    # with 32 eager workers the budget must actually have been exercised
    assert backend.peak_in_flight >= 2
    assert len(backend.request_log) == 200


# -- live backend over a local HTTP server ---------------------------------------------


class _State:
    def __init__(self):
        self.responses = []  # list of (status, body bytes, content_type)
        self.requests = []  # recorded (headers, payload) pairs
        self.lock = threading.Lock()


def completion_body(text, finish_reason="stop"):
    return json.dumps(
        {"choices": [{"message": {"role": "assistant", "content": text},
                      "finish_reason": finish_reason}]}
    ).encode("utf-8")


@pytest.fixture
def http_endpoint():
    state = _State()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            with state.lock:
                state.requests.append((dict(self.headers), payload))
                status, body, ctype = (
                    state.responses.pop(0)
                    if state.responses
                    else (200, completion_body("default"), "application/json")
                )
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions", state
    finally:
        server.shutdown()
        thread.join(timeout=5)


def make_live(endpoint, **kwargs):
    kwargs.setdefault("sleeper", lambda s: None)
    kwargs.setdefault("retry", RetryPolicy(max_attempts=4, backoff_base_ms=1))
    return LiveBackend(endpoint=endpoint, **kwargs)


def test_live_success_and_payload_shape(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.append((200, completion_body("hello there"), "application/json"))
    backend = make_live(endpoint, api_key="sekrit", model="m-1")
    result = backend.complete(
        CompletionRequest(system_prompt="sys", user_prompt="usr",
                          role_tag=RoleTag.SOLUTION, temperature=0.7,
                          top_p=0.9, max_output_tokens=128)
    )
    assert isinstance(result, CompletionResult)
    assert result.text == "hello there"
    assert result.attempt_count == 1
    headers, payload = state.requests[0]
    assert headers.get("Authorization") == "Bearer sekrit"
    assert payload["model"] == "m-1"
    assert payload["temperature"] == 0.7
    assert payload["top_p"] == 0.9
    assert payload["max_tokens"] == 128
    assert [m["role"] for m in payload["messages"]] == ["system", "user"]


def test_live_retries_429_then_succeeds(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.extend([
        (429, b"slow down", "text/plain"),
        (429, b"slow down", "text/plain"),
        (200, completion_body("finally"), "application/json"),
    ])
    backend = make_live(endpoint)
    result = backend.complete(req())
    assert result.text == "finally"
    assert result.attempt_count == 3
    assert len(state.requests) == 3


def test_live_5xx_exhausts_retries(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.extend([(503, b"down", "text/plain")] * 4)
    backend = make_live(endpoint)
    with pytest.raises(TransportError):
        backend.complete(req())
    assert len(state.requests) == 4


def test_live_4xx_is_terminal_no_retry(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.append((400, b"bad request", "text/plain"))
    backend = make_live(endpoint)
    with pytest.raises(TransportError):
        backend.complete(req())
    assert len(state.requests) == 1


def test_live_non_json_body_is_schema_error_no_retry(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.append((200, b"<html>oops</html>", "text/html"))
    backend = make_live(endpoint)
    with pytest.raises(SchemaError):
        backend.complete(req())
    assert len(state.requests) == 1


def test_live_malformed_payload_is_schema_error(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.append((200, json.dumps({"choices": []}).encode(), "application/json"))
    backend = make_live(endpoint)
    with pytest.raises(SchemaError):
        backend.complete(req())


def test_live_length_finish_reason_maps_to_capped(http_endpoint):
    endpoint, state = http_endpoint
    state.responses.append((200, completion_body("cut off", "length"), "application/json"))
    backend = make_live(endpoint)
    assert backend.complete(req()).finish_reason is FinishReason.LENGTH_CAPPED


def test_live_connection_refused_retries_then_fails():
    backend = make_live("http://127.0.0.1:1/nope",
                        retry=RetryPolicy(max_attempts=2, backoff_base_ms=1))
    with pytest.raises(TransportError):
        backend.complete(req())


def test_from_env(monkeypatch):
    env = {ENDPOINT_ENV: "http://x/v1", API_KEY_ENV: "k", MODEL_ENV: "m"}
    backend = LiveBackend.from_env(env)
    assert backend.endpoint == "http://x/v1"
    assert backend.api_key == "k"
    assert backend.model == "m"
    with pytest.raises(TransportError):
        LiveBackend.from_env({})


def test_live_describe_mentions_endpoint_and_model():
    backend = make_live("http://host/v1", model="mm")
    assert backend.describe() == "live:http://host/v1 model=mm"
