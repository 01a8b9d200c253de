from __future__ import annotations

import json
import threading
import time

import httpx
import pytest

from atc_coder.backend import (
    AdversarialBackend,
    ChatMessage,
    GenerationParams,
    HttpChatBackend,
    OracleBackend,
    complete,
)
from atc_coder.engine import render_prompt
from atc_coder.errors import BackendError, OracleMiss, ScriptExhausted, ServerError, TransportError
from atc_coder.knowledge import GroundingSetting
from atc_coder.ontology import parse_code, parse_ontology

PARAMS = GenerationParams(model_id="llama-3.1-70b")
MESSAGES = [ChatMessage("system", "sys"), ChatMessage("user", "hello")]


def _ok(content="N02"):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def _backend(handler, **kw):
    sleeps = []
    kw.setdefault("token_env", None)
    b = HttpChatBackend("http://llm.local/v1/", transport=httpx.MockTransport(handler),
                        sleep=sleeps.append, **kw)
    return b, sleeps


def test_defaults():
    p = GenerationParams()
    assert (p.temperature, p.seed) == (0.1, 42)
    with pytest.raises(ValueError):
        GenerationParams(temperature=-1)


def test_message_validation():
    with pytest.raises(ValueError):
        ChatMessage("user", "")
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")


def test_http_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _ok("A: Alimentary tract and metabolism")

    monkeypatch.setenv("TEST_LLM_TOKEN", "s3cret")
    b, _ = _backend(handler, token_env="TEST_LLM_TOKEN")
    assert complete(b, MESSAGES, PARAMS) == "A: Alimentary tract and metabolism"
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["auth"] == "Bearer s3cret"
    assert seen["body"] == {
        "model": "llama-3.1-70b",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "hello"}],
        "temperature": 0.1,
        "seed": 42,
        "max_tokens": 64,
    }
    assert not hasattr(b, "token")


def test_missing_token_env(monkeypatch):
    monkeypatch.delenv("NOPE_TOKEN", raising=False)
    b, _ = _backend(lambda r: _ok(), token_env="NOPE_TOKEN")
    with pytest.raises(BackendError):
        b.complete(MESSAGES, PARAMS)


def test_retry_then_success():
    replies = iter([httpx.Response(503, text="busy"), httpx.Response(429, text="slow down"), _ok()])
    b, sleeps = _backend(lambda r: next(replies))
    assert b.complete(MESSAGES, PARAMS) == "N02"
    assert sleeps == [1.0, 2.0]


def test_server_error_not_retried():
    calls = []

    def handler(r):
        calls.append(r)
        return httpx.Response(400, text="bad model")

    b, sleeps = _backend(handler)
    with pytest.raises(ServerError) as info:
        b.complete(MESSAGES, PARAMS)
    assert info.value.status == 400 and "bad model" in info.value.body
    assert len(calls) == 1 and sleeps == []


def test_5xx_exhausted():
    calls = []

    def handler(r):
        calls.append(r)
        return httpx.Response(500, text="boom")

    b, sleeps = _backend(handler)
    with pytest.raises(ServerError):
        b.complete(MESSAGES, PARAMS)
    assert len(calls) == 3
    assert sleeps == [1.0, 2.0]


def test_transport_error_exhausted():
    def handler(r):
        raise httpx.ConnectError("refused", request=r)

    b, sleeps = _backend(handler, max_attempts=4)
    with pytest.raises(TransportError):
        b.complete(MESSAGES, PARAMS)
    assert sleeps == [1.0, 2.0, 4.0]


def test_malformed_payload():
    b, _ = _backend(lambda r: httpx.Response(200, json={"choices": []}))
    with pytest.raises(ServerError):
        b.complete(MESSAGES, PARAMS)


def test_max_in_flight():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(r):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return _ok()

    b, _ = _backend(handler, max_in_flight=2)
    threads = [threading.Thread(target=b.complete, args=(MESSAGES, PARAMS)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2


def test_first_message_must_be_system():
    b = AdversarialBackend(["x"])
    with pytest.raises(ValueError):
        b.complete([ChatMessage("user", "hi")], PARAMS)
    with pytest.raises(ValueError):
        b.complete([], PARAMS)


def test_adversarial_script():
    b = AdversarialBackend(["garbage", "N02"])
    assert b.complete(MESSAGES, PARAMS) == "garbage"
    assert b.complete(MESSAGES, PARAMS) == "N02"
    with pytest.raises(ScriptExhausted):
        b.complete(MESSAGES, PARAMS)
    cyc = AdversarialBackend(["a", "b"], cycle=True)
    assert [cyc.complete(MESSAGES, PARAMS) for _ in range(5)] == ["a", "b", "a", "b", "a"]


def test_adversarial_threads_consume_each_reply_once():
    script = [str(i) for i in range(400)]
    b = AdversarialBackend(script)
    out = []
    lock = threading.Lock()

    def worker():
        for _ in range(100):
            r = b.complete(MESSAGES, PARAMS)
            with lock:
                out.append(r)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(out, key=int) == script


def test_oracle_level_one(sample_ontology):
    oracle = OracleBackend({"metformin": "A10BA02"})
    msgs = render_prompt("metformin", None, sample_ontology, GroundingSetting.WITH_NAME)
    assert oracle.complete(msgs, PARAMS) == "A: Alimentary tract and metabolism"
    assert oracle.complete(msgs, PARAMS) == "A: Alimentary tract and metabolism"


def test_oracle_code_only(sample_ontology):
    oracle = OracleBackend({"metformin": parse_code("A10BA02")})
    msgs = render_prompt("metformin", parse_code("A10BA"), sample_ontology, GroundingSetting.CODE_ONLY)
    assert oracle.complete(msgs, PARAMS) == "A10BA02"


def test_oracle_miss():
    onto = parse_ontology(["N\tNervous system\n", "N01\tAnesthetics\n", "N02\tAnalgesics\n"])
    oracle = OracleBackend({"metformin": "A10BA02"})
    msgs = render_prompt("metformin", parse_code("N"), onto)
    with pytest.raises(OracleMiss):
        oracle.complete(msgs, PARAMS)
    with pytest.raises(OracleMiss):
        OracleBackend({}).complete(msgs, PARAMS)
    with pytest.raises(OracleMiss):
        oracle.complete([ChatMessage("system", "x"), ChatMessage("user", "not a prompt")], PARAMS)


def test_oracle_does_not_mutate(sample_ontology):
    oracle = OracleBackend({"metformin": "A10BA02"})
    msgs = render_prompt("metformin", None, sample_ontology)
    snapshot = list(msgs)
    oracle.complete(msgs, PARAMS)
    assert msgs == snapshot
