from __future__ import annotations

import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atc_coder.backend import AdversarialBackend, ChatBackend, OracleBackend
from atc_coder.engine import (
    HierarchicalCoder,
    Option,
    code_batch,
    code_mention,
    normalize_reply,
    render_prompt,
)
from atc_coder.errors import AmbiguousMatch, NoChildren, TransportError
from atc_coder.knowledge import GroundingSetting
from atc_coder.ontology import parse_code

from .conftest import GOLDEN
from .synth import random_ontology


def opts(*codes):
    return [Option(parse_code(c), f"{c}: name {c.lower()}") for c in codes]


def golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8").removesuffix("\n")


# prompt rendering ------------------------------------------------------------

def test_root_prompt_golden(sample_ontology):
    system, user = render_prompt("metformin", None, sample_ontology, GroundingSetting.WITH_NAME)
    assert system.role == "system" and user.role == "user"
    assert system.content == golden("system.txt")
    assert user.content == golden("metformin_level1_with_name.txt")
    assert "A: Alimentary tract and metabolism" in user.content.splitlines()


def test_code_only_golden(sample_ontology):
    _, user = render_prompt("GLUCOPHAGE", parse_code("A10BA"), sample_ontology, GroundingSetting.CODE_ONLY)
    assert user.content == golden("glucophage_level5_code_only.txt")


def test_umls_golden(sample_ontology, sample_definitions):
    _, user = render_prompt("TYLENOL", parse_code("N"), sample_ontology, GroundingSetting.WITH_UMLS,
                            sample_definitions)
    assert user.content == golden("tylenol_level2_with_umls.txt")


def test_single_child_prompt(chain_ontology):
    _, user = render_prompt("metformin", parse_code("A10BA"), chain_ontology, GroundingSetting.CODE_ONLY)
    assert user.content.splitlines()[1:-1] == ["A10BA02"]


def test_leaf_has_no_prompt(chain_ontology):
    with pytest.raises(NoChildren):
        render_prompt("metformin", parse_code("A10BA02"), chain_ontology)


def test_prompt_is_pure(sample_ontology):
    a = render_prompt("x", parse_code("A10"), sample_ontology)
    b = render_prompt("x", parse_code("A10"), sample_ontology)
    assert [m.content.encode() for m in a] == [m.content.encode() for m in b]


# reply normalization --------------------------------------------------------

def _token_oracle(raw: str, codes: list[str]) -> list[str]:
    """Every option code appearing as a standalone alphanumeric run in the reply."""
    hits = []
    upper = raw.upper()
    for code in codes:
        for i in range(len(upper) - len(code) + 1):
            if upper[i:i + len(code)] != code:
                continue
            before = upper[i - 1] if i else " "
            after = upper[i + len(code)] if i + len(code) < len(upper) else " "
            if not before.isalnum() and not after.isalnum():
                hits.append(code)
                break
    return hits


def test_prefix_form():
    assert normalize_reply("A10BA02: metformin", opts("A10BA02", "A10BA01")).text == "A10BA02"


def test_token_anywhere():
    raw = "The best match is N02."
    codes = ["N01", "N02", "N03"]
    assert _token_oracle(raw, codes) == ["N02"]
    assert normalize_reply(raw, opts(*codes)).text == "N02"


def test_no_match():
    assert normalize_reply("X99", opts("N01", "N02")) is None


def test_ambiguous():
    with pytest.raises(AmbiguousMatch) as info:
        normalize_reply("N01 or N02", opts("N01", "N02"))
    assert info.value.stage == 3


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("n02", "N02"),
        ("  N02\n", "N02"),
        ("N02 Analgesics", "N02"),
        ("N02:", "N02"),
        ("**N02**", "N02"),
        ("`N02: Analgesics`", "N02"),
        ("analgesics", "N02"),
        ("I'd say ANALGESICS for sure", "N02"),
    ],
)
def test_cascade(raw, expected):
    options = [Option(parse_code("N01"), "N01: Anesthetics"), Option(parse_code("N02"), "N02: Analgesics")]
    assert normalize_reply(raw, options).text == expected


def test_name_stage_ambiguous():
    options = [Option(parse_code("N01"), "N01: Anesthetics"), Option(parse_code("N02"), "N02: Analgesics")]
    with pytest.raises(AmbiguousMatch) as info:
        normalize_reply("anesthetics and analgesics", options)
    assert info.value.stage == 4


def test_code_only_has_no_name_stage():
    options = [Option(parse_code("N01"), "N01"), Option(parse_code("N02"), "N02")]
    assert normalize_reply("analgesics", options) is None


def test_longer_code_is_not_a_token_hit():
    assert normalize_reply("A10BA02", opts("A10", "A12")) is None


def test_tuple_options():
    assert normalize_reply("N02", [(parse_code("N02"), "N02: x")]).text == "N02"
    with pytest.raises(ValueError):
        normalize_reply("N02", [])


@given(st.lists(st.sampled_from(["N01", "N02", "N03", "the", "is", ".", " ", "N0", "N021", "x"]), max_size=6))
def test_token_stage_matches_oracle(words):
    raw = " ".join(words)
    codes = ["N01", "N02", "N03"]
    # labels never appear, so only code stages can hit
    options = [Option(parse_code(c), f"{c}: zzqq{c}") for c in codes]
    hits = _token_oracle(raw, codes)
    if len(hits) > 1:
        with pytest.raises(AmbiguousMatch):
            normalize_reply(raw, options)
    elif hits:
        assert normalize_reply(raw, options).text == hits[0]
    else:
        assert normalize_reply(raw, options) is None


# traversal ------------------------------------------------------------------

class CountingBackend(ChatBackend):
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def _reply(self, messages, params):
        self.calls += 1
        return self.inner.complete(messages, params)


def test_metformin_oracle(sample_ontology):
    trace = code_mention("metformin", sample_ontology, OracleBackend({"metformin": "A10BA02"}))
    assert trace.final.text == "A10BA02"
    assert [s.level for s in trace.steps] == [1, 2, 3, 4, 5]
    assert [s.selected.text for s in trace.steps] == ["A", "A10", "A10B", "A10BA", "A10BA02"]
    assert not trace.abstained


def test_chain_needs_no_calls(chain_ontology):
    backend = CountingBackend(AdversarialBackend(["garbage"], cycle=True))
    trace = code_mention("anything", chain_ontology, backend)
    assert trace.final.text == "A10BA02"
    assert backend.calls == 0
    assert all(s.auto_selected for s in trace.steps)


def test_auto_select_off_prompts_single_options(chain_ontology):
    backend = CountingBackend(OracleBackend({"metformin": "A10BA02"}))
    trace = code_mention("metformin", chain_ontology, backend, auto_select=False)
    assert trace.final.text == "A10BA02"
    assert backend.calls == 5


def test_garbage_abstains(sample_ontology):
    retries = 2
    backend = AdversarialBackend(["garbage"], cycle=True)
    trace = code_mention("senna", sample_ontology, backend, retries_per_level=retries)
    assert trace.abstained and trace.final is None
    assert len(trace.steps) == 1
    assert trace.steps[0].attempts == ["garbage"] * (retries + 1)
    assert backend.calls == retries + 1


def test_stops_at_deepest_match(sample_ontology):
    backend = AdversarialBackend(["A", "nonsense", "still nonsense"])
    trace = code_mention("senna", sample_ontology, backend, retries_per_level=1)
    assert trace.final.text == "A"
    assert not trace.abstained
    assert backend.calls == 3


def test_retry_recovers(sample_ontology):
    backend = AdversarialBackend(["?", "N", "N01 or N02", "N02", "N02B", "N02BE", "N02BE01"])
    trace = code_mention("tylenol", sample_ontology, backend)
    assert trace.final.text == "N02BE01"
    assert trace.steps[0].attempts == ["?", "N"]
    assert trace.steps[1].attempts == ["N01 or N02", "N02"]


def test_stops_at_shallow_leaf(sample_ontology):
    backend = AdversarialBackend(["D"])
    trace = code_mention("cream", sample_ontology, backend)
    assert trace.final.text == "D"
    assert len(trace.steps) == 1


def test_transport_error_propagates(sample_ontology):
    class Down(ChatBackend):
        def _reply(self, messages, params):
            raise TransportError("down")

    with pytest.raises(TransportError):
        code_mention("x", sample_ontology, Down())


def test_empty_mention_rejected(sample_ontology):
    with pytest.raises(ValueError):
        code_mention("   ", sample_ontology, OracleBackend({}))


def test_trace_json_shape(sample_ontology):
    trace = code_mention("metformin", sample_ontology, OracleBackend({"metformin": "A10BA02"}))
    d = trace.to_dict()
    assert set(d) >= {"mention", "grounding", "final", "abstained", "steps"}
    assert d["final"] == "A10BA02" and d["grounding"] == "with-name"
    assert set(d["steps"][0]) >= {"level", "options", "raw_reply", "selected", "auto_selected"}
    assert d["steps"][0]["options"][0] == "A"


# batch ----------------------------------------------------------------------

def test_batch_order(sample_ontology):
    gold = {"GLUCOPHAGE": "A10BA02", "TYLENOL": "N02BE01", "LIPITOR": "C10AA05"}
    traces = code_batch(list(gold), sample_ontology, OracleBackend(gold), max_concurrency=2)
    assert [t.mention for t in traces] == list(gold)
    assert [t.final.text for t in traces] == list(gold.values())


def test_batch_empty(sample_ontology):
    assert code_batch([], sample_ontology, OracleBackend({})) == []


def test_batch_isolates_errors(sample_ontology):
    class Flaky(ChatBackend):
        def __init__(self):
            self.oracle = OracleBackend({"a": "A10BA02", "c": "N02BE01"})

        def _reply(self, messages, params):
            if "`b'" in messages[1].content:
                raise TransportError("connection reset")
            return self.oracle.complete(messages, params)

    traces = code_batch(["a", "b", "c"], sample_ontology, Flaky(), max_concurrency=3)
    assert [t.final.text if t.final else None for t in traces] == ["A10BA02", None, "N02BE01"]
    assert traces[1].error and "TransportError" in traces[1].error
    assert not traces[1].abstained
    assert traces[0].error is None and traces[2].error is None


def test_batch_concurrency_bound(sample_ontology):
    import threading
    import time

    lock = threading.Lock()
    state = {"now": 0, "peak": 0}
    oracle = OracleBackend({f"m{i}": "A10BA02" for i in range(12)})

    class Slow(ChatBackend):
        def _reply(self, messages, params):
            with lock:
                state["now"] += 1
                state["peak"] = max(state["peak"], state["now"])
            time.sleep(0.005)
            with lock:
                state["now"] -= 1
            return oracle.complete(messages, params)

    coder = HierarchicalCoder(sample_ontology, Slow())
    traces = coder.code_batch([f"m{i}" for i in range(12)], max_concurrency=3)
    assert all(t.final.text == "A10BA02" for t in traces)
    assert state["peak"] <= 3


# properties -----------------------------------------------------------------

def assert_no_fabrication(trace, ontology):
    parent = None
    for step in trace.steps:
        codes = [o.code for o in step.options]
        assert codes == [e.code for e in ontology.children(parent)]
        assert step.level == (parent.level + 1 if parent else 1)
        if step.selected is None:
            break
        assert step.selected in codes
        assert step.selected in ontology
        parent = step.selected
    if trace.final is not None:
        assert trace.final in ontology
        assert trace.final == parent


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.booleans(),
       st.sampled_from(list(GroundingSetting)))
def test_never_fabricates(seed, retries, auto, setting):
    rng = random.Random(seed)
    onto = random_ontology(rng, n_roots=5, max_children=4)
    vocab = list(onto.entries) + ["Z99", "A10BA99", "garbage"]
    script = [rng.choice(vocab) + rng.choice(["", ":", " x", "."]) for _ in range(50)]
    backend = AdversarialBackend(script, cycle=True)
    trace = code_mention("drug", onto, backend, setting=setting, retries_per_level=retries, auto_select=auto)
    assert_no_fabrication(trace, onto)
    assert len(trace.steps) <= 5
    assert trace.backend_calls <= 5 * (retries + 1)
    levels = [s.level for s in trace.steps]
    assert levels == list(range(1, len(levels) + 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.sampled_from(list(GroundingSetting)))
def test_oracle_complete(seed, auto, setting):
    rng = random.Random(seed)
    onto = random_ontology(rng, n_roots=4, max_children=4, leaf_prob=0.2)
    gold = {f"drug {i}": rng.choice(list(onto.entries)) for i in range(5)}
    traces = code_batch(list(gold), onto, OracleBackend(gold), setting=setting, auto_select=auto)
    for t in traces:
        expected = parse_code(gold[t.mention])
        assert t.error is None
        if auto:
            # auto-descent may continue below an inner gold code through single-child nodes
            assert expected.is_prefix_of(t.final)
        else:
            assert t.final == expected
