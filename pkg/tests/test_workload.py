import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES, turns
from kvsim.fixtures import chat_trace, heavy_tailed, micro_trace, sharegpt_like
from kvsim.workload import (Anchor, CorpusError, EventKind, PriorityClass, SessionScript,
                            UserProfile, WorkloadError, assign_priorities, dumps_trace,
                            generate_agent_trace, inject_advisories, load_chat_corpus,
                            loads_trace, metagpt_call_graph, reshape_turns,
                            synthesize_arrivals, topological_order, trace_hash,
                            write_chat_corpus)


@st.composite
def traces(draw):
    n = draw(st.integers(1, 5))
    scripts = [SessionScript(f"s{i}", draw(st.sampled_from(["m", "chat-llm"])),
                             tuple(draw(st.lists(turns, min_size=1, max_size=4))),
                             UserProfile(draw(st.floats(10, 5000)), draw(st.floats(10, 5000))))
               for i in range(n)]
    return chat_trace(scripts, draw(st.integers(1, n)), draw(st.integers(0, 2**16)),
                      miss_fraction=draw(st.sampled_from([0.0, 0.3, 1.0])),
                      high_fraction=draw(st.sampled_from([0.0, 0.5])))


@settings(max_examples=PROPERTY_CASES)
@given(traces())
def test_trace_text_round_trips(t):
    text = dumps_trace(t)
    back = loads_trace(text)
    assert back == t
    assert dumps_trace(back) == text
    assert trace_hash(back) == trace_hash(t)


@settings(max_examples=PROPERTY_CASES)
@given(traces())
def test_every_later_turn_has_an_advisory_or_a_recorded_drop(t):
    adv = {(e.session_id, e.turn_index) for e in t.advisory_events()}
    dropped = set(t.dropped_advisories)
    later = {(e.session_id, e.turn_index) for e in t.inference_events() if e.turn_index > 0}
    assert adv | dropped == later
    assert not adv & dropped
    times = {(e.session_id, e.turn_index, e.kind): e.time for e in t.events}
    for sid, k in adv:
        # typing starts no later than the request it announces
        assert times[(sid, k, EventKind.ADVISORY)] <= times[(sid, k, EventKind.INFERENCE)]
    assert [e.sort_key() for e in t.events] == sorted(e.sort_key() for e in t.events)


def test_closed_loop_anchors():
    t = micro_trace()
    inf = {(e.session_id, e.turn_index): e for e in t.inference_events()}
    assert inf[("a", 0)].anchor is Anchor.SLOT and inf[("a", 0)].delta == 1.0
    # read 2 words, type 1 word at one word per second
    assert inf[("a", 1)].anchor is Anchor.DONE and inf[("a", 1)].delta == 3.0
    adv = {(e.session_id, e.turn_index): e for e in t.advisory_events()}
    assert adv[("a", 1)].delta == 2.0
    assert adv[("c", 1)].delta == 1.0


def test_user_pool_limits_concurrency():
    scripts = sharegpt_like(6, 1)
    t = synthesize_arrivals(scripts, 2, 0, speed_sigma=0.0)
    starts = sorted(e.time for e in t.inference_events() if e.turn_index == 0)
    # two slots: the third session cannot start before the first two have both begun
    assert starts[2] >= starts[0]
    with pytest.raises(WorkloadError):
        synthesize_arrivals(scripts, 7, 0)
    with pytest.raises(WorkloadError):
        synthesize_arrivals([], 1, 0)


def test_miss_fraction_extremes():
    base = synthesize_arrivals(sharegpt_like(50, 2), 10, 0)
    later = sum(1 for e in base.inference_events() if e.turn_index > 0)
    assert len(inject_advisories(base, 0.0, 1).advisory_events()) == later
    none = inject_advisories(base, 1.0, 1)
    assert not none.advisory_events() and len(none.dropped_advisories) == later
    some = inject_advisories(base, 0.1, 1)
    assert 0 < len(some.dropped_advisories) < later
    with pytest.raises(WorkloadError):
        inject_advisories(base, 1.5, 0)


def test_trace_hash_ignores_advisories_and_priorities():
    scripts = sharegpt_like(40, 3)
    a = chat_trace(scripts, 8, 0)
    b = chat_trace(scripts, 8, 0, miss_fraction=0.5, high_fraction=0.3)
    assert dumps_trace(a) != dumps_trace(b)
    assert trace_hash(a) == trace_hash(b)
    assert trace_hash(a) != trace_hash(chat_trace(scripts, 9, 0))
    assert trace_hash(a) != trace_hash(reshape_turns(a, 1024, 1))


def test_priorities_are_seeded():
    s = sharegpt_like(20, 0)
    a = assign_priorities(s, 0.3, 5)
    assert a == assign_priorities(s, 0.3, 5)
    assert sum(x.priority_class is PriorityClass.HIGH for x in a) == 6
    with pytest.raises(WorkloadError):
        assign_priorities(s, -0.1, 0)


def test_reshape_keeps_timing():
    t = chat_trace(sharegpt_like(10, 0), 4, 0)
    r = reshape_turns(t, 1024, 1)
    assert r.events == t.events
    assert all(x.prompt_tokens == 1024 and x.response_tokens == 1
               for s in r.sessions for x in s.turns)
    assert r.params["reshaped"] == [1024, 1]


def test_heavy_tail_is_heavier():
    def mean_turns(ss):
        return sum(len(s.turns) for s in ss) / len(ss)
    assert mean_turns(heavy_tailed(500)) > mean_turns(sharegpt_like(500))


# ---------------------------------------------------------------- corpus

def _write(tmp_path, lines):
    p = tmp_path / "c.jsonl"
    p.write_text("".join(ln + "\n" for ln in lines))
    return p


def _conv(sid, *pairs):
    msgs = []
    for p, r in pairs:
        msgs += [{"role": "user", "tokens": p}, {"role": "assistant", "tokens": r}]
    return json.dumps({"session_id": sid, "messages": msgs})


def test_corpus_round_trip(tmp_path):
    scripts = sharegpt_like(15, 4)
    p = tmp_path / "c.jsonl"
    write_chat_corpus(p, scripts)
    back = load_chat_corpus(p, 100)
    assert [(s.session_id, s.turns) for s in back] == [(s.session_id, s.turns) for s in scripts]
    assert len(load_chat_corpus(p, 3)) == 3


def test_corpus_words_default_from_tokens(tmp_path):
    p = _write(tmp_path, [_conv("x", (4, 2))])
    (s,) = load_chat_corpus(p, 1)
    assert (s.turns[0].prompt_words, s.turns[0].response_words) == (3, 2)  # 0.75 per token


def test_corpus_trailing_prompt_dropped(tmp_path):
    rec = json.loads(_conv("x", (4, 2)))
    rec["messages"].append({"role": "user", "tokens": 9})
    (s,) = load_chat_corpus(_write(tmp_path, [json.dumps(rec)]), 5)
    assert len(s.turns) == 1


@pytest.mark.parametrize("lines, msg", [
    ([], "empty corpus"),
    (["{not json"], "invalid JSON"),
    (["[1, 2]"], "expected an object"),
    ([json.dumps({"messages": []})], "missing or empty"),
    ([json.dumps({"messages": [{"role": "assistant", "tokens": 3}]})], "role 'user'"),
    ([_conv("x", (0, 2))], "zero-token"),
    ([json.dumps({"messages": [{"role": "user"}, {"role": "assistant", "tokens": 1}]})],
     "integer 'tokens'"),
    ([_conv("x", (1, 2)), _conv("x", (3, 4))], "duplicate session_id"),
    ([json.dumps({"messages": [{"role": "user", "tokens": 5}]})], "no usable sessions"),
])
def test_corpus_errors(tmp_path, lines, msg):
    with pytest.raises(CorpusError, match=msg):
        load_chat_corpus(_write(tmp_path, lines), 10)


def test_bad_trace_files():
    with pytest.raises(WorkloadError, match="empty"):
        loads_trace("")
    with pytest.raises(WorkloadError, match="schema"):
        loads_trace(json.dumps({"schema": "other"}))
    text = dumps_trace(micro_trace()).splitlines()
    text[2] = json.dumps({"kind": "inference"})
    with pytest.raises(WorkloadError, match=":3:"):
        loads_trace("\n".join(text))


# ---------------------------------------------------------------- agents

def test_topological_order_and_cycles():
    g = metagpt_call_graph(2)
    assert topological_order(g) == ["architect", "engineer#0", "qa#1", "engineer#1", "qa#2",
                                     "engineer#2"]
    assert topological_order({"b": ["c"], "a": ["c"]}) == ["a", "b", "c"]
    with pytest.raises(WorkloadError, match="cycle"):
        topological_order({"a": ["b"], "b": ["a"]})


def test_agent_trace_advises_successors():
    g = metagpt_call_graph(1)
    toks = {"architect": (500, 300), "engineer": (800, 600), "qa": (400, 100)}
    lbs = {"architect": 4.0, "engineer": 9.0, "qa": 2.5}
    t = generate_agent_trace(g, toks, lbs, n_jobs=3, seed=0)
    assert len(t.sessions) == 3 and t.kind == "agent"
    for s in t.sessions:
        assert [x.prompt_tokens for x in s.turns] == [500, 800, 400, 800]
    advs = [e for e in t.advisory_events() if e.session_id == "job-00000"]
    assert [(e.turn_index, e.anchor_turn, e.advisory.expected_arrival) for e in advs] == [
        (1, 0, 4.0), (2, 1, 9.0), (3, 2, 2.5)]
    assert advs[1].advisory.model_id == "agent-qa-llm"
    assert all(e.anchor is Anchor.START for e in advs)
    with pytest.raises(WorkloadError, match="token counts"):
        generate_agent_trace(g, {"architect": (1, 1)}, lbs, 1, 0)
