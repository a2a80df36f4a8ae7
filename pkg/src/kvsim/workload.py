"""Multi-turn session traces: corpus loading, closed-loop arrival synthesis,
advisory injection and agent call-graph traces.

Arrivals are closed-loop. A turn-0 request is timed relative to the moment its
user slot opens; every later turn is timed relative to the simulated completion
(or start) of an earlier turn of the same session. Events therefore carry a
``delta`` and an ``anchor`` rather than an absolute time. ``time`` is the
nominal absolute time the event would have if every request were served
instantly; it only orders the trace and keeps the file readable.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

TRACE_SCHEMA = "kvsim.trace/1"
DEFAULT_READING_WPM = 200.0
DEFAULT_TYPING_WPM = 40.0
DEFAULT_WORDS_PER_TOKEN = 0.75


class WorkloadError(ValueError):
    pass


class CorpusError(WorkloadError):
    pass


class PriorityClass(str, enum.Enum):
    NORMAL = "normal"
    HIGH = "high"


class EventKind(str, enum.Enum):
    ADVISORY = "advisory"
    INFERENCE = "inference"


class Anchor(str, enum.Enum):
    SLOT = "slot"    # user slot opened (session start)
    DONE = "done"    # completion of ``anchor_turn``
    START = "start"  # arrival of ``anchor_turn``'s inference request


@dataclass(frozen=True)
class Turn:
    prompt_tokens: int
    response_tokens: int
    prompt_words: int = 0
    response_words: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 1:
            raise WorkloadError("turn needs prompt_tokens >= 1")
        if self.response_tokens < 1:
            raise WorkloadError("turn needs response_tokens >= 1")
        if self.prompt_words < 0 or self.response_words < 0:
            raise WorkloadError("word counts must be nonnegative")


@dataclass(frozen=True)
class UserProfile:
    reading_speed: float = DEFAULT_READING_WPM  # words/minute
    typing_speed: float = DEFAULT_TYPING_WPM

    def __post_init__(self):
        if not (self.reading_speed > 0 and self.typing_speed > 0):
            raise WorkloadError("reading and typing speeds must be > 0")

    def read_time(self, words: int) -> float:
        return words * 60.0 / self.reading_speed

    def type_time(self, words: int) -> float:
        return words * 60.0 / self.typing_speed


@dataclass(frozen=True)
class SessionScript:
    session_id: str
    model_id: str
    turns: tuple[Turn, ...]
    user_profile: UserProfile = field(default_factory=UserProfile)
    priority_class: PriorityClass = PriorityClass.NORMAL

    def __post_init__(self):
        if not self.turns:
            raise WorkloadError(f"session {self.session_id!r} has no turns")
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "priority_class", PriorityClass(self.priority_class))

    @property
    def total_tokens(self) -> int:
        return sum(t.prompt_tokens + t.response_tokens for t in self.turns)


@dataclass(frozen=True)
class AdvisoryRequest:
    session_id: str
    model_id: str
    expected_arrival: float | None = None
    ordered: bool = False
    priority: int | None = None

    def __post_init__(self):
        if self.expected_arrival is not None and self.expected_arrival < 0:
            raise WorkloadError("expected_arrival must be >= 0")

    def to_wire(self) -> dict[str, Any]:
        return {"session_id": self.session_id, "model_id": self.model_id,
                "expected_arrival": self.expected_arrival, "ordered": self.ordered,
                "priority": self.priority}


@dataclass(frozen=True)
class TimedEvent:
    time: float
    kind: EventKind
    session_id: str
    turn_index: int
    delta: float
    anchor: Anchor
    anchor_turn: int = -1
    advisory: AdvisoryRequest | None = None

    def sort_key(self):
        return (self.time, self.session_id, 0 if self.kind is EventKind.ADVISORY else 1,
                self.turn_index)


@dataclass(frozen=True)
class Trace:
    sessions: tuple[SessionScript, ...]
    events: tuple[TimedEvent, ...]
    concurrency_target: int
    seed: int = 0
    kind: str = "chat"
    params: Mapping[str, Any] = field(default_factory=dict)
    dropped_advisories: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.concurrency_target < 1:
            raise WorkloadError("concurrency_target must be >= 1")
        ids = [s.session_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise WorkloadError("duplicate session_id in trace")

    def session(self, session_id: str) -> SessionScript:
        return self._index()[session_id]

    def _index(self) -> dict[str, SessionScript]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s.session_id: s for s in self.sessions}
            object.__setattr__(self, "_idx", idx)
        return idx

    def inference_events(self) -> list[TimedEvent]:
        return [e for e in self.events if e.kind is EventKind.INFERENCE]

    def advisory_events(self) -> list[TimedEvent]:
        return [e for e in self.events if e.kind is EventKind.ADVISORY]

    @property
    def total_prompt_tokens(self) -> int:
        return sum(t.prompt_tokens for s in self.sessions for t in s.turns)

    def summary(self) -> dict[str, Any]:
        n = len(self.sessions)
        turns = sum(len(s.turns) for s in self.sessions)
        multi = sum(1 for s in self.sessions if len(s.turns) >= 2)
        adv = {(e.session_id, e.turn_index): e for e in self.advisory_events()}
        lead_vals = []
        for e in self.inference_events():
            a = adv.get((e.session_id, e.turn_index))
            if a is not None:
                lead_vals.append(e.time - a.time)
        return {
            "sessions": n,
            "turns": turns,
            "multi_turn_fraction": multi / n if n else 0.0,
            "advisories": len(adv),
            "dropped_advisories": len(self.dropped_advisories),
            "mean_advisory_lead_s": sum(lead_vals) / len(lead_vals) if lead_vals else 0.0,
        }


# ----------------------------------------------------------------- corpus IO

def _round_words(tokens: int, words_per_token: float) -> int:
    return math.floor(tokens * words_per_token + 0.5)


def _parse_record(i: int, rec: Any, words_per_token: float, default_model: str
                  ) -> SessionScript | None:
    if not isinstance(rec, dict):
        raise CorpusError(f"record {i}: expected an object")
    msgs = rec.get("messages")
    if not isinstance(msgs, list) or not msgs:
        raise CorpusError(f"record {i}: missing or empty 'messages'")
    sid = rec.get("session_id", f"s{i:06d}")
    turns: list[Turn] = []
    for j in range(0, len(msgs), 2):
        user = msgs[j]
        reply = msgs[j + 1] if j + 1 < len(msgs) else None
        if not isinstance(user, dict) or user.get("role") != "user":
            raise CorpusError(f"record {i}: message {j} should have role 'user'")
        if reply is None:
            break  # trailing prompt without a reply
        if not isinstance(reply, dict) or reply.get("role") != "assistant":
            raise CorpusError(f"record {i}: message {j + 1} should have role 'assistant'")
        try:
            pt, rt = int(user["tokens"]), int(reply["tokens"])
        except (KeyError, TypeError, ValueError):
            raise CorpusError(f"record {i}: message {j} or {j + 1} lacks an integer 'tokens'")
        if pt < 1 or rt < 1:
            raise CorpusError(f"record {i}: zero-token message at turn {j // 2}")
        pw = int(user["words"]) if "words" in user else _round_words(pt, words_per_token)
        rw = int(reply["words"]) if "words" in reply else _round_words(rt, words_per_token)
        turns.append(Turn(pt, rt, pw, rw))
    if not turns:
        return None
    return SessionScript(
        session_id=str(sid),
        model_id=str(rec.get("model_id", default_model)),
        turns=tuple(turns),
        priority_class=PriorityClass(rec.get("priority_class", "normal")),
    )


def load_chat_corpus(path: str | Path, max_sessions: int,
                     words_per_token: float = DEFAULT_WORDS_PER_TOKEN,
                     default_model: str = "llama-3.1-8b") -> list[SessionScript]:
    """Read a line-delimited conversation corpus into session scripts."""
    if max_sessions < 1:
        raise CorpusError("max_sessions must be >= 1")
    path = Path(path)
    scripts: list[SessionScript] = []
    seen: set[str] = set()
    n_records = 0
    with path.open() as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            n_records += 1
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"record {i}: invalid JSON ({exc.msg})") from None
            script = _parse_record(i, rec, words_per_token, default_model)
            if script is None:
                continue
            if script.session_id in seen:
                raise CorpusError(f"record {i}: duplicate session_id {script.session_id!r}")
            seen.add(script.session_id)
            scripts.append(script)
            if len(scripts) >= max_sessions:
                break
    if n_records == 0:
        raise CorpusError(f"{path}: empty corpus")
    if not scripts:
        raise CorpusError(f"{path}: no usable sessions")
    return scripts


def write_chat_corpus(path: str | Path, scripts: Iterable[SessionScript]) -> None:
    with Path(path).open("w") as fh:
        for s in scripts:
            msgs = []
            for t in s.turns:
                msgs.append({"role": "user", "tokens": t.prompt_tokens, "words": t.prompt_words})
                msgs.append({"role": "assistant", "tokens": t.response_tokens,
                             "words": t.response_words})
            rec = {"session_id": s.session_id, "model_id": s.model_id, "messages": msgs}
            if s.priority_class is not PriorityClass.NORMAL:
                rec["priority_class"] = s.priority_class.value
            fh.write(json.dumps(rec) + "\n")


# ------------------------------------------------------------ trace building

def _nominal_times(sessions: Sequence[SessionScript],
                   events_by_session: Mapping[str, list[TimedEvent]],
                   concurrency: int) -> dict[tuple[str, int, EventKind], float]:
    """Absolute event times under instantaneous service and a fixed user pool."""
    slots = [0.0] * concurrency
    heapq.heapify(slots)
    out: dict[tuple[str, int, EventKind], float] = {}
    for s in sessions:
        start = heapq.heappop(slots)
        arrive: dict[int, float] = {}
        evs = events_by_session[s.session_id]
        # inference events first so advisories can anchor on arrivals
        for e in sorted(evs, key=lambda e: (e.turn_index, e.kind is EventKind.ADVISORY)):
            if e.anchor is Anchor.SLOT:
                base = start
            else:
                base = arrive[e.anchor_turn]  # zero service: done == start
            t = base + e.delta
            if e.kind is EventKind.INFERENCE:
                arrive[e.turn_index] = t
            out[(e.session_id, e.turn_index, e.kind)] = t
        heapq.heappush(slots, max(arrive.values()))
    return out


def _finalize(sessions: Sequence[SessionScript], events: list[TimedEvent], concurrency: int,
              **kw) -> Trace:
    by_session: dict[str, list[TimedEvent]] = {s.session_id: [] for s in sessions}
    for e in events:
        by_session[e.session_id].append(e)
    times = _nominal_times(sessions, by_session, concurrency)
    timed = [replace(e, time=times[(e.session_id, e.turn_index, e.kind)]) for e in events]
    timed.sort(key=TimedEvent.sort_key)
    return Trace(sessions=tuple(sessions), events=tuple(timed),
                 concurrency_target=concurrency, **kw)


def _sample_speed(rng: random.Random, mean: float, sigma_frac: float) -> float:
    if sigma_frac <= 0:
        return mean
    return max(0.1 * mean, rng.gauss(mean, sigma_frac * mean))


def synthesize_arrivals(scripts: Sequence[SessionScript], concurrency_target: int, seed: int,
                        speed_sigma: float = 0.15) -> Trace:
    """Closed-loop arrival deltas from reading and typing times.

    Turn 0 arrives one typing time after the user's slot opens; turn k > 0
    arrives ``read(response k-1) + type(prompt k)`` after turn k-1 completes.
    """
    if not scripts:
        raise WorkloadError("no session scripts")
    if concurrency_target > len(scripts):
        raise WorkloadError(
            f"concurrency_target {concurrency_target} exceeds {len(scripts)} sessions")
    if concurrency_target < 1:
        raise WorkloadError("concurrency_target must be >= 1")
    rng = random.Random(seed)
    sessions: list[SessionScript] = []
    events: list[TimedEvent] = []
    for s in scripts:
        prof = UserProfile(_sample_speed(rng, s.user_profile.reading_speed, speed_sigma),
                           _sample_speed(rng, s.user_profile.typing_speed, speed_sigma))
        s = replace(s, user_profile=prof)
        sessions.append(s)
        for k, turn in enumerate(s.turns):
            type_t = prof.type_time(turn.prompt_words)
            if k == 0:
                events.append(TimedEvent(0.0, EventKind.INFERENCE, s.session_id, 0,
                                         type_t, Anchor.SLOT))
            else:
                read_t = prof.read_time(s.turns[k - 1].response_words)
                events.append(TimedEvent(0.0, EventKind.INFERENCE, s.session_id, k,
                                         read_t + type_t, Anchor.DONE, k - 1))
    params = {"generator": "synthesize_arrivals", "speed_sigma": speed_sigma}
    return _finalize(sessions, events, concurrency_target, seed=seed, kind="chat",
                     params=params)


def _typing_lead(trace: Trace, e: TimedEvent) -> float:
    s = trace.session(e.session_id)
    return s.user_profile.type_time(s.turns[e.turn_index].prompt_words)


def inject_advisories(trace: Trace, miss_fraction: float, seed: int) -> Trace:
    """Add a typing-start advisory ahead of every turn > 0, dropping a random fraction."""
    if not 0.0 <= miss_fraction <= 1.0:
        raise WorkloadError("miss_fraction must lie in [0, 1]")
    rng = random.Random(seed)
    events = [e for e in trace.events if e.kind is EventKind.INFERENCE]
    dropped: list[tuple[str, int]] = []
    added: list[TimedEvent] = []
    for e in events:
        if e.turn_index == 0:
            continue
        if rng.random() < miss_fraction:
            dropped.append((e.session_id, e.turn_index))
            continue
        s = trace.session(e.session_id)
        lead = _typing_lead(trace, e)
        adv = AdvisoryRequest(s.session_id, s.model_id, expected_arrival=None, ordered=False,
                              priority=1 if s.priority_class is PriorityClass.HIGH else None)
        added.append(TimedEvent(0.0, EventKind.ADVISORY, e.session_id, e.turn_index,
                                max(0.0, e.delta - lead), e.anchor, e.anchor_turn, adv))
    params = dict(trace.params, miss_fraction=miss_fraction, advisory_seed=seed)
    return _finalize(trace.sessions, events + added, trace.concurrency_target,
                     seed=trace.seed, kind=trace.kind, params=params,
                     dropped_advisories=tuple(dropped))


# --------------------------------------------------------------- agent traces

def stage_role(stage: str) -> str:
    return stage.partition("#")[0]


def topological_order(call_graph: Mapping[str, Sequence[str]]) -> list[str]:
    nodes = set(call_graph)
    for succs in call_graph.values():
        nodes.update(succs)
    indeg = {n: 0 for n in nodes}
    for succs in call_graph.values():
        for v in succs:
            indeg[v] += 1
    ready = sorted(n for n, d in indeg.items() if d == 0)
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for v in call_graph.get(n, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(order) != len(nodes):
        raise WorkloadError("call graph has a cycle")
    return order


def _lookup(mapping: Mapping[str, Any], stage: str, what: str):
    if stage in mapping:
        return mapping[stage]
    role = stage_role(stage)
    if role in mapping:
        return mapping[role]
    raise WorkloadError(f"stage {stage!r} has no {what}")


def metagpt_call_graph(review_cycles: int = 3) -> dict[str, list[str]]:
    """Architect, engineer, then ``review_cycles`` rounds of QA review and revision."""
    graph: dict[str, list[str]] = {"architect": ["engineer#0"]}
    prev = "engineer#0"
    for c in range(1, review_cycles + 1):
        graph[prev] = [f"qa#{c}"]
        graph[f"qa#{c}"] = [f"engineer#{c}"]
        prev = f"engineer#{c}"
    graph[prev] = []
    return graph


def generate_agent_trace(call_graph: Mapping[str, Sequence[str]],
                         per_stage_tokens: Mapping[str, tuple[int, int]],
                         profile_lower_bounds: Mapping[str, float],
                         n_jobs: int, seed: int,
                         concurrency_target: int | None = None,
                         model_prefix: str = "agent",
                         token_jitter: float = 0.0) -> Trace:
    """One session per job; each stage is one turn, run in topological order.

    When a stage's request arrives, advisories go out for all of its successors
    carrying the stage's profiled lower bound as ``expected_arrival``.
    """
    if n_jobs < 1:
        raise WorkloadError("n_jobs must be >= 1")
    order = topological_order(call_graph)
    pos = {s: i for i, s in enumerate(order)}
    rng = random.Random(seed)
    sessions: list[SessionScript] = []
    events: list[TimedEvent] = []
    for j in range(n_jobs):
        sid = f"job-{j:05d}"
        turns = []
        for stage in order:
            p, r = _lookup(per_stage_tokens, stage, "token counts")
            if token_jitter > 0:
                p = max(1, round(p * rng.uniform(1 - token_jitter, 1 + token_jitter)))
                r = max(1, round(r * rng.uniform(1 - token_jitter, 1 + token_jitter)))
            turns.append(Turn(int(p), int(r)))
        s = SessionScript(sid, f"{model_prefix}-llm", tuple(turns))
        sessions.append(s)
        for k, stage in enumerate(order):
            if k == 0:
                events.append(TimedEvent(0.0, EventKind.INFERENCE, sid, 0, 0.0, Anchor.SLOT))
            else:
                events.append(TimedEvent(0.0, EventKind.INFERENCE, sid, k, 0.0, Anchor.DONE,
                                         k - 1))
            lb = float(_lookup(profile_lower_bounds, stage, "profiled lower bound"))
            for succ in sorted(call_graph.get(stage, ()), key=pos.__getitem__):
                adv = AdvisoryRequest(sid, f"{model_prefix}-{stage_role(succ)}-llm",
                                      expected_arrival=lb, ordered=False, priority=None)
                events.append(TimedEvent(0.0, EventKind.ADVISORY, sid, pos[succ], 0.0,
                                         Anchor.START, k, adv))
    # duplicate advisories for one turn (several predecessors) collapse to the first
    seen: set[tuple[str, int]] = set()
    uniq = []
    for e in events:
        if e.kind is EventKind.ADVISORY:
            key = (e.session_id, e.turn_index)
            if key in seen:
                continue
            seen.add(key)
        uniq.append(e)
    conc = n_jobs if concurrency_target is None else concurrency_target
    params = {"generator": "generate_agent_trace", "stages": order,
              "lower_bounds": {k: float(v) for k, v in sorted(profile_lower_bounds.items())}}
    return _finalize(sessions, uniq, conc, seed=seed, kind="agent", params=params)


# --------------------------------------------------------------- transforms

def assign_priorities(scripts: Sequence[SessionScript], high_fraction: float, seed: int
                      ) -> list[SessionScript]:
    """Mark a seeded random ``high_fraction`` of sessions as high priority."""
    if not 0.0 <= high_fraction <= 1.0:
        raise WorkloadError("high_fraction must lie in [0, 1]")
    n_high = round(high_fraction * len(scripts))
    chosen = set(random.Random(seed).sample(range(len(scripts)), n_high))
    return [replace(s, priority_class=PriorityClass.HIGH if i in chosen else
                    PriorityClass.NORMAL) for i, s in enumerate(scripts)]


def reshape_turns(trace: Trace, prompt_tokens: int, response_tokens: int) -> Trace:
    """Replace every turn's token counts while keeping the arrival deltas."""
    sessions = []
    for s in trace.sessions:
        turns = tuple(replace(t, prompt_tokens=prompt_tokens, response_tokens=response_tokens)
                      for t in s.turns)
        sessions.append(replace(s, turns=turns))
    params = dict(trace.params, reshaped=[prompt_tokens, response_tokens])
    return Trace(tuple(sessions), trace.events, trace.concurrency_target, trace.seed,
                 trace.kind, params, trace.dropped_advisories)


# ---------------------------------------------------------------- trace file

def _profile_dict(p: UserProfile) -> dict[str, float]:
    return {"reading_speed": p.reading_speed, "typing_speed": p.typing_speed}


def trace_records(trace: Trace) -> list[dict[str, Any]]:
    header = {
        "schema": TRACE_SCHEMA,
        "seed": trace.seed,
        "kind": trace.kind,
        "concurrency_target": trace.concurrency_target,
        "params": dict(trace.params),
        "dropped_advisories": [list(d) for d in trace.dropped_advisories],
        "sessions": [
            {"session_id": s.session_id, "model_id": s.model_id,
             "priority_class": s.priority_class.value,
             "user_profile": _profile_dict(s.user_profile),
             "turns": [[t.prompt_tokens, t.response_tokens, t.prompt_words, t.response_words]
                       for t in s.turns]}
            for s in trace.sessions
        ],
    }
    out = [header]
    for e in trace.events:
        turn = trace.session(e.session_id).turns[e.turn_index]
        rec = {
            "time": e.time,
            "time_or_delta": e.delta,
            "anchor": e.anchor.value,
            "anchor_turn": e.anchor_turn,
            "kind": e.kind.value,
            "session_id": e.session_id,
            "turn_index": e.turn_index,
            "prompt_tokens": turn.prompt_tokens,
            "response_tokens": turn.response_tokens,
            "advisory": None,
        }
        if e.advisory is not None:
            a = e.advisory
            rec["advisory"] = {"model_id": a.model_id, "expected_arrival": a.expected_arrival,
                               "ordered": a.ordered, "priority": a.priority}
        out.append(rec)
    return out


def dumps_trace(trace: Trace) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace_records(trace))


def save_trace(trace: Trace, path: str | Path) -> None:
    Path(path).write_text(dumps_trace(trace))


def loads_trace(text: str, source: str = "<trace>") -> Trace:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise WorkloadError(f"{source}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{source}:1: invalid JSON ({exc.msg})") from None
    if header.get("schema") != TRACE_SCHEMA:
        raise WorkloadError(f"{source}:1: unsupported schema {header.get('schema')!r}")
    sessions = []
    for sd in header["sessions"]:
        sessions.append(SessionScript(
            session_id=sd["session_id"], model_id=sd["model_id"],
            turns=tuple(Turn(*t) for t in sd["turns"]),
            user_profile=UserProfile(**sd["user_profile"]),
            priority_class=PriorityClass(sd["priority_class"])))
    events = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            r = json.loads(ln)
            adv = None
            if r["advisory"] is not None:
                a = r["advisory"]
                adv = AdvisoryRequest(r["session_id"], a["model_id"], a["expected_arrival"],
                                      a["ordered"], a["priority"])
            events.append(TimedEvent(r["time"], EventKind(r["kind"]), r["session_id"],
                                     r["turn_index"], r["time_or_delta"], Anchor(r["anchor"]),
                                     r["anchor_turn"], adv))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise WorkloadError(f"{source}:{lineno}: bad event record ({exc})") from None
    return Trace(tuple(sessions), tuple(events), header["concurrency_target"], header["seed"],
                 header.get("kind", "chat"), header.get("params", {}),
                 tuple(tuple(d) for d in header.get("dropped_advisories", [])))


def load_trace(path: str | Path) -> Trace:
    p = Path(path)
    return loads_trace(p.read_text(), str(p))


def trace_hash(trace: Trace) -> str:
    """Hash of the workload itself: sessions and inference timing, not advisories or
    priority labels.

    Runs that differ only in which advisories were delivered, or in which
    sessions are marked high priority, stay comparable.
    """
    recs = trace_records(trace)
    sessions = [{k: v for k, v in sd.items() if k != "priority_class"}
                for sd in recs[0]["sessions"]]
    header = {"schema": TRACE_SCHEMA, "concurrency_target": trace.concurrency_target,
              "sessions": sessions}
    body = [r for r in recs[1:] if r["kind"] == EventKind.INFERENCE.value]
    blob = "".join(json.dumps(r, sort_keys=True) + "\n" for r in [header] + body)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
