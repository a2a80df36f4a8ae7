"""Deterministic event loop and the closed-loop cluster simulation."""

from __future__ import annotations

import heapq
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

from .costmodel import CostModel, GpuProfile, LinkProfile, piecewise_from, seconds_to_ns
from .engine import ActiveRequest, Engine, EngineConfig, Policy, SimulationError
from .kvstore import KVStore, Tier
from .nodemanager import Advisory, Cluster, NodeState
from .scheduler import Scheduler, SchedulerConfig
from .workload import Anchor, EventKind, PriorityClass, TimedEvent, Trace, trace_hash

EVENT_KINDS = ("TraceArrival", "AdvisoryDelivery", "TransferComplete", "EngineStep",
               "WriteComplete", "SessionEnd")


@dataclass(order=True)
class Event:
    time: int
    sequence: int
    kind: str = field(compare=False)
    fn: Callable = field(compare=False, repr=False)
    args: tuple = field(compare=False, repr=False, default=())
    node: int = field(compare=False, default=-1)
    label: Any = field(compare=False, default=None)


class EventLoop:
    """Events fire in (time, sequence) order; equal times keep insertion order."""

    def __init__(self, record: bool = False):
        self.now = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self.processed = 0
        self.record = record
        self.timeline: list[tuple] = []
        self.after_event: Callable[[Event], None] | None = None

    def post(self, time: int, kind: str, fn: Callable, *args, node: int = -1,
             label: Any = None) -> Event:
        if time < self.now:
            raise SimulationError(f"{kind} scheduled at {time} before now={self.now}")
        if kind not in EVENT_KINDS:
            raise SimulationError(f"unknown event kind {kind!r}")
        ev = Event(time, self._seq, kind, fn, args, node, label)
        heapq.heappush(self._heap, (time, self._seq, ev))
        self._seq += 1
        return ev

    def __len__(self) -> int:
        return len(self._heap)

    def pending(self) -> list[Event]:
        return [e for _, _, e in sorted(self._heap)]

    def run(self, until: int | None = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                raise SimulationError(
                    f"simulated time limit {until} ns exceeded; next events: "
                    + ", ".join(f"{e.kind}@{e.time}" for e in self.pending()[:8]))
            ev = heapq.heappop(heap)[2]
            self.now = ev.time
            if self.record:
                self.timeline.append((ev.time, ev.kind, ev.node, ev.label))
            ev.fn(*ev.args)
            self.processed += 1
            if self.after_event is not None:
                self.after_event(ev)


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class ClusterConfig:
    nodes: int = 8
    gpu: GpuProfile = field(default_factory=GpuProfile)
    links: LinkProfile = field(default_factory=LinkProfile)
    host_capacity: int = 256_000_000_000
    disk_capacity: int = 4_000_000_000_000
    block_tokens: int = 16
    decode_points: tuple[tuple[int, float], ...] | None = None
    demand_preempts_prefetch: bool = False   # link arbitration; FIFO when off
    order_by_expected_arrival: bool = True   # waiting promotions: earliest expected first

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("cluster needs at least one node")
        for name in ("host_capacity", "disk_capacity", "block_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def cost_model(self) -> CostModel:
        decode = piecewise_from(self.decode_points) if self.decode_points else None
        return CostModel(self.gpu, self.links, decode)


@dataclass(frozen=True)
class SimConfig:
    max_sim_time_s: float = 1e7
    load_window_s: float = 10.0
    measure_fraction: float = 0.8
    record_timeline: bool = False
    keep_ledgers: bool = True
    check_invariants: bool = False

    def __post_init__(self):
        if self.max_sim_time_s <= 0 or self.load_window_s <= 0:
            raise ValueError("time limits must be > 0")
        if not 0 < self.measure_fraction <= 1:
            raise ValueError("measure_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    sim: SimConfig = field(default_factory=SimConfig)


# ------------------------------------------------------------------ load sampling

class LoadSampler:
    """Time-averaged per-node request count (active + queued) per fixed window."""

    def __init__(self, nodes: int, window_ns: int):
        self.window = window_ns
        self.values = [0] * nodes
        self.last = 0
        self.acc = [0] * nodes
        self.win_start = 0
        self.windows: list[tuple[int, tuple[float, ...]]] = []

    def _advance(self, now: int) -> None:
        while now >= self.win_start + self.window:
            end = self.win_start + self.window
            for i, v in enumerate(self.values):
                self.acc[i] += v * (end - self.last)
            self.windows.append((self.win_start,
                                 tuple(a / self.window for a in self.acc)))
            self.acc = [0] * len(self.values)
            self.last = self.win_start = end
        for i, v in enumerate(self.values):
            self.acc[i] += v * (now - self.last)
        self.last = now

    def set(self, now: int, node: int, value: int) -> None:
        if value != self.values[node]:
            self._advance(now)
            self.values[node] = value

    def finish(self, now: int) -> None:
        self._advance(now)


# ------------------------------------------------------------------ results

@dataclass
class RunResult:
    policy: Policy
    trace_hash: str
    seed: int
    config: RunConfig
    concurrency: int
    requests: list[ActiveRequest]
    makespan_ns: int
    events: int
    load_windows: list[tuple[int, tuple[float, ...]]]
    transfers: list
    routing: list
    traffic: dict[str, int]
    tier_bytes: dict[str, dict[str, int]]
    engine_stats: dict[str, int]
    advisory_leads_ns: list[int]
    anomalies: list[str]
    timeline: list[tuple] = field(default_factory=list)
    lost_caches: int = 0
    saturated_until_ns: int | None = None   # first time a freed slot found no session left


# ------------------------------------------------------------------ simulation

class Simulation:
    def __init__(self, trace: Trace, config: RunConfig, policy: Policy | str, seed: int = 0):
        self.trace = trace
        self.cfg = config
        self.policy = Policy(policy)
        self.seed = seed
        cc = config.cluster
        if self.policy.backing is Tier.HOST and cc.host_capacity < cc.gpu.hbm_capacity:
            # HOST holds a copy of everything pinned on DEVICE; smaller would deadlock
            raise SimulationError("swap needs host_capacity >= the GPU's hbm_capacity")
        self.cost = cc.cost_model()
        self.loop = EventLoop(record=config.sim.record_timeline)
        self.sched = Scheduler(cc.nodes, self.policy, config.scheduler)
        self.sched.keep_ledger = config.sim.keep_ledgers
        self._token_metric = config.scheduler.load_metric == "tokens"
        nodes = []
        for i in range(cc.nodes):
            host = cc.host_capacity if self.policy is not Policy.RETAIN else 1
            store = KVStore(i, self.cost, cc.gpu.hbm_capacity, host, cc.disk_capacity,
                            cc.block_tokens, backing=self.policy.backing, post=self._post)
            store.keep_ledger = config.sim.keep_ledgers
            store.demand_preempts = cc.demand_preempts_prefetch
            eng = Engine(i, config.engine, self.policy, store, self.cost, self._post)
            eng.on_finish = self._on_finish
            eng.on_load_change = self._on_load_change
            store.on_memory_freed = self._on_memory_freed
            store.on_released = self._on_released
            nodes.append(NodeState(i, store, eng))
        self.nodes = nodes
        self.cluster = Cluster(nodes, self.policy, self.sched.table.owner, lambda: self.loop.now)
        self.cluster.order_by_expected = cc.order_by_expected_arrival
        self.sampler = LoadSampler(cc.nodes, seconds_to_ns(config.sim.load_window_s))
        self.requests: list[ActiveRequest] = []
        self._seq = 0
        self._next_session = 0
        self._pool_dry_ns: int | None = None
        self._active_sessions = 0
        self._max_active = 0
        self._history: dict[str, int] = {}
        self._turns_done: dict[str, int] = {}
        self._anchored: dict[str, dict[tuple[Anchor, int], list[TimedEvent]]] = {}
        for e in trace.events:
            self._anchored.setdefault(e.session_id, {}).setdefault(
                (e.anchor, e.anchor_turn if e.anchor is not Anchor.SLOT else -1), []).append(e)
        self._advisory_time: dict[tuple[str, int], int] = {}
        self.advisory_leads: list[int] = []
        self._live_sessions: set[str] = set()
        if config.sim.check_invariants:
            self.loop.after_event = self._check

    # ------------------------------------------------------------ plumbing
    def _post(self, time, kind, fn, *args, node=-1, label=None):
        if kind == "EngineStep":
            return self.loop.post(time, kind, self._call_with_now(fn), *args, node=node,
                                  label=label)
        return self.loop.post(time, kind, fn, *args, node=node, label=label)

    def _call_with_now(self, fn):
        def call(*args):
            fn(*args, self.loop.now)
        return call

    def _on_load_change(self, node: int, now: int) -> None:
        e = self.nodes[node].engine
        v = self.sched.view
        v.active[node] = e.active
        v.queued[node] = e.queued
        if self._token_metric:
            v.tokens[node] = sum(r.context_tokens for r in e.running) + sum(
                r.context_tokens for r in e.waiting)
        self.sched.record_view(now)
        self.sampler.set(now, node, e.active + e.queued)

    def _on_memory_freed(self, node: int) -> None:
        self.nodes[node].engine.kick(self.loop.now)
        self.cluster.retry_promotions(node, self.loop.now)

    def _on_released(self, session_id: str, node: int) -> None:
        pass

    # ------------------------------------------------------------ closed loop
    def _open_slot(self, now: int) -> None:
        sessions = self.trace.sessions
        if self._next_session >= len(sessions):
            if self._pool_dry_ns is None:
                self._pool_dry_ns = now
            return
        s = sessions[self._next_session]
        self._next_session += 1
        self._active_sessions += 1
        self._max_active = max(self._max_active, self._active_sessions)
        self._live_sessions.add(s.session_id)
        self._history[s.session_id] = 0
        self._turns_done[s.session_id] = 0
        self._fire_anchor(s.session_id, Anchor.SLOT, -1, now)

    def _fire_anchor(self, sid: str, anchor: Anchor, turn: int, now: int) -> None:
        for e in self._anchored.get(sid, {}).get((anchor, turn), ()):
            t = now + seconds_to_ns(e.delta)
            if e.kind is EventKind.INFERENCE:
                self.loop.post(t, "TraceArrival", self._arrive, e,
                               label=("arrival", sid, e.turn_index))
            else:
                self.loop.post(t, "AdvisoryDelivery", self._advise, e,
                               label=("advisory", sid, e.turn_index))

    def _high(self, sid: str) -> bool:
        return self.trace.session(sid).priority_class is PriorityClass.HIGH

    def _advise(self, e: TimedEvent) -> None:
        now = self.loop.now
        high = self._high(e.session_id) or (e.advisory is not None and
                                             e.advisory.priority is not None)
        node, owner = self.sched.route_advisory(e.session_id, e.turn_index, now, high)
        a = e.advisory
        adv = Advisory(e.session_id, e.turn_index, a.model_id if a else "",
                       a.expected_arrival if a else None, a.ordered if a else False,
                       a.priority if a else None, owner)
        self._advisory_time.setdefault((e.session_id, e.turn_index), now)
        self.cluster.on_advisory(node, adv, now, full_depth=high)

    def _arrive(self, e: TimedEvent) -> None:
        now = self.loop.now
        sid = e.session_id
        s = self.trace.session(sid)
        turn = s.turns[e.turn_index]
        high = self._high(sid)
        node, reason = self.sched.route_inference(sid, e.turn_index, now, high)
        if self.policy is Policy.SYMPHONY and (sid, e.turn_index) in self._advisory_time:
            if reason != "planned":
                raise SimulationError(f"plan-follow violated for {sid}/{e.turn_index}")
            self.advisory_leads.append(now - self._advisory_time[(sid, e.turn_index)])
        r = ActiveRequest(sid, e.turn_index, turn.prompt_tokens, turn.response_tokens,
                          self._history[sid], now, self._seq, high_priority=high)
        self._seq += 1
        self.requests.append(r)
        self.cluster.on_inference(node, r, now)
        self._fire_anchor(sid, Anchor.START, e.turn_index, now)

    def _on_finish(self, r: ActiveRequest, now: int) -> None:
        sid = r.session_id
        s = self.trace.session(sid)
        self._history[sid] += r.prompt_tokens + r.target_tokens
        self._turns_done[sid] += 1
        self.cluster.after_request(sid, r.node, now)
        self._fire_anchor(sid, Anchor.DONE, r.turn_index, now)
        if self._turns_done[sid] == len(s.turns):
            self._end_session(sid, now)

    def _end_session(self, sid: str, now: int) -> None:
        self._active_sessions -= 1
        self._live_sessions.discard(sid)
        owner = self.sched.table.owner.get(sid)
        self.cluster.release(sid)
        for n in self.nodes:
            if n.store.cache(sid) is not None:
                if n.node_id == owner or owner is None:
                    n.store.end_session(sid)
        self._open_slot(now)

    # ------------------------------------------------------------ invariants
    def _check(self, ev: Event) -> None:
        for n in self.nodes:
            n.store.check()
        self.sched.view.check()
        self.cluster.check_single_owner()
        if self._active_sessions > self.trace.concurrency_target:
            raise SimulationError("closed loop exceeded concurrency target")

    # ------------------------------------------------------------ run
    def run(self) -> RunResult:
        for _ in range(min(self.trace.concurrency_target, len(self.trace.sessions))):
            self._open_slot(0)
        self.loop.run(until=seconds_to_ns(self.cfg.sim.max_sim_time_s))
        unfinished = [r for r in self.requests if r.finish_ns < 0]
        if unfinished or self._next_session < len(self.trace.sessions) or self._live_sessions:
            stuck = ", ".join(f"{r.session_id}/{r.turn_index}@node{r.node}:{r.phase.value}"
                              for r in unfinished[:8])
            raise SimulationError(
                f"no progress: event queue drained with {len(unfinished)} unfinished requests "
                f"and {len(self._live_sessions)} live sessions [{stuck}]")
        makespan = max((r.finish_ns for r in self.requests), default=0)
        self.sampler.finish(makespan)
        traffic: dict[str, int] = {}
        tier_bytes: dict[str, dict[str, int]] = {}
        transfers = []
        stats: dict[str, int] = {}
        lost = 0
        for n in self.nodes:
            st = n.store
            for k, v in st.traffic.items():
                traffic[k] = traffic.get(k, 0) + v
            for t in Tier:
                d = tier_bytes.setdefault(t.name, {"in": 0, "out": 0})
                d["in"] += st.tier_in[t]
                d["out"] += st.tier_out[t]
            transfers.extend(st.ledger)
            lost += len(st.lost_sessions)
            for k, v in n.engine.stats.items():
                stats[k] = stats.get(k, 0) + v
        transfers.sort(key=lambda r: (r.time, r.node, r.session_id, r.layer_lo))
        return RunResult(
            policy=self.policy, trace_hash=trace_hash(self.trace), seed=self.seed,
            config=self.cfg, concurrency=self.trace.concurrency_target,
            requests=self.requests, makespan_ns=makespan, events=self.loop.processed,
            load_windows=self.sampler.windows, transfers=transfers,
            routing=self.sched.ledger, traffic=traffic, tier_bytes=tier_bytes,
            engine_stats=stats, advisory_leads_ns=self.advisory_leads,
            anomalies=self.cluster.anomalies, timeline=self.loop.timeline, lost_caches=lost,
            saturated_until_ns=self._pool_dry_ns)


def run(trace: Trace, config: RunConfig | None = None, policy: Policy | str = Policy.SYMPHONY,
        seed: int = 0) -> RunResult:
    """Simulate ``trace`` on the configured cluster under one policy."""
    return Simulation(trace, config or RunConfig(), policy, seed).run()
