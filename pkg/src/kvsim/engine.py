"""Continuous-batching engine for one simulated GPU node.

A quantum is either one prefill or one decode step over the running batch.
In the default ``interleave`` mode at most one prefill runs between two decode
steps; ``decode_priority`` lets ``decode_steps_per_prefill`` decode steps run
before each prefill while a batch exists.

Prefill of a turn with a cached history overlaps the layerwise cache load with
compute through ``KVStore.plan_layerwise_load``; the quantum lasts until the
plan finishes, so load stalls land on every request in the batch.
"""

from __future__ import annotations

import bisect
import enum
from collections.abc import Callable
from dataclasses import dataclass, field

from .costmodel import CostModel
from .kvstore import KVStore, LoadPlan, Reason, Tier, split_evenly


class SimulationError(RuntimeError):
    pass


class Policy(str, enum.Enum):
    RECOMPUTE = "recompute"
    RETAIN = "retain"
    SWAP = "swap"
    SYMPHONY = "symphony"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.lower() == "sticky":
            return cls.SWAP
        if isinstance(value, str):
            for m in cls:
                if m.value == value.lower():
                    return m
        return None

    @property
    def keeps_cache(self) -> bool:
        return self is not Policy.RECOMPUTE

    @property
    def backing(self) -> Tier | None:
        return {Policy.SYMPHONY: Tier.DISK, Policy.SWAP: Tier.HOST}.get(self)


class Phase(str, enum.Enum):
    WAITING = "waiting_prefill"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    FINISHED = "finished"


@dataclass(eq=False)
class ActiveRequest:
    session_id: str
    turn_index: int
    prompt_tokens: int
    target_tokens: int
    history_tokens: int
    arrival_ns: int
    seq: int
    high_priority: bool = False
    node: int = -1
    phase: Phase = Phase.WAITING
    generated_tokens: int = 0
    prefill_tokens: int = 0
    redundant_tokens: int = 0
    recovery_tokens: int = 0     # recomputed after a preemption lost the cache
    admit_ns: int = -1
    first_token_ns: int = -1
    finish_ns: int = -1
    steps: int = 0               # prefill quantum plus decode steps that produced a token
    load_stall_ns: int = 0
    prefill_wall_ns: int = 0
    preemptions: int = 0
    blocked: bool = False        # waiting for a cache fetch to land
    paused_steps: int = 0

    @property
    def context_tokens(self) -> int:
        return self.history_tokens + self.prompt_tokens + self.generated_tokens


@dataclass(frozen=True)
class EngineConfig:
    max_batch: int = 64
    prefill_mode: str = "interleave"      # or "decode_priority"
    decode_steps_per_prefill: int = 4
    latency_budget_ms: float | None = None
    admit_during_fetch: bool = True
    priority_queue: bool = True

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.prefill_mode not in ("interleave", "decode_priority"):
            raise ValueError(f"unknown prefill_mode {self.prefill_mode!r}")
        if self.decode_steps_per_prefill < 1:
            raise ValueError("decode_steps_per_prefill must be >= 1")
        if self.latency_budget_ms is not None and self.latency_budget_ms <= 0:
            raise ValueError("latency_budget_ms must be > 0")


class Engine:
    def __init__(self, node_id: int, cfg: EngineConfig, policy: Policy, store: KVStore,
                 cost: CostModel, post: Callable[..., None]):
        self.node_id = node_id
        self.cfg = cfg
        self.policy = policy
        self.store = store
        self.cost = cost
        self._post = post
        self.waiting: list[ActiveRequest] = []
        self._wkeys: list[tuple] = []
        self.running: list[ActiveRequest] = []
        self.prefilling: ActiveRequest | None = None
        self.busy = False
        self.last_was_prefill = False
        self.decodes_since_prefill = 0
        self.admissions_paused = False
        self._settling = False
        self.on_finish: Callable[[ActiveRequest, int], None] = lambda r, t: None
        self.on_load_change: Callable[[int, int], None] = lambda node, t: None
        self.on_prefill_start: Callable[[ActiveRequest, int], None] = lambda r, t: None
        self.stats = {"prefill_quanta": 0, "decode_steps": 0, "preemptions": 0,
                      "stall_ns": 0, "busy_ns": 0, "pauses": 0}
        budget = cfg.latency_budget_ms
        self._budget_ns = None if budget is None else round(budget * 1_000_000)

    # ------------------------------------------------------------ queue
    @property
    def active(self) -> int:
        return len(self.running) + (1 if self.prefilling is not None else 0)

    @property
    def queued(self) -> int:
        return len(self.waiting)

    def _key(self, r: ActiveRequest) -> tuple:
        if self.cfg.priority_queue:
            return (0 if r.high_priority else 1, r.seq)
        return (r.seq,)

    def _enqueue(self, r: ActiveRequest) -> None:
        k = self._key(r)
        i = bisect.bisect(self._wkeys, k)
        self._wkeys.insert(i, k)
        self.waiting.insert(i, r)

    def _dequeue(self, i: int) -> ActiveRequest:
        del self._wkeys[i]
        return self.waiting.pop(i)

    def submit(self, r: ActiveRequest, now: int) -> None:
        r.node = self.node_id
        r.phase = Phase.WAITING
        self._enqueue(r)
        self.on_load_change(self.node_id, now)
        self.kick(now)

    def unblock(self, session_id: str, now: int) -> None:
        for r in self.waiting:
            if r.session_id == session_id:
                r.blocked = False
        self.kick(now)

    def kick(self, now: int) -> None:
        # completions can free memory synchronously; let the running handler finish first
        if not self.busy and not self._settling:
            self._start_quantum(now)

    # ------------------------------------------------------------ quanta
    def _start_quantum(self, now: int) -> None:
        if self.busy:
            return
        if self._try_prefill(now):
            return
        if self.running:
            self._decode_step(now)

    def _prefill_allowed(self) -> bool:
        if not self.waiting or len(self.running) >= self.cfg.max_batch:
            return False
        if not self.running:
            return True
        if self.cfg.prefill_mode == "interleave":
            return not self.last_was_prefill
        return self.decodes_since_prefill >= self.cfg.decode_steps_per_prefill

    def _candidate(self) -> int | None:
        for i, r in enumerate(self.waiting):
            if not r.blocked or self.cfg.admit_during_fetch:
                return i
        return None

    def _plan_tokens(self, r: ActiveRequest) -> tuple[int, bool]:
        """(tokens to compute, uses cached history)."""
        st = self.store
        resumed = r.generated_tokens > 0
        if self.policy.keeps_cache and st.has_data(r.session_id):
            # resumed requests already hold their prompt and generated tokens
            return (0 if resumed else r.prompt_tokens), True
        if resumed:
            return r.context_tokens, False
        return r.history_tokens + r.prompt_tokens, False

    def _growth_reserve(self) -> int:
        return len(self.running) * self.store.num_layers * self.store.block_bytes

    def _try_prefill(self, now: int) -> bool:
        if not self._prefill_allowed():
            return False
        i = self._candidate()
        if i is None:
            return False
        r = self.waiting[i]
        st = self.store
        tokens, cached = self._plan_tokens(r)
        if cached:
            need = st.missing_device_bytes(r.session_id)
            if tokens or r.generated_tokens == 0:
                need += st.new_block_bytes(r.session_id, tokens + 1)
        else:
            # stale or partial copies are useless once we recompute
            cur = st.cache(r.session_id)
            if cur is not None and cur.nblocks:
                st.reset_cache(r.session_id)
            need = st.new_block_bytes(r.session_id, tokens + (0 if r.generated_tokens else 1))
        dev = st.budgets[Tier.DEVICE]
        want = need + self._growth_reserve()
        if dev.free < want:
            self.make_room(want - dev.free, now, exclude=(r.session_id,))
        if dev.free < want:
            if need > dev.capacity:
                raise SimulationError(
                    f"node {self.node_id}: request {r.session_id}/{r.turn_index} needs "
                    f"{need} bytes, DEVICE capacity is {dev.capacity}")
            if not self.running:
                # nothing to wait for except pending writes; retry when memory frees
                if dev.free < need:
                    self.admissions_paused = True
                    return False
            else:
                self.admissions_paused = True
                self.stats["pauses"] += 1
                return False
        self.admissions_paused = False
        self._dequeue(i)
        self._run_prefill(r, tokens, cached, now)
        return True

    def _run_prefill(self, r: ActiveRequest, tokens: int, cached: bool, now: int) -> None:
        st = self.store
        L = st.num_layers
        resumed = r.generated_tokens > 0
        if not resumed:
            r.admit_ns = now
            r.prefill_tokens = tokens
            r.redundant_tokens = 0 if cached else r.history_tokens
        elif not cached:
            r.recovery_tokens += tokens
        compute = self.cost.prefill_ns(tokens) if tokens else 0
        plan: LoadPlan | None = None
        sc = st.cache(r.session_id)
        if cached and sc is not None and sc.nblocks:
            plan = st.plan_layerwise_load(r.session_id, split_evenly(compute, L), now,
                                          Reason.DEMAND)
            end = plan.finish
            r.load_stall_ns += plan.total_stall
            self.stats["stall_ns"] += plan.total_stall
        else:
            end = now + compute
        st.ensure(r.session_id).high_priority = r.high_priority
        st.advised.discard(r.session_id)
        new = tokens + (0 if resumed else 1)
        if new:
            st.grow(r.session_id, new, end)
        else:
            st.pin(r.session_id)
        r.phase = Phase.PREFILLING
        r.prefill_wall_ns += end - now
        self.prefilling = r
        self.busy = True
        self.stats["prefill_quanta"] += 1
        self.stats["busy_ns"] += end - now
        self.on_prefill_start(r, now)
        self._post(end, "EngineStep", self._prefill_done, r, node=self.node_id,
                   label=("prefill", r.session_id, r.turn_index))

    def _prefill_done(self, r: ActiveRequest, now: int) -> None:
        self._settling = True
        self.prefilling = None
        self.busy = False
        self.last_was_prefill = True
        self.decodes_since_prefill = 0
        if r.generated_tokens == 0:
            r.first_token_ns = now
            r.generated_tokens = 1
            r.steps = 1
        if r.generated_tokens >= r.target_tokens:
            self._finish(r, now)
        else:
            r.phase = Phase.DECODING
            self.running.append(r)
        self.on_load_change(self.node_id, now)
        self._settling = False
        self._start_quantum(now)

    def _select_batch(self) -> list[ActiveRequest]:
        batch = list(self.running)
        if self._budget_ns is None or not any(r.high_priority for r in batch):
            return batch
        normals = sorted((r for r in batch if not r.high_priority), key=lambda r: r.seq)
        keep = set(map(id, batch))
        while normals and self.cost.decode_step_ns(len(keep)) > self._budget_ns:
            keep.discard(id(normals.pop()))
        out = [r for r in batch if id(r) in keep]
        for r in batch:
            if id(r) not in keep:
                r.paused_steps += 1
        return out

    def _decode_step(self, now: int) -> None:
        st = self.store
        batch = self._select_batch()
        need = self._growth_bytes(batch)
        dev = st.budgets[Tier.DEVICE]
        if need > dev.free:
            self.make_room(need - dev.free, now, exclude=())
        while need > dev.free:
            if self._writes_pending():
                # unpinned blocks are waiting on their backing write; resume when it lands
                self.stats["pauses"] += 1
                return
            victim = self._preempt_victim(batch)
            if victim is None:
                raise SimulationError(
                    f"node {self.node_id}: DEVICE too small for the running batch "
                    f"({dev.used}/{dev.capacity} bytes used, {need} more needed)")
            self._preempt(victim, now)
            # a paused request is not in this step's batch but still frees its blocks
            batch = [r for r in batch if r is not victim]
            need = self._growth_bytes(batch)
            if need > dev.free:
                self.make_room(need - dev.free, now, exclude=())
        if not batch:
            self.on_load_change(self.node_id, now)
            self._start_quantum(now)
            return
        d = self.cost.decode_step_ns(len(batch))
        end = now + d
        for r in batch:
            st.grow(r.session_id, 1, end)
        self.busy = True
        self.last_was_prefill = False
        self.decodes_since_prefill += 1
        self.stats["decode_steps"] += 1
        self.stats["busy_ns"] += d
        self._post(end, "EngineStep", self._decode_done, batch, node=self.node_id,
                   label=("decode", len(batch)))

    def _decode_done(self, batch: list[ActiveRequest], now: int) -> None:
        self._settling = True
        self.busy = False
        for r in batch:
            r.generated_tokens += 1
            r.steps += 1
            if r.generated_tokens >= r.target_tokens:
                self.running.remove(r)
                self._finish(r, now)
        self.on_load_change(self.node_id, now)
        self._settling = False
        self._start_quantum(now)

    # ------------------------------------------------------------ memory
    def make_room(self, nbytes: int, now: int, exclude=()) -> int:
        """Purge unpinned blocks, then drop whole idle sessions (lowest priority first)."""
        st = self.store
        freed = st.purge_from_device(nbytes, now, exclude=exclude).freed
        if freed >= nbytes:
            return freed
        excl = set(exclude)
        for sid in st.prefetch_victims():
            if sid in excl:
                continue
            freed += st.cancel_prefetch(sid)
            if freed < nbytes:
                freed += st.evict_session(sid, now)
            if freed >= nbytes:
                break
        return freed

    def _growth_bytes(self, batch: list[ActiveRequest]) -> int:
        st = self.store
        bt = st.block_tokens
        crossing = 0
        for r in batch:
            sc = st.sessions[r.session_id]
            if sc.tokens % bt == 0:
                crossing += 1
        return crossing * st.num_layers * st.block_bytes

    def _writes_pending(self) -> bool:
        return any(not sc.pinned and sc.writes_in_flight and sc.res[Tier.DEVICE][0]
                   for sc in self.store.sessions.values())

    def _preempt_victim(self, batch: list[ActiveRequest]) -> ActiveRequest | None:
        if len(self.running) <= 1:
            return None
        pool = [r for r in self.running if not r.high_priority] or list(self.running)
        return max(pool, key=lambda r: r.seq)

    def _preempt(self, r: ActiveRequest, now: int) -> None:
        """Youngest request gives its DEVICE blocks back and re-queues."""
        st = self.store
        self.running.remove(r)
        r.preemptions += 1
        self.stats["preemptions"] += 1
        st.unpin(r.session_id, now)
        if self.policy.backing is None:
            st.drop_session(r.session_id)
        else:
            st.evict_session(r.session_id, now)
        self._enqueue(r)
        r.phase = Phase.WAITING

    def _finish(self, r: ActiveRequest, now: int) -> None:
        r.finish_ns = now
        r.phase = Phase.FINISHED
        st = self.store
        if self.policy.keeps_cache:
            st.unpin(r.session_id, now)
        else:
            st.drop_session(r.session_id)
        self.on_finish(r, now)
