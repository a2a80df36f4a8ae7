"""Per-node three-tier K,V block store.

Blocks are keyed by ``(session, layer, block_index)``. Within one session and
layer the blocks resident in a tier always form a prefix ``[0, n)``: appends
extend the tail, evictions remove from the tail (``block_index`` descending)
and promotions fill whole layers. The store therefore keeps one prefix count
per ``(session, layer, tier)`` instead of one object per block; ``BlockMeta``
views are materialised on demand for ``evict_order`` and for tests.

Nothing is stored, only accounted. Transfers reserve FIFO link time on the
node's links and land through events posted back to the simulator loop.
"""

from __future__ import annotations

import enum
import itertools
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from .costmodel import CostModel, Link


class StoreError(RuntimeError):
    pass


class CapacityError(StoreError):
    """A tier would exceed its capacity. Always a simulator bug, never swallowed."""


class Tier(enum.IntEnum):
    DEVICE = 0
    HOST = 1
    DISK = 2


class Reason(str, enum.Enum):
    PREFETCH = "prefetch"
    DEMAND = "demand"
    PURGE = "purge"
    PERSIST = "persist"
    MIGRATE = "migrate"


@dataclass(frozen=True, order=True)
class BlockKey:
    session_id: str
    layer: int
    block_index: int


@dataclass(frozen=True)
class BlockMeta:
    key: BlockKey
    nbytes: int
    residency: frozenset
    session_bytes: int
    pinned: bool = False

    @property
    def priority(self) -> tuple:
        # smaller tuple = evicted earlier
        k = self.key
        return (-k.layer, self.session_bytes, -k.block_index, k.session_id)


def evict_order(candidates: Iterable[BlockMeta]) -> list[BlockMeta]:
    """Later layers first, then smaller sessions, then later blocks, then session id."""
    cands = list(candidates)
    for b in cands:
        if b.pinned:
            raise StoreError(f"pinned block {b.key} offered for eviction")
    return sorted(cands, key=lambda b: b.priority)


@dataclass
class TierBudget:
    tier: Tier
    capacity: int
    used: int = 0

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def reserve(self, nbytes: int, what: str = "") -> None:
        if nbytes < 0:
            raise StoreError("negative reservation")
        if self.used + nbytes > self.capacity:
            raise CapacityError(
                f"{self.tier.name} over capacity: used {self.used} + {nbytes} > "
                f"{self.capacity} {what}".rstrip())
        self.used += nbytes

    def release(self, nbytes: int) -> None:
        if nbytes < 0 or nbytes > self.used:
            raise StoreError(f"{self.tier.name}: bad release of {nbytes} (used {self.used})")
        self.used -= nbytes


@dataclass
class TransferRecord:
    time: int
    end: int
    node: int
    session_id: str
    layer_lo: int
    layer_hi: int  # exclusive
    from_tier: str
    to_tier: str
    nbytes: int
    reason: Reason

    def as_row(self) -> dict:
        return {"time_ns": self.time, "end_ns": self.end, "node": self.node,
                "session": self.session_id, "layers": f"{self.layer_lo}-{self.layer_hi - 1}",
                "from": self.from_tier, "to": self.to_tier, "bytes": self.nbytes,
                "reason": self.reason.value}


@dataclass
class LoadPlan:
    start: int
    layer_ready: list[int]       # when each layer's blocks are on DEVICE
    layer_compute: list[int]
    finish: int
    decode_start: int            # layer 0 ready
    total_stall: int

    @property
    def duration(self) -> int:
        return self.finish - self.start


def layerwise_plan(start: int, layer_ready: Sequence[int], layer_compute: Sequence[int]
                   ) -> LoadPlan:
    """Layer i computes once layer i-1 is done and layer i's cache has arrived."""
    if len(layer_ready) != len(layer_compute):
        raise ValueError("ready/compute length mismatch")
    t = start
    for r, c in zip(layer_ready, layer_compute):
        t = max(t, r) + c
    ready = [max(start, r) for r in layer_ready]
    return LoadPlan(start=start, layer_ready=ready, layer_compute=list(layer_compute),
                    finish=t, decode_start=ready[0] if ready else start,
                    total_stall=t - start - sum(layer_compute))


def split_evenly(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def _take_by_index(members: list[tuple[SessionCache, int]], take: int) -> dict[str, int]:
    """Pick ``take`` blocks by block_index descending then session id ascending.

    ``members`` holds (session, evictable prefix length) sorted by session id.
    Returns how many tail blocks each session gives up.
    """
    out: dict[str, int] = {}
    if take <= 0 or not members:
        return out

    def above(level: int) -> int:  # blocks with index >= level
        return sum(n - level for _, n in members if n > level)

    if above(0) <= take:
        return {sc.session_id: n for sc, n in members if n}
    # smallest level whose blocks above it are all taken
    lo, hi = 0, max(n for _, n in members)
    while lo < hi:
        mid = (lo + hi) // 2
        if above(mid) <= take:
            hi = mid
        else:
            lo = mid + 1
    rest = take - above(lo)
    for sc, n in members:
        k = max(0, n - lo)
        if rest and n > lo - 1 >= 0:
            k += 1
            rest -= 1
        if k:
            out[sc.session_id] = k
    return out


def pipeline_ends(ready: Sequence[int], durations: Sequence[int], free_at: int) -> list[int]:
    """FIFO single link: item i starts when it is ready and item i-1 is done."""
    out = []
    t = free_at
    for r, d in zip(ready, durations):
        t = max(t, r) + d
        out.append(t)
    return out


@dataclass
class Pending:
    """An in-flight layerwise transfer into one tier of this node."""

    ident: int
    tier: Tier
    arrivals: dict[int, int]          # layer -> arrival time
    blocks: dict[int, int]            # layer -> blocks landing
    reason: Reason
    on_done: Callable[[], None] | None = None


@dataclass
class SessionCache:
    session_id: str
    num_layers: int
    tokens: int = 0
    nblocks: int = 0
    res: list[list[int]] = field(default_factory=list)  # [tier][layer] prefix counts
    pinned: bool = False
    high_priority: bool = False
    pending: dict[Tier, Pending] = field(default_factory=dict)
    persist_target: int = 0           # blocks per layer persisted once writes land
    writes: dict[int, tuple[list[int], int, Tier]] = field(default_factory=dict)
    # ident -> (first block per layer, end block, tier) for backing writes in flight
    last_use: int = 0
    ending: bool = False
    staging: dict[int, tuple[list[int], int, int]] = field(default_factory=dict)
    # ident -> (first staged block per layer, end block, bytes) for HOST copies in flight

    def __post_init__(self):
        if not self.res:
            self.res = [[0] * self.num_layers for _ in Tier]

    @property
    def writes_in_flight(self) -> int:
        return len(self.writes)

    def resident_blocks(self, tier: Tier) -> int:
        return sum(self.res[tier])

    def full_in(self, tier: Tier, layer: int) -> bool:
        return self.nblocks > 0 and self.res[tier][layer] >= self.nblocks

    def residency(self, layer: int, idx: int) -> frozenset:
        return frozenset(t for t in Tier if idx < self.res[t][layer])


@dataclass
class PurgeResult:
    freed: int
    shortfall: int
    deferred: int = 0


@dataclass
class PromoteResult:
    prefix_layers: int
    transfers: list[TransferRecord]
    done_at: int | None


class KVStore:
    """Block accounting for one node.

    ``backing`` names the tier that holds the durable copy: DISK for the
    advisory-driven policy, HOST for swapping, None when evicted blocks are
    simply lost.
    """

    def __init__(self, node_id: int, cost: CostModel, device_capacity: int,
                 host_capacity: int, disk_capacity: int, block_tokens: int = 16,
                 backing: Tier | None = Tier.DISK,
                 post: Callable[..., None] | None = None):
        if block_tokens < 1:
            raise StoreError("block_tokens must be >= 1")
        self.node_id = node_id
        self.cost = cost
        self.block_tokens = block_tokens
        self.num_layers = cost.gpu.num_layers
        self.block_bytes = -(-block_tokens * cost.gpu.kv_bytes_per_token // self.num_layers)
        self.budgets = {
            Tier.DEVICE: TierBudget(Tier.DEVICE, device_capacity),
            Tier.HOST: TierBudget(Tier.HOST, host_capacity),
            Tier.DISK: TierBudget(Tier.DISK, disk_capacity),
        }
        self.backing = backing
        self.sessions: dict[str, SessionCache] = {}
        self.link_free: dict[str, int] = {k: 0 for k in
                                          ("pcie_h2d", "pcie_d2h", "disk_read", "disk_write",
                                           "net_out", "net_in")}
        self.ledger: list[TransferRecord] = []
        self.traffic: dict[str, int] = {r.value: 0 for r in Reason}
        self.tier_in: dict[Tier, int] = {t: 0 for t in Tier}
        self.tier_out: dict[Tier, int] = {t: 0 for t in Tier}
        self.lost_sessions: set[str] = set()
        self.on_released: Callable[[str, int], None] | None = None
        self.on_memory_freed: Callable[[int], None] | None = None
        self._post = post or _immediate
        self._ids = itertools.count(1)
        self.keep_ledger = True
        self._after_writes: dict[str, list[Callable[[], None]]] = {}
        self.advised: set[str] = set()   # sessions with an announced upcoming request
        self.stage_writes = True          # DEVICE->DISK writes pass through a HOST copy
        self.demand_preempts = False      # demand loads jump queued prefetch traffic
        self.demand_free = {"pcie_h2d": 0, "disk_read": 0}

    # ------------------------------------------------------------ helpers
    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_tokens)

    def cache(self, session_id: str) -> SessionCache | None:
        return self.sessions.get(session_id)

    def _get(self, session_id: str) -> SessionCache:
        sc = self.sessions.get(session_id)
        if sc is None:
            raise StoreError(f"node {self.node_id}: unknown session {session_id!r}")
        return sc

    def ensure(self, session_id: str) -> SessionCache:
        sc = self.sessions.get(session_id)
        if sc is None:
            sc = SessionCache(session_id, self.num_layers)
            self.sessions[session_id] = sc
        return sc

    def _set_res(self, sc: SessionCache, tier: Tier, layer: int, count: int) -> None:
        old = sc.res[tier][layer]
        if count == old:
            return
        delta = (count - old) * self.block_bytes
        if delta > 0:
            self.tier_in[tier] += delta
        else:
            self.tier_out[tier] -= delta
        sc.res[tier][layer] = count

    def _record(self, rec: TransferRecord) -> None:
        self.traffic[rec.reason.value] += rec.nbytes
        if self.keep_ledger:
            self.ledger.append(rec)

    def device_bytes(self, session_id: str) -> int:
        sc = self.sessions.get(session_id)
        return 0 if sc is None else sc.resident_blocks(Tier.DEVICE) * self.block_bytes

    def session_bytes(self, sc: SessionCache) -> int:
        return self.cost.kv_bytes(sc.tokens)

    def backed_count(self, sc: SessionCache, layer: int) -> int:
        return max(sc.res[Tier.HOST][layer], sc.res[Tier.DISK][layer])

    def is_durable(self, sc: SessionCache) -> bool:
        return sc.nblocks > 0 and all(self.backed_count(sc, l) >= sc.nblocks
                                      for l in range(self.num_layers))

    def has_data(self, session_id: str) -> bool:
        sc = self.sessions.get(session_id)
        if sc is None or sc.nblocks == 0:
            return False
        for l in range(self.num_layers):
            avail = max(sc.res[t][l] for t in Tier)
            for p in sc.pending.values():
                if l in p.blocks:
                    avail = max(avail, sc.res[p.tier][l] + p.blocks[l])
            if avail < sc.nblocks:
                return False
        return True

    def fully_on_device(self, session_id: str) -> bool:
        sc = self.sessions.get(session_id)
        return sc is not None and sc.nblocks > 0 and all(
            sc.res[Tier.DEVICE][l] >= sc.nblocks for l in range(self.num_layers))

    def blocks(self, session_id: str | None = None) -> list[BlockMeta]:
        """Materialise block views (tests and diagnostics only)."""
        out = []
        for sc in self.sessions.values():
            if session_id is not None and sc.session_id != session_id:
                continue
            sb = self.session_bytes(sc)
            for l in range(self.num_layers):
                n = max(sc.res[t][l] for t in Tier)
                for i in range(n):
                    out.append(BlockMeta(BlockKey(sc.session_id, l, i), self.block_bytes,
                                         sc.residency(l, i), sb,
                                         sc.pinned and i < sc.res[Tier.DEVICE][l]))
        return out

    # ------------------------------------------------------------ links
    def _reserve_link(self, name: str, ready: Sequence[int], durations: Sequence[int]
                      ) -> list[int]:
        ends = pipeline_ends(ready, durations, self.link_free[name])
        if ends:
            self.link_free[name] = ends[-1]
        return ends

    def _reserve_demand(self, name: str, ready: Sequence[int], durations: Sequence[int]
                        ) -> list[int]:
        """Demand lane of a shared link: only earlier demand traffic is ahead of it.

        Prefetches that have not landed yet are pushed back by the time the
        demand transfer occupies the link.
        """
        if not self.demand_preempts:
            return self._reserve_link(name, ready, durations)
        ends = pipeline_ends(ready, durations, self.demand_free[name])
        if not ends:
            return ends
        busy = sum(durations)
        start = ends[-1] - busy
        self.demand_free[name] = ends[-1]
        if self.link_free[name] > start:
            self.link_free[name] += busy
            self._delay_prefetches(Tier.DEVICE if name == "pcie_h2d" else Tier.HOST, start, busy)
        else:
            self.link_free[name] = ends[-1]
        return ends

    def _delay_prefetches(self, tier: Tier, after: int, by: int) -> None:
        for sid in sorted(self.sessions):
            sc = self.sessions[sid]
            p = sc.pending.get(tier)
            if p is None or p.reason is not Reason.PREFETCH:
                continue
            if max(p.arrivals.values()) <= after:
                continue
            self._shift_pending(sc, p, after, by)
            q = sc.pending.get(Tier.DEVICE)
            if tier is Tier.HOST and q is not None and q.reason is Reason.PREFETCH:
                self._shift_pending(sc, q, after, by)  # it streams out of the delayed copy

    def _shift_pending(self, sc: SessionCache, p: Pending, after: int, by: int) -> None:
        p.arrivals = {l: (t + by if t > after else t) for l, t in p.arrivals.items()}
        p.ident = next(self._ids)  # the old completion event becomes a no-op
        self._post(max(p.arrivals.values()), "TransferComplete", self._pending_done,
                   sc.session_id, p.tier, p.ident, node=self.node_id,
                   label=("delayed", sc.session_id, p.tier.name))

    # ------------------------------------------------------------ appends
    def append_blocks(self, session_id: str, new_tokens: int, at_time: int) -> list[BlockKey]:
        """New tokens land on DEVICE, pinned; the backing write starts at ``at_time``."""
        old_n = self.blocks_for(self.sessions[session_id].tokens) \
            if session_id in self.sessions else 0
        new_n = old_n + self.grow(session_id, new_tokens, at_time)
        return [BlockKey(session_id, l, i) for l in range(self.num_layers)
                for i in range(old_n, new_n)]

    def grow(self, session_id: str, new_tokens: int, at_time: int) -> int:
        """``append_blocks`` without building keys; returns blocks added per layer."""
        if new_tokens < 1:
            raise StoreError("append of zero tokens")
        sc = self.ensure(session_id)
        old_n = sc.nblocks
        new_n = self.blocks_for(sc.tokens + new_tokens)
        added = new_n - old_n
        if added:
            dev = sc.res[Tier.DEVICE]
            bad = [l for l, c in enumerate(dev) if c != old_n]
            if bad:
                raise StoreError(f"append to {session_id!r} whose layer {bad[0]} is not "
                                 "fully on DEVICE")
            nbytes = added * self.num_layers * self.block_bytes
            self.budgets[Tier.DEVICE].reserve(nbytes, f"(append {session_id})")
            sc.res[Tier.DEVICE] = [new_n] * self.num_layers
            self.tier_in[Tier.DEVICE] += nbytes
        sc.tokens += new_tokens
        sc.nblocks = new_n
        sc.pinned = True
        sc.last_use = at_time
        if added and self.backing is not None:
            self._schedule_persist(sc, old_n, new_n, at_time)
        return added

    def _schedule_persist(self, sc: SessionCache, lo: int, hi: int, at_time: int,
                          reason: Reason = Reason.PERSIST, source: Tier = Tier.DEVICE) -> None:
        tier = self.backing
        # skip blocks the backing tier holds or will hold once earlier writes land
        starts = self._write_frontier(sc, tier)
        need = [max(0, hi - a) for a in starts]
        total = sum(need) * self.block_bytes
        if total == 0:
            return
        if tier is Tier.HOST:
            # HOST is the only copy: older idle sessions give way (and are lost)
            self.make_room_host(total, at_time, exclude=(sc.session_id,))
        self.budgets[tier].reserve(total, f"(persist {sc.session_id})")
        start = at_time
        if tier is Tier.DISK:
            if source is Tier.DEVICE and self.stage_writes:
                # the write goes through host memory; once there the DEVICE copy is expendable
                start = self._stage_host_copy(sc, hi, at_time)
            link_name, link = "disk_write", Link.DISK_WRITE
        else:
            link_name, link = "pcie_d2h", Link.PCIE_D2H
        dur = self.cost.transfer_ns(total, link)
        start = max(start, self.link_free[link_name])
        end = start + dur
        self.link_free[link_name] = end
        ident = next(self._ids)
        sc.writes[ident] = (starts, hi, tier)
        sc.persist_target = max(sc.persist_target, hi)
        self._record(TransferRecord(start, end, self.node_id, sc.session_id, 0,
                                    self.num_layers, source.name, tier.name, total, reason))
        self._post(end, "WriteComplete", self._persist_done, sc.session_id, ident,
                   node=self.node_id, label=("persist", sc.session_id, tier.name))

    def _write_frontier(self, sc: SessionCache, tier: Tier) -> list[int]:
        """Per layer, the end of the prefix ``tier`` will hold once in-flight copies land."""
        front = list(sc.res[tier])
        spans = [(st, h) for st, h, t in sc.writes.values() if t is tier]
        p = sc.pending.get(tier)
        if p is not None:
            spans.append(([sc.res[tier][l] for l in range(self.num_layers)],
                          [sc.res[tier][l] + p.blocks.get(l, 0) for l in range(self.num_layers)]))
        for l in range(self.num_layers):
            moved = True
            while moved:
                moved = False
                for st, h in spans:
                    a = st[l]
                    b = h[l] if isinstance(h, list) else h
                    if a <= front[l] < b:
                        front[l] = b
                        moved = True
        return front

    def _stage_host_copy(self, sc: SessionCache, hi: int, at_time: int) -> int:
        """Copy DEVICE blocks up to ``hi`` into HOST; returns when the copy is done.

        Each layer copies from its current HOST prefix, so HOST stays a prefix.
        Skipped (returns ``at_time``) when HOST cannot make room.
        """
        starts = [min(sc.res[Tier.HOST][l], hi) for l in range(self.num_layers)]
        for st_, h, _ in sc.staging.values():
            # ranges already on their way extend the prefix
            starts = [min(hi, max(a, h)) if a >= b else a for a, b in zip(starts, st_)]
        nbytes = sum(hi - a for a in starts) * self.block_bytes
        if nbytes == 0 or not self.make_room_host(nbytes, at_time, exclude=(sc.session_id,)):
            return at_time
        self.budgets[Tier.HOST].reserve(nbytes, f"(stage {sc.session_id})")
        dur = self.cost.transfer_ns(nbytes, Link.PCIE_D2H)
        start = max(at_time, self.link_free["pcie_d2h"])
        end = start + dur
        self.link_free["pcie_d2h"] = end
        ident = next(self._ids)
        sc.staging[ident] = (starts, hi, nbytes)
        self._record(TransferRecord(start, end, self.node_id, sc.session_id, 0, self.num_layers,
                                    "DEVICE", "HOST", nbytes, Reason.PERSIST))
        self._post(end, "WriteComplete", self._stage_done, sc.session_id, ident,
                   node=self.node_id, label=("stage", sc.session_id, "HOST"))
        return end

    def _stage_done(self, session_id: str, ident: int) -> None:
        sc = self.sessions.get(session_id)
        if sc is None or ident not in sc.staging:
            return
        starts, hi, nbytes = sc.staging.pop(ident)
        unused = self._extend_prefix(sc, Tier.HOST, starts, hi)
        if unused:
            self.budgets[Tier.HOST].release(unused * self.block_bytes)
        if self.on_memory_freed is not None:
            self.on_memory_freed(self.node_id)

    def _extend_prefix(self, sc: SessionCache, tier: Tier, starts: list[int], hi: int) -> int:
        """Land blocks [starts[l], hi) per layer; returns blocks that were not needed.

        A landed range only counts if it touches the current prefix; otherwise the
        prefix below it was dropped meanwhile and the copy is useless.
        """
        row = sc.res[tier]
        unused = 0
        grown = 0
        for l, a in enumerate(starts):
            if a >= hi:
                continue
            have = row[l]
            if have < a:
                unused += hi - a
            elif have < hi:
                unused += have - a
                grown += hi - have
                row[l] = hi
            else:
                unused += hi - a
        if grown:
            self.tier_in[tier] += grown * self.block_bytes
        return unused

    def _release_staging(self, sc: SessionCache) -> None:
        for _, _, nbytes in sc.staging.values():
            self.budgets[Tier.HOST].release(nbytes)
        sc.staging.clear()
        for starts, hi, tier in sc.writes.values():
            self.budgets[tier].release(sum(max(0, hi - a) for a in starts) * self.block_bytes)
        sc.writes.clear()

    def _persist_done(self, session_id: str, ident: int) -> None:
        sc = self.sessions.get(session_id)
        if sc is None or ident not in sc.writes:
            return  # the session was dropped while the write was in flight
        starts, hi, tier = sc.writes.pop(ident)
        unused = self._extend_prefix(sc, tier, starts, hi)
        if unused:
            self.budgets[tier].release(unused * self.block_bytes)
        if sc.writes_in_flight == 0:
            for fn in self._after_writes.pop(session_id, []):
                fn()
        if sc.ending and sc.writes_in_flight == 0:
            self._release(sc)
        elif self.on_memory_freed is not None:
            self.on_memory_freed(self.node_id)

    # ------------------------------------------------------------ pinning
    def pin(self, session_id: str) -> None:
        self._get(session_id).pinned = True

    def unpin(self, session_id: str, now: int) -> None:
        sc = self._get(session_id)
        sc.pinned = False
        sc.last_use = now

    # ------------------------------------------------------------ eviction
    def _evictable_layer(self, sc: SessionCache, layer: int) -> tuple[int, bool]:
        """(blocks that may leave DEVICE now, blocked-by-unpersisted)."""
        d = sc.res[Tier.DEVICE][layer]
        if d == 0:
            return 0, False
        if self.backing is None:
            return d, False
        if self.backed_count(sc, layer) >= d:
            return d, False
        return 0, True

    def purge_from_device(self, bytes_needed: int, now: int,
                          exclude: Iterable[str] = ()) -> PurgeResult:
        """Drop DEVICE residency of unpinned blocks in eviction order.

        Blocks with a HOST or DISK copy leave without any data movement. A
        session-layer whose tail is not yet persisted is skipped until its write
        lands and reported as ``deferred``; with no backing tier the evicted
        session's cache is lost. Sessions in ``advised`` are only touched once
        every other candidate is exhausted.
        """
        if bytes_needed <= 0:
            raise StoreError("bytes_needed must be > 0")
        excl = set(exclude)
        held = self.advised - excl
        if not held:
            return self._purge(bytes_needed, now, excl)
        # sessions with an announced request keep their blocks until nothing else is left
        first = self._purge(bytes_needed, now, excl | held)
        if first.shortfall == 0:
            return first
        second = self._purge(first.shortfall, now, excl)
        return PurgeResult(freed=first.freed + second.freed, shortfall=second.shortfall,
                           deferred=max(first.deferred, second.deferred))

    def _purge(self, bytes_needed: int, now: int, excl: set[str]) -> PurgeResult:
        need_blocks = -(-bytes_needed // self.block_bytes)
        cands = [sc for sc in self.sessions.values()
                 if not sc.pinned and sc.session_id not in excl
                 and sc.resident_blocks(Tier.DEVICE) > 0]
        freed_blocks = 0
        deferred = 0
        lost: list[SessionCache] = []
        touched: dict[str, SessionCache] = {}
        for layer in range(self.num_layers - 1, -1, -1):
            if freed_blocks >= need_blocks:
                break
            groups: dict[int, list[tuple[SessionCache, int]]] = {}
            for sc in cands:
                n, blocked = self._evictable_layer(sc, layer)
                if blocked:
                    deferred += sc.res[Tier.DEVICE][layer] * self.block_bytes
                if n:
                    groups.setdefault(self.session_bytes(sc), []).append((sc, n))
            for size in sorted(groups):
                if freed_blocks >= need_blocks:
                    break
                members = sorted(groups[size], key=lambda x: x[0].session_id)
                per_session = _take_by_index(members, need_blocks - freed_blocks)
                for sc, _ in members:
                    if sc.session_id in per_session:
                        touched[sc.session_id] = sc
                for sc, n in members:
                    k = per_session.get(sc.session_id, 0)
                    if k:
                        self._set_res(sc, Tier.DEVICE, layer, sc.res[Tier.DEVICE][layer] - k)
                        freed_blocks += k
                        self._record(TransferRecord(now, now, self.node_id, sc.session_id,
                                                    layer, layer + 1, "DEVICE", "-", 0,
                                                    Reason.PURGE))
        if self.backing is None:
            lost = list(touched.values())
            for sc in lost:
                for l in range(self.num_layers):
                    freed_blocks += sc.res[Tier.DEVICE][l]
                    self._set_res(sc, Tier.DEVICE, l, 0)
                self._mark_lost(sc)
        freed = freed_blocks * self.block_bytes
        self.budgets[Tier.DEVICE].release(freed)
        return PurgeResult(freed=freed, shortfall=max(0, bytes_needed - freed),
                           deferred=deferred)

    def _mark_lost(self, sc: SessionCache) -> None:
        """Drop every copy of a session's cache; the next turn must recompute."""
        for tier in Tier:
            n = sc.resident_blocks(tier)
            for l in range(self.num_layers):
                self._set_res(sc, tier, l, 0)
            if tier is not Tier.DEVICE and n:
                self.budgets[tier].release(n * self.block_bytes)
        self._cancel_all_pending(sc)
        self._release_staging(sc)
        self.lost_sessions.add(sc.session_id)
        sc.tokens = 0
        sc.nblocks = 0
        sc.persist_target = 0
        for fn in self._after_writes.pop(sc.session_id, []):
            fn()
        if sc.ending:
            self._release(sc)

    def evict_session(self, session_id: str, now: int) -> int:
        """Drop one unpinned session's DEVICE blocks (and in-flight DEVICE loads)."""
        sc = self._get(session_id)
        if sc.pinned:
            raise StoreError(f"cannot evict pinned session {session_id!r}")
        freed = 0
        p = sc.pending.get(Tier.DEVICE)
        if p is not None:
            freed += self._cancel_pending(sc, Tier.DEVICE)
        if self.backing is None:
            freed += sc.resident_blocks(Tier.DEVICE) * self.block_bytes
            self.budgets[Tier.DEVICE].release(sc.resident_blocks(Tier.DEVICE) * self.block_bytes)
            for l in range(self.num_layers):
                self._set_res(sc, Tier.DEVICE, l, 0)
            self._mark_lost(sc)
            return freed
        n = 0
        for l in range(self.num_layers):
            if self.backed_count(sc, l) >= sc.res[Tier.DEVICE][l]:
                n += sc.res[Tier.DEVICE][l]
                self._set_res(sc, Tier.DEVICE, l, 0)
        if n:
            self.budgets[Tier.DEVICE].release(n * self.block_bytes)
            self._record(TransferRecord(now, now, self.node_id, session_id, 0,
                                        self.num_layers, "DEVICE", "-", 0, Reason.PURGE))
        return freed + n * self.block_bytes

    def _cancel_pending(self, sc: SessionCache, tier: Tier) -> int:
        p = sc.pending.pop(tier, None)
        if p is None:
            return 0
        nbytes = sum(p.blocks.values()) * self.block_bytes
        self.budgets[tier].release(nbytes)
        return nbytes

    def _cancel_all_pending(self, sc: SessionCache) -> None:
        for tier in list(sc.pending):
            self._cancel_pending(sc, tier)

    def cancel_prefetch(self, session_id: str) -> int:
        sc = self._get(session_id)
        p = sc.pending.get(Tier.DEVICE)
        if p is None or p.reason is not Reason.PREFETCH:
            return 0
        return self._cancel_pending(sc, Tier.DEVICE)

    def prefetch_victims(self) -> list[str]:
        """Unpinned sessions holding DEVICE bytes, normal priority first, oldest use first."""
        out = []
        for sc in self.sessions.values():
            if sc.pinned:
                continue
            if sc.resident_blocks(Tier.DEVICE) or Tier.DEVICE in sc.pending:
                out.append(sc)
        out.sort(key=lambda sc: (sc.high_priority, sc.last_use, sc.session_id))
        return [sc.session_id for sc in out]

    def make_room_host(self, nbytes: int, now: int, exclude: Iterable[str] = ()) -> bool:
        """LRU HOST eviction. With DISK backing it is metadata-only; with HOST
        backing the victim's cache is lost."""
        budget = self.budgets[Tier.HOST]
        if budget.free >= nbytes:
            return True
        excl = set(exclude)
        victims = sorted((sc for sc in self.sessions.values()
                          if not sc.pinned and sc.session_id not in excl
                          and sc.resident_blocks(Tier.HOST) > 0 and not sc.pending),
                         key=lambda sc: (sc.last_use, sc.session_id))
        for sc in victims:
            if budget.free >= nbytes:
                break
            if self.backing is Tier.DISK:
                if not all(sc.res[Tier.DISK][l] >= sc.res[Tier.HOST][l]
                           for l in range(self.num_layers)):
                    continue
                n = sc.resident_blocks(Tier.HOST)
                for l in range(self.num_layers):
                    self._set_res(sc, Tier.HOST, l, 0)
                budget.release(n * self.block_bytes)
            elif self.backing is Tier.HOST:
                if sc.resident_blocks(Tier.DEVICE):
                    self.budgets[Tier.DEVICE].release(
                        sc.resident_blocks(Tier.DEVICE) * self.block_bytes)
                    for l in range(self.num_layers):
                        self._set_res(sc, Tier.DEVICE, l, 0)
                self._mark_lost(sc)
            else:
                return False
        return budget.free >= nbytes

    # ------------------------------------------------------------ loads
    def missing_device_bytes(self, session_id: str) -> int:
        """Bytes a load would add to DEVICE (in-flight DEVICE loads already reserved)."""
        sc = self.sessions.get(session_id)
        if sc is None or sc.nblocks == 0:
            return 0
        p = sc.pending.get(Tier.DEVICE)
        n = 0
        for l in range(self.num_layers):
            have = sc.res[Tier.DEVICE][l] + (p.blocks.get(l, 0) if p else 0)
            n += max(0, sc.nblocks - have)
        return n * self.block_bytes

    def new_block_bytes(self, session_id: str, new_tokens: int) -> int:
        sc = self.sessions.get(session_id)
        tokens = sc.tokens if sc else 0
        added = self.blocks_for(tokens + new_tokens) - self.blocks_for(tokens)
        return added * self.num_layers * self.block_bytes

    def _source_chain(self, sc: SessionCache, layer: int, now: int) -> tuple[str, int]:
        """Where the missing DEVICE blocks of ``layer`` come from and when they are ready."""
        for tier in (Tier.HOST, Tier.DISK):
            if sc.res[tier][layer] >= sc.nblocks:
                return tier.name, now
        for tier in (Tier.HOST, Tier.DISK):
            p = sc.pending.get(tier)
            if p is not None and layer in p.arrivals and \
                    sc.res[tier][layer] + p.blocks[layer] >= sc.nblocks:
                return tier.name, p.arrivals[layer]
        return "", now

    def _load_layers(self, sc: SessionCache, layers: Sequence[int], missing: dict[int, int],
                     now: int, reason: Reason) -> dict[int, int]:
        """Reserve link time for layerwise loads into DEVICE; returns layer -> ready time."""
        ready: dict[int, int] = {}
        host_layers, disk_layers = [], []
        src_ready: dict[int, int] = {}
        bad = []
        for l in layers:
            src, t = self._source_chain(sc, l, now)
            if src == "HOST":
                host_layers.append(l)
            elif src == "DISK":
                disk_layers.append(l)
            else:
                bad.append(l)
            src_ready[l] = t
        if bad:
            raise StoreError(f"session {sc.session_id!r} missing layers {bad} at every source")
        if disk_layers:
            durs = [self.cost.transfer_ns(missing[l] * self.block_bytes, Link.DISK_READ)
                    for l in disk_layers]
            reserve = self._reserve_demand if reason is Reason.DEMAND else self._reserve_link
            ends = reserve("disk_read", [src_ready[l] for l in disk_layers], durs)
            for l, e in zip(disk_layers, ends):
                src_ready[l] = e
            self._record(TransferRecord(now, ends[-1], self.node_id, sc.session_id,
                                        disk_layers[0], disk_layers[-1] + 1, "DISK", "HOST",
                                        sum(missing[l] for l in disk_layers) * self.block_bytes,
                                        reason))
        order = sorted(host_layers + disk_layers)
        if order:
            durs = [self.cost.transfer_ns(missing[l] * self.block_bytes, Link.PCIE_H2D)
                    for l in order]
            reserve = self._reserve_demand if reason is Reason.DEMAND else self._reserve_link
            ends = reserve("pcie_h2d", [src_ready[l] for l in order], durs)
            for l, e in zip(order, ends):
                ready[l] = e
            self._record(TransferRecord(now, ends[-1], self.node_id, sc.session_id, order[0],
                                        order[-1] + 1, "HOST", "DEVICE",
                                        sum(missing[l] for l in order) * self.block_bytes,
                                        reason))
        return ready

    def plan_layerwise_load(self, session_id: str, layer_compute: Sequence[int] | int,
                            at_time: int, reason: Reason = Reason.DEMAND) -> LoadPlan:
        """Bring every layer of a session's cache to DEVICE overlapped with compute.

        DEVICE space for the missing blocks must already be available; it is
        reserved here and the blocks count as resident from now on (the caller's
        compute cannot finish before ``plan.finish``).
        """
        sc = self._get(session_id)
        L = self.num_layers
        if isinstance(layer_compute, int):
            layer_compute = [layer_compute] * L
        ready = [at_time] * L
        missing: dict[int, int] = {}
        p = sc.pending.pop(Tier.DEVICE, None)
        for l in range(L):
            have = sc.res[Tier.DEVICE][l]
            if p is not None and l in p.blocks:
                # in-flight prefetch: bytes already reserved, lands at its arrival
                have += p.blocks[l]
                self._set_res(sc, Tier.DEVICE, l, have)
                ready[l] = max(at_time, p.arrivals[l])
            if have < sc.nblocks:
                missing[l] = sc.nblocks - have
        if missing:
            layers = sorted(missing)
            nbytes = sum(missing.values()) * self.block_bytes
            loaded = self._load_layers(sc, layers, missing, at_time, reason)
            self.budgets[Tier.DEVICE].reserve(nbytes, f"(load {session_id})")
            for l in layers:
                ready[l] = max(ready[l], loaded[l])
                self._set_res(sc, Tier.DEVICE, l, sc.nblocks)
        sc.last_use = at_time
        return layerwise_plan(at_time, ready, layer_compute)

    def promote(self, session_id: str, now: int, reason: Reason = Reason.PREFETCH,
                full_depth: bool = False, stage_rest: bool = True,
                displace_idle: bool = False) -> PromoteResult:
        """Move a session's cache toward DEVICE, lowest layers first, as space allows.

        Layers that do not fit are staged from DISK into HOST when HOST has room.
        With ``full_depth`` other unpinned sessions' DEVICE blocks are purged to
        make room for every layer. With ``displace_idle`` only sessions that have
        no announced request (not in ``advised``) give up DEVICE space.
        """
        sc = self._get(session_id)
        if sc.nblocks == 0:
            return PromoteResult(0, [], None)
        if Tier.DEVICE in sc.pending:
            return PromoteResult(0, [], None)  # duplicate advisory: already moving
        L = self.num_layers
        missing = {l: sc.nblocks - sc.res[Tier.DEVICE][l] for l in range(L)
                   if sc.res[Tier.DEVICE][l] < sc.nblocks}
        if not missing:
            return PromoteResult(L, [], now)
        need_total = sum(missing.values()) * self.block_bytes
        dev = self.budgets[Tier.DEVICE]
        if full_depth and dev.free < need_total:
            self.purge_from_device(need_total - dev.free, now, exclude=(session_id,))
        elif displace_idle and dev.free < need_total:
            self.purge_from_device(need_total - dev.free, now,
                                   exclude=self.advised | {session_id})
        # longest layer prefix that fits
        avail = dev.free
        chosen = []
        for l in range(L):
            b = missing.get(l, 0) * self.block_bytes
            if b > avail:
                break
            avail -= b
            if l in missing:
                chosen.append(l)
        prefix = len(chosen) if len(chosen) == len(missing) else len(
            [l for l in range(L) if l < min(set(missing) - set(chosen))])
        before = len(self.ledger)
        done_at = None
        if chosen:
            sub = {l: missing[l] for l in chosen}
            loaded = self._load_layers(sc, chosen, sub, now, reason)
            dev.reserve(sum(sub.values()) * self.block_bytes, f"(promote {session_id})")
            ident = next(self._ids)
            sc.pending[Tier.DEVICE] = Pending(ident, Tier.DEVICE, dict(loaded), sub, reason)
            done_at = max(loaded.values())
            self._post(done_at, "TransferComplete", self._pending_done, session_id,
                       Tier.DEVICE, ident, node=self.node_id,
                       label=("promote", session_id, "DEVICE"))
        rest = [l for l in range(L) if l in missing and l not in chosen]
        if stage_rest and rest and Tier.HOST not in sc.pending:
            self._stage_to_host(sc, rest, now, reason)
        sc.last_use = now
        return PromoteResult(prefix, self.ledger[before:], done_at)

    def _stage_to_host(self, sc: SessionCache, layers: list[int], now: int,
                       reason: Reason) -> None:
        need = {l: sc.nblocks - sc.res[Tier.HOST][l] for l in layers
                if sc.res[Tier.HOST][l] < sc.nblocks and sc.res[Tier.DISK][l] >= sc.nblocks}
        if not need:
            return
        nbytes = sum(need.values()) * self.block_bytes
        if not self.make_room_host(nbytes, now, exclude=(sc.session_id,)):
            return
        order = sorted(need)
        durs = [self.cost.transfer_ns(need[l] * self.block_bytes, Link.DISK_READ) for l in order]
        ends = self._reserve_link("disk_read", [now] * len(order), durs)
        self.budgets[Tier.HOST].reserve(nbytes, f"(stage {sc.session_id})")
        ident = next(self._ids)
        sc.pending[Tier.HOST] = Pending(ident, Tier.HOST, dict(zip(order, ends)), need, reason)
        self._record(TransferRecord(now, ends[-1], self.node_id, sc.session_id, order[0],
                                    order[-1] + 1, "DISK", "HOST", nbytes, reason))
        self._post(ends[-1], "TransferComplete", self._pending_done, sc.session_id,
                   Tier.HOST, ident, node=self.node_id, label=("stage", sc.session_id, "HOST"))

    def _pending_done(self, session_id: str, tier: Tier, ident: int) -> None:
        sc = self.sessions.get(session_id)
        if sc is None:
            return
        p = sc.pending.get(tier)
        if p is None or p.ident != ident:
            return  # consumed by a demand load or cancelled
        del sc.pending[tier]
        for l, n in p.blocks.items():
            self._set_res(sc, tier, l, sc.res[tier][l] + n)
        if p.on_done is not None:
            p.on_done()

    # ------------------------------------------------------------ lifecycle
    def drop_session(self, session_id: str) -> None:
        """Free every tier immediately (stateless policies, lost caches)."""
        self.advised.discard(session_id)
        sc = self.sessions.pop(session_id, None)
        if sc is None:
            return
        self._cancel_all_pending(sc)
        self._release_staging(sc)
        for tier in Tier:
            n = sc.resident_blocks(tier)
            if n:
                self.budgets[tier].release(n * self.block_bytes)
                for l in range(self.num_layers):
                    self._set_res(sc, tier, l, 0)
        for fn in self._after_writes.pop(session_id, []):
            fn()

    def _fresh_copy(self, session_id: str) -> SessionCache:
        """Replace a stale copy before a newer one arrives, keeping its landed DISK blocks.

        The session only ever grows, so what this node already persisted is a
        prefix of the incoming cache and stays durable. The object is new so that
        callbacks holding the old one see it as gone.
        """
        old = self.sessions.get(session_id)
        keep = [0] * self.num_layers
        if old is not None and self.backing is Tier.DISK:
            # hand the DISK prefix (and its budget) over; drop_session frees the rest
            keep = old.res[Tier.DISK]
            old.res[Tier.DISK] = [0] * self.num_layers
        self.drop_session(session_id)
        sc = self.ensure(session_id)
        sc.res[Tier.DISK] = keep
        return sc

    def end_session(self, session_id: str) -> None:
        """Release once pending writes have landed (write-behind barrier)."""
        sc = self.sessions.get(session_id)
        if sc is None:
            return
        sc.ending = True
        sc.pinned = False
        if sc.writes_in_flight == 0:
            self._release(sc)

    def _release(self, sc: SessionCache) -> None:
        self.drop_session(sc.session_id)
        if self.on_released is not None:
            self.on_released(sc.session_id, self.node_id)
        if self.on_memory_freed is not None:
            self.on_memory_freed(self.node_id)

    def reset_cache(self, session_id: str) -> None:
        """Forget a session's cache contents (before a full recompute)."""
        sc = self.sessions.get(session_id)
        if sc is None:
            return
        self.drop_session(session_id)
        self.lost_sessions.discard(session_id)

    def after_writes(self, session_id: str, fn: Callable[[], None]) -> None:
        """Run ``fn`` once the session has no backing writes in flight."""
        sc = self.sessions.get(session_id)
        if sc is None or sc.writes_in_flight == 0:
            fn()
            return
        self._after_writes.setdefault(session_id, []).append(fn)

    # ------------------------------------------------------------ invariants
    def check(self) -> None:
        used = {t: 0 for t in Tier}
        for sc in self.sessions.values():
            for t in Tier:
                used[t] += sc.resident_blocks(t) * self.block_bytes
            for p in sc.pending.values():
                used[p.tier] += sum(p.blocks.values()) * self.block_bytes
            for _, _, nbytes in sc.staging.values():
                used[Tier.HOST] += nbytes
            for starts, hi, tier in sc.writes.values():
                used[tier] += sum(max(0, hi - a) for a in starts) * self.block_bytes
            if sc.pinned:
                for l in range(self.num_layers):
                    if sc.res[Tier.DEVICE][l] < sc.nblocks:
                        raise StoreError(f"pinned {sc.session_id!r} not on DEVICE at layer {l}")
        for t, b in self.budgets.items():
            if not 0 <= b.used <= b.capacity:
                raise CapacityError(f"{t.name}: used {b.used} outside [0, {b.capacity}]")
            if t is not Tier.DEVICE and self.backing is None:
                continue
            if b.used != used[t]:
                raise StoreError(f"{t.name}: accounted {b.used} != resident {used[t]}")


def fetch_remote(src: KVStore, dst: KVStore, session_id: str, now: int,
                 on_done: Callable[[], None] | None = None,
                 reason: Reason = Reason.MIGRATE) -> int:
    """Stream a session's cache layer by layer from ``src`` to ``dst``.

    Lands in ``dst`` HOST (or DISK when HOST is full); ``dst`` then persists its
    own copy. ``src`` drops DEVICE/HOST copies when the transfer lands and its
    backing copy once ``dst`` has persisted. Returns the completion time.
    """
    if src is dst or src.node_id == dst.node_id:
        raise StoreError("fetch_remote needs two distinct nodes")
    sc = src.sessions.get(session_id)
    if sc is None or sc.nblocks == 0 or not src.has_data(session_id):
        raise StoreError(f"node {src.node_id} does not hold session {session_id!r}")
    if sc.pinned:
        raise StoreError(f"session {session_id!r} is pinned on node {src.node_id}")
    L = src.num_layers
    nblocks = sc.nblocks
    layer_bytes = nblocks * src.block_bytes
    ready = []
    disk_only = []
    for l in range(L):
        fast = max(sc.res[Tier.DEVICE][l], sc.res[Tier.HOST][l])
        if fast >= nblocks:
            ready.append(now)
        else:
            ready.append(now)
            disk_only.append(l)
    if disk_only:
        durs = [src.cost.transfer_ns(layer_bytes, Link.DISK_READ) for _ in disk_only]
        ends = src._reserve_link("disk_read", [now] * len(disk_only), durs)
        for l, e in zip(disk_only, ends):
            ready[l] = e
    dur = [src.cost.transfer_ns(layer_bytes, Link.NETWORK) for _ in range(L)]
    free = max(src.link_free["net_out"], dst.link_free["net_in"])
    arrivals = pipeline_ends(ready, dur, free)
    src.link_free["net_out"] = dst.link_free["net_in"] = arrivals[-1]
    total = layer_bytes * L

    dsc = dst.ensure(session_id)
    if dsc.nblocks or dsc.pending:
        dsc = dst._fresh_copy(session_id)
    kept = [min(nblocks, k) for k in dsc.res[Tier.DISK]]
    dsc.tokens = sc.tokens
    dsc.nblocks = nblocks
    dsc.high_priority = sc.high_priority
    dsc.last_use = now
    land = Tier.HOST if dst.make_room_host(total, now, exclude=(session_id,)) else Tier.DISK
    if land is Tier.DISK and dst.backing is not Tier.DISK:
        raise CapacityError(f"node {dst.node_id}: no HOST room for migrated {session_id!r}")
    incoming = {l: nblocks for l in range(L)}
    if land is Tier.DISK:
        # blocks this node persisted before are already there
        incoming = {l: nblocks - kept[l] for l in range(L)}
        durs = [dst.cost.transfer_ns(incoming[l] * dst.block_bytes, Link.DISK_WRITE)
                for l in range(L)]
        arrivals = dst._reserve_link("disk_write", arrivals, durs)
    dst.budgets[land].reserve(sum(incoming.values()) * dst.block_bytes,
                              f"(migrate {session_id})")
    ident = next(dst._ids)
    rec = TransferRecord(now, arrivals[-1], dst.node_id, session_id, 0, L,
                         f"node{src.node_id}", land.name, total, reason)
    dst._record(rec)
    sc.pinned = False
    done_at = arrivals[-1]

    def landed():
        # source copies above the backing tier go now, the backing copy after dst persists
        ssc = src.sessions.get(session_id)
        if ssc is sc:
            for tier in (Tier.DEVICE, Tier.HOST):
                n = ssc.resident_blocks(tier)
                if n:
                    src.budgets[tier].release(n * src.block_bytes)
                    for l in range(L):
                        src._set_res(ssc, tier, l, 0)
            src._cancel_all_pending(ssc)
        if land is Tier.HOST and dst.backing is Tier.DISK:
            dsc2 = dst.sessions.get(session_id)
            if dsc2 is not None:
                dst._schedule_persist(dsc2, 0, nblocks, done_at, reason=Reason.PERSIST,
                                      source=Tier.HOST)
        _maybe_drop_source()
        if on_done is not None:
            on_done()
        if src.on_memory_freed is not None:
            src.on_memory_freed(src.node_id)

    def _drop_stale_source():
        # a later migration back to src must not lose its fresh copy
        if src.sessions.get(session_id) is sc:
            src.drop_session(session_id)

    def _maybe_drop_source():
        dsc2 = dst.sessions.get(session_id)
        if dsc2 is None or dsc2.writes_in_flight == 0 or dst.backing is not Tier.DISK:
            _drop_stale_source()
        else:
            dst.after_writes(session_id, _drop_stale_source)

    dsc.pending[land] = Pending(ident, land, dict(enumerate(arrivals)), incoming, reason,
                                on_done=landed)
    dst._post(done_at, "TransferComplete", dst._pending_done, session_id, land, ident,
              node=dst.node_id, label=("fetch", session_id, land.name))
    return done_at


def _immediate(time, kind, fn, *args, **_):
    fn(*args)
