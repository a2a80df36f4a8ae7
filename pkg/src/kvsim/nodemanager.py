"""Per-node handling of advisory, inference and cache-fetch messages."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

from .costmodel import seconds_to_ns
from .engine import ActiveRequest, Engine, Policy, SimulationError
from .kvstore import KVStore, Reason, StoreError, Tier, fetch_remote


@dataclass
class Advisory:
    """Advisory as delivered to a node: the trace hint plus the owner the scheduler found."""

    session_id: str
    turn_index: int
    model_id: str
    expected_arrival: float | None
    ordered: bool
    priority: int | None
    cache_node: int | None

    def to_wire(self) -> dict:
        return {"session": self.session_id, "turn": self.turn_index, "model": self.model_id,
                "expected_arrival": self.expected_arrival, "ordered": self.ordered,
                "priority": self.priority, "cache_node": self.cache_node}


@dataclass
class NodeState:
    node_id: int
    store: KVStore
    engine: Engine
    owned: set[str] = field(default_factory=set)


class Cluster:
    """Node managers plus the ownership bookkeeping they share.

    ``owner`` is the scheduler's routing-table map; a fetch flips it when the
    last layer lands.
    """

    def __init__(self, nodes: list[NodeState], policy: Policy, owner: dict[str, int],
                 clock: Callable[[], int]):
        self.nodes = nodes
        self.policy = policy
        self.owner = owner
        self._now = clock
        self.fetching: dict[str, tuple[int, int]] = {}   # session -> (src, dst)
        self.deferred_fetch: dict[str, tuple[int, int]] = {}
        self.advisory_seen: dict[tuple[str, int], int] = {}
        self.anomalies: list[str] = []
        self.on_owner_change: Callable[[str, int, int], None] = lambda s, a, b: None
        self.order_by_expected = True
        # per node: advised sessions whose promotion stopped short, keyed by urgency
        self.backlog: list[dict[str, tuple[int, int]]] = [{} for _ in nodes]
        self._adv_key: dict[str, tuple[int, int]] = {}
        self._adv_seq = 0

    # ------------------------------------------------------------ ownership
    def claim(self, session_id: str, node: int) -> None:
        prev = self.owner.get(session_id)
        if prev is not None and prev != node:
            self.nodes[prev].owned.discard(session_id)
        self.owner[session_id] = node
        self.nodes[node].owned.add(session_id)

    def release(self, session_id: str) -> None:
        node = self.owner.pop(session_id, None)
        if node is not None:
            self.nodes[node].owned.discard(session_id)

    def check_single_owner(self) -> None:
        seen: dict[str, int] = {}
        for n in self.nodes:
            for sid in n.owned:
                if sid in seen:
                    raise SimulationError(f"session {sid!r} owned by nodes {seen[sid]} "
                                          f"and {n.node_id}")
                seen[sid] = n.node_id
        if seen != self.owner:
            raise SimulationError("routing table disagrees with node ownership sets")

    # ------------------------------------------------------------ fetch
    def on_fetch_request(self, session_id: str, requester: int, now: int,
                         reason: Reason = Reason.MIGRATE) -> int:
        """Owner streams the session's cache to ``requester``; returns completion time."""
        src = self.owner.get(session_id)
        if src is None:
            raise SimulationError(f"fetch for unowned session {session_id!r}")
        if session_id in self.fetching:
            raise SimulationError(f"concurrent fetch for session {session_id!r} rejected")
        if src == requester:
            raise SimulationError(f"fetch of {session_id!r} from its own owner")
        s, d = self.nodes[src], self.nodes[requester]

        def landed():
            self.fetching.pop(session_id, None)
            self.claim(session_id, requester)
            self.on_owner_change(session_id, src, requester)
            if self._waiting_on(requester, session_id):
                d.engine.unblock(session_id, self._now())
            else:
                # Case 1: keep moving toward the GPU if it has room
                self._promote(requester, session_id, self._now(),
                              full_depth=d.store.cache(session_id).high_priority,
                              displace_idle=session_id in d.store.advised)
            d.engine.kick(self._now())

        self.fetching[session_id] = (src, requester)
        try:
            done = fetch_remote(s.store, d.store, session_id, now, on_done=landed,
                                reason=reason)
        except StoreError:
            self.fetching.pop(session_id, None)
            raise
        return done

    def _waiting_on(self, node: int, session_id: str) -> bool:
        e = self.nodes[node].engine
        return any(r.session_id == session_id for r in e.waiting) or (
            e.prefilling is not None and e.prefilling.session_id == session_id)

    def _busy_elsewhere(self, session_id: str, node: int) -> bool:
        e = self.nodes[node].engine
        return (any(r.session_id == session_id for r in e.running) or
                self._waiting_on(node, session_id))

    def _start_or_defer_fetch(self, session_id: str, src: int, dst: int, now: int,
                              reason: Reason) -> None:
        if self._busy_elsewhere(session_id, src):
            # the source is still serving a turn of this session (agent pipelines)
            self.deferred_fetch[session_id] = (src, dst)
            return
        self.on_fetch_request(session_id, dst, now, reason)

    def after_request(self, session_id: str, node: int, now: int) -> None:
        pending = self.deferred_fetch.get(session_id)
        if pending is not None and pending[0] == node:
            del self.deferred_fetch[session_id]
            self.on_fetch_request(session_id, pending[1], now, Reason.MIGRATE)

    # ------------------------------------------------------------ handlers
    def on_advisory(self, node: int, adv: Advisory, now: int, full_depth: bool = False) -> None:
        key = (adv.session_id, adv.turn_index)
        if key in self.advisory_seen:
            return  # idempotent
        self.advisory_seen[key] = now
        if self.policy is not Policy.SYMPHONY:
            return
        owner = adv.cache_node
        if owner is None:
            if adv.turn_index > 0 and adv.session_id not in self.owner:
                self.anomalies.append(f"advisory for unknown session {adv.session_id} "
                                      f"turn {adv.turn_index}")
            return
        n = self.nodes[node]
        n.store.advised.add(adv.session_id)
        due = now
        if self.order_by_expected and adv.expected_arrival is not None:
            due += seconds_to_ns(adv.expected_arrival)
        self._adv_seq += 1
        self._adv_key[adv.session_id] = (due, self._adv_seq)
        if owner != node:
            if adv.session_id in self.fetching:
                return
            self._start_or_defer_fetch(adv.session_id, owner, node, now, Reason.PREFETCH)
            if adv.session_id in self.fetching:
                n.store.ensure(adv.session_id).high_priority = full_depth
            return
        sc = n.store.cache(adv.session_id)
        if sc is None or sc.nblocks == 0:
            return
        sc.high_priority = full_depth or sc.high_priority
        if not sc.pinned:
            self._promote(node, adv.session_id, now, full_depth=full_depth, displace_idle=True)

    def _promote(self, node: int, session_id: str, now: int, full_depth: bool,
                 displace_idle: bool) -> None:
        st = self.nodes[node].store
        res = st.promote(session_id, now, Reason.PREFETCH, full_depth=full_depth,
                         displace_idle=displace_idle)
        if res.prefix_layers < st.num_layers and session_id in st.advised:
            key = self._adv_key.get(session_id, (now, 0))
            self.backlog[node][session_id] = key

    def retry_promotions(self, node: int, now: int) -> None:
        """Hand freed DEVICE space to waiting prefetches, most urgent first.

        Only free space and an idle host-to-device link are used; nothing is
        purged on their behalf. Stops at the first session that cannot make
        progress so the order is kept.
        """
        waiting = self.backlog[node]
        if not waiting:
            return
        st = self.nodes[node].store
        if st.link_free["pcie_h2d"] > now:
            return  # never queue speculative loads ahead of demand traffic
        for sid in sorted(waiting, key=waiting.__getitem__):
            sc = st.cache(sid)
            if sc is None or sc.nblocks == 0 or sc.pinned or sid not in st.advised \
                    or sid in self.fetching or st.fully_on_device(sid):
                del waiting[sid]
                continue
            if Tier.DEVICE in sc.pending:
                continue  # its earlier part is still streaming in
            if st.budgets[Tier.DEVICE].free < st.block_bytes:
                return
            before = st.missing_device_bytes(sid)
            res = st.promote(sid, now, Reason.PREFETCH)
            if res.prefix_layers >= st.num_layers:
                del waiting[sid]
            elif st.missing_device_bytes(sid) == before:
                return

    def on_inference(self, node: int, req: ActiveRequest, now: int) -> None:
        n = self.nodes[node]
        sid = req.session_id
        if self.policy is Policy.SYMPHONY and req.turn_index > 0:
            owner = self.owner.get(sid)
            fetch = self.fetching.get(sid)
            if fetch is not None and fetch[1] != node:
                raise SimulationError(f"{sid} fetched to node {fetch[1]} but routed to {node}")
            if fetch is None and owner is not None and owner != node:
                if sid in self.deferred_fetch:
                    del self.deferred_fetch[sid]
                self.on_fetch_request(sid, node, now, Reason.DEMAND)
                fetch = self.fetching.get(sid)
            if fetch is not None:
                req.blocked = True
        if req.turn_index == 0 or self.owner.get(sid) is None:
            if self.policy.keeps_cache:
                self.claim(sid, node)
        n.engine.submit(req, now)
