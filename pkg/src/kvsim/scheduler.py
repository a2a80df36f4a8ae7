"""Cluster-level request routing and the session -> node routing table."""

from __future__ import annotations

import bisect
from collections.abc import Sequence
from dataclasses import dataclass, field

from .engine import Policy, SimulationError


@dataclass(frozen=True)
class SchedulerConfig:
    load_metric: str = "requests"     # or "tokens"
    count_planned: bool = True        # advisories routed but not yet arrived count as load
    view_lag_s: float = 0.0
    balance_priority: bool = True
    owner_slack: int = 1              # keep a session on its owner within this much of the minimum

    def __post_init__(self):
        if self.load_metric not in ("requests", "tokens"):
            raise ValueError(f"unknown load_metric {self.load_metric!r}")
        if self.owner_slack < 0:
            raise ValueError("owner_slack must be >= 0")
        if self.view_lag_s < 0:
            raise ValueError("view_lag_s must be >= 0")


@dataclass
class LoadView:
    """Per-node counters as the scheduler sees them."""

    active: list[int]
    queued: list[int]
    planned: list[int]
    high: list[int]
    tokens: list[int]

    @classmethod
    def empty(cls, nodes: int) -> LoadView:
        return cls(*([0] * nodes for _ in range(5)))

    @property
    def nodes(self) -> int:
        return len(self.active)

    def requests(self, i: int) -> int:
        return self.active[i] + self.queued[i]

    def snapshot(self) -> tuple:
        return (tuple(self.active), tuple(self.queued), tuple(self.planned),
                tuple(self.high), tuple(self.tokens))

    @classmethod
    def from_snapshot(cls, snap: tuple) -> LoadView:
        return cls(*(list(x) for x in snap))

    def check(self) -> None:
        for name in ("active", "queued", "planned", "high", "tokens"):
            if min(getattr(self, name), default=0) < 0:
                raise SimulationError(f"negative {name} count in load view")


def argmin_node(loads: Sequence) -> int:
    """Index of the smallest load; ties go to the lowest node id."""
    if not loads:
        raise ValueError("no nodes")
    return min(range(len(loads)), key=lambda i: (loads[i], i))


@dataclass
class RoutingRecord:
    time: int
    session_id: str
    turn_index: int
    kind: str
    node: int
    reason: str

    def as_row(self) -> dict:
        return {"time_ns": self.time, "session": self.session_id, "turn": self.turn_index,
                "kind": self.kind, "node": self.node, "reason": self.reason}


@dataclass
class RoutingTable:
    owner: dict[str, int] = field(default_factory=dict)
    planned: dict[tuple[str, int], int] = field(default_factory=dict)

    def set_owner(self, session_id: str, node: int) -> None:
        self.owner[session_id] = node

    def drop(self, session_id: str) -> None:
        self.owner.pop(session_id, None)


class Scheduler:
    def __init__(self, nodes: int, policy: Policy, cfg: SchedulerConfig | None = None):
        if nodes < 1:
            raise ValueError("need at least one node")
        self.policy = policy
        self.cfg = cfg or SchedulerConfig()
        self.view = LoadView.empty(nodes)
        self.table = RoutingTable()
        self.ledger: list[RoutingRecord] = []
        self.keep_ledger = True
        self._lag_ns = round(self.cfg.view_lag_s * 1e9)
        self._hist_t: list[int] = []
        self._hist: list[tuple] = []

    # ------------------------------------------------------------ view
    def record_view(self, now: int) -> None:
        """Remember the current counters for lagged lookups."""
        if self._lag_ns == 0:
            return
        snap = self.view.snapshot()
        if self._hist_t and self._hist_t[-1] == now:
            self._hist[-1] = snap
        else:
            self._hist_t.append(now)
            self._hist.append(snap)

    def seen_view(self, now: int) -> LoadView:
        if self._lag_ns == 0:
            return self.view
        i = bisect.bisect_right(self._hist_t, now - self._lag_ns) - 1
        if i < 0:
            return LoadView.empty(self.view.nodes)
        seen = LoadView.from_snapshot(self._hist[i])
        # our own routing decisions are never stale
        seen.planned = list(self.view.planned)
        return seen

    def loads(self, now: int) -> list:
        v = self.seen_view(now)
        out = []
        for i in range(v.nodes):
            base = v.tokens[i] if self.cfg.load_metric == "tokens" else v.requests(i)
            if self.cfg.count_planned:
                base += v.planned[i]
            out.append(base)
        return out

    def _log(self, now, sid, turn, kind, node, reason):
        if self.keep_ledger:
            self.ledger.append(RoutingRecord(now, sid, turn, kind, node, reason))

    def _pick(self, now: int, high: bool) -> int:
        loads = self.loads(now)
        if high and self.cfg.balance_priority:
            # least loaded first; among equals, the node with the fewest prioritized sessions
            v = self.view
            return argmin_node([(loads[i], v.high[i]) for i in range(v.nodes)])
        return argmin_node(loads)

    def _close(self, now: int, high: bool, owner: int, best: int) -> bool:
        loads = self.loads(now)
        if loads[owner] == loads[best] and high and self.cfg.balance_priority:
            return self.view.high[owner] <= self.view.high[best]
        return loads[owner] <= loads[best] + self.cfg.owner_slack

    # ------------------------------------------------------------ routing
    def route_advisory(self, session_id: str, turn_index: int, now: int,
                       high: bool = False) -> tuple[int, int | None]:
        """Pick the node for an upcoming request; returns (target, current cache owner)."""
        key = (session_id, turn_index)
        owner = self.table.owner.get(session_id)
        if self.policy is not Policy.SYMPHONY:
            # baselines do not act on advisories; nothing is planned or counted
            node = owner if owner is not None else argmin_node(self.loads(now))
            self._log(now, session_id, turn_index, "advisory", node, "ignored")
            return node, owner
        if key in self.table.planned:
            # duplicate advisory: keep the first plan
            node = self.table.planned[key]
            self._log(now, session_id, turn_index, "advisory", node, "duplicate")
            return node, self.table.owner.get(session_id)
        node = self._pick(now, high)
        if owner is not None and owner != node and self._close(now, high, owner, node):
            node = owner  # a nearly as idle owner saves a migration
        self.table.planned[key] = node
        self.view.planned[node] += 1
        if high:
            self.view.high[node] += 1
        self._log(now, session_id, turn_index, "advisory", node, "least_loaded")
        return node, self.table.owner.get(session_id)

    def route_inference(self, session_id: str, turn_index: int, now: int,
                        high: bool = False) -> tuple[int, str]:
        key = (session_id, turn_index)
        p = self.policy
        if p is Policy.SYMPHONY and key in self.table.planned:
            node = self.table.planned.pop(key)
            self.view.planned[node] -= 1
            if high:
                self.view.high[node] -= 1
            reason = "planned"
        elif p in (Policy.SWAP, Policy.RETAIN) and session_id in self.table.owner:
            node, reason = self.table.owner[session_id], "sticky"
        else:
            node = self._pick(now, high and p is Policy.SYMPHONY)
            reason = "least_loaded" if turn_index == 0 or p is Policy.RECOMPUTE else "miss"
            if p in (Policy.SWAP, Policy.RETAIN) and turn_index == 0:
                reason = "first_turn"
        self._log(now, session_id, turn_index, "inference", node, reason)
        return node, reason


# ---------------------------------------------------------------- imbalance

@dataclass
class ImbalanceSample:
    time: int
    loads: tuple[float, ...]

    @property
    def max(self) -> float:
        return max(self.loads)

    @property
    def min(self) -> float:
        return min(self.loads)

    @property
    def median(self) -> float:
        s = sorted(self.loads)
        return s[(len(s) - 1) // 2]


def load_imbalance(samples: Sequence[Sequence[float]]) -> dict:
    """Per-sample max/median/min and the run-level worst max/median ratio.

    The median is the lower median for even node counts. Samples whose median
    is zero carry no ratio.
    """
    if not samples:
        raise ValueError("no load samples")
    per = []
    ratios = []
    for loads in samples:
        if not loads:
            raise ValueError("sample with no nodes")
        s = sorted(loads)
        med = s[(len(s) - 1) // 2]
        per.append({"max": s[-1], "median": med, "min": s[0]})
        if len(s) == 1:
            ratios.append(1.0)
        elif med > 0:
            ratios.append(s[-1] / med)
    return {"samples": per, "ratio": max(ratios) if ratios else float("nan"),
            "mean_ratio": sum(ratios) / len(ratios) if ratios else float("nan")}
