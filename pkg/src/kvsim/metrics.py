"""Per-request and cluster metrics, report files and run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

from .costmodel import seconds_to_ns
from .engine import ActiveRequest
from .scheduler import load_imbalance
from .simcore import RunResult

REQUEST_COLUMNS = ("session", "turn", "node", "admit_ns", "ttft_ns", "finish_ns",
                   "out_tokens", "redundant_tokens", "arrival_ns", "first_token_ns",
                   "prefill_tokens", "history_tokens", "tpot_ns", "e2e_ns",
                   "normalized_latency_ns", "load_stall_ns", "preemptions", "priority")


@dataclass(frozen=True)
class RequestMetrics:
    session: str
    turn: int
    node: int
    arrival_ns: int
    admit_ns: int
    first_token_ns: int
    finish_ns: int
    out_tokens: int
    prefill_tokens: int
    redundant_tokens: int
    history_tokens: int
    load_stall_ns: int
    preemptions: int
    high_priority: bool

    @property
    def ttft_ns(self) -> int:
        return self.first_token_ns - self.arrival_ns

    @property
    def e2e_ns(self) -> int:
        return self.finish_ns - self.arrival_ns

    @property
    def tpot_ns(self) -> float | None:
        if self.out_tokens < 2:
            return None
        return (self.finish_ns - self.first_token_ns) / (self.out_tokens - 1)

    @property
    def normalized_latency_ns(self) -> float:
        return self.e2e_ns / self.out_tokens

    def row(self) -> dict:
        tpot = self.tpot_ns
        return {"session": self.session, "turn": self.turn, "node": self.node,
                "admit_ns": self.admit_ns, "ttft_ns": self.ttft_ns,
                "finish_ns": self.finish_ns, "out_tokens": self.out_tokens,
                "redundant_tokens": self.redundant_tokens, "arrival_ns": self.arrival_ns,
                "first_token_ns": self.first_token_ns, "prefill_tokens": self.prefill_tokens,
                "history_tokens": self.history_tokens,
                "tpot_ns": "" if tpot is None else repr(tpot), "e2e_ns": self.e2e_ns,
                "normalized_latency_ns": repr(self.normalized_latency_ns),
                "load_stall_ns": self.load_stall_ns, "preemptions": self.preemptions,
                "priority": "high" if self.high_priority else "normal"}


def request_metrics(r: ActiveRequest) -> RequestMetrics:
    return RequestMetrics(r.session_id, r.turn_index, r.node, r.arrival_ns, r.admit_ns,
                          r.first_token_ns, r.finish_ns, r.generated_tokens, r.prefill_tokens,
                          r.redundant_tokens, r.history_tokens, r.load_stall_ns,
                          r.preemptions, r.high_priority)


def wasted_fraction_by_turn(records: Iterable[RequestMetrics]) -> dict[int, float]:
    """Redundant over total prefilled tokens, per turn index."""
    red: dict[int, int] = {}
    tot: dict[int, int] = {}
    for m in records:
        red[m.turn] = red.get(m.turn, 0) + m.redundant_tokens
        tot[m.turn] = tot.get(m.turn, 0) + m.prefill_tokens
    return {k: red[k] / tot[k] for k in sorted(tot) if tot[k] > 0}


def _mean(xs: Sequence[float]) -> float:
    return statistics.fmean(xs) if xs else float("nan")


def _pct(xs: Sequence[float], q: float) -> float:
    if not xs:
        return float("nan")
    s = sorted(xs)
    return s[min(len(s) - 1, max(0, math.ceil(q * len(s)) - 1))]


def measurement_window(makespan_ns: int, fraction: float) -> tuple[int, int]:
    trim = (1 - fraction) / 2
    return round(makespan_ns * trim), round(makespan_ns * (1 - trim))


def imbalance_windows(res: RunResult) -> list[tuple[float, ...]]:
    """Load windows inside the measurement span while the closed loop was still full.

    Once the session pool is exhausted the number of live users decays, so
    windows after that point say more about the drain than about routing.
    Falls back to the plain measurement span if that leaves nothing.
    """
    lo, hi = measurement_window(res.makespan_ns, res.config.sim.measure_fraction)
    width = seconds_to_ns(res.config.sim.load_window_s)
    inside = [(t, w) for t, w in res.load_windows if t >= lo and t + width <= hi]
    end = res.saturated_until_ns
    if end is not None:
        full = [w for t, w in inside if t + width <= end]
        if full:
            return full
    return [w for _, w in inside]


def build_report(res: RunResult) -> dict:
    recs = [request_metrics(r) for r in res.requests]
    frac = res.config.sim.measure_fraction
    lo, hi = measurement_window(res.makespan_ns, frac)
    span_s = (hi - lo) / 1e9
    done_in = sum(1 for m in recs if lo <= m.finish_ns < hi)
    windows = imbalance_windows(res)
    imb = load_imbalance(windows) if windows else {"ratio": float("nan"),
                                                   "mean_ratio": float("nan")}
    tpots = [m.tpot_ns for m in recs if m.tpot_ns is not None]
    by_class = {}
    for cls in ("normal", "high"):
        xs = [m.tpot_ns for m in recs if m.tpot_ns is not None and
              (m.high_priority == (cls == "high"))]
        by_class[cls] = _mean(xs) / 1e9 if xs else None
    cost = res.config.cluster.cost_model()
    prefill_compute = sum(cost.prefill_ns(m.prefill_tokens) for m in recs if m.prefill_tokens)
    leads = [x / 1e9 for x in res.advisory_leads_ns]
    return {
        "policy": res.policy.value,
        "trace_hash": res.trace_hash,
        "seed": res.seed,
        "concurrency": res.concurrency,
        "nodes": res.config.cluster.nodes,
        "requests": len(recs),
        "sessions": len({m.session for m in recs}),
        "events": res.events,
        "makespan_s": res.makespan_ns / 1e9,
        "requests_per_sec": done_in / span_s if span_s > 0 else float("nan"),
        "ttft_mean_s": _mean([m.ttft_ns for m in recs]) / 1e9,
        "ttft_p50_s": _pct([m.ttft_ns for m in recs], 0.5) / 1e9,
        "ttft_p99_s": _pct([m.ttft_ns for m in recs], 0.99) / 1e9,
        "tpot_mean_s": _mean(tpots) / 1e9,
        "tpot_p99_s": _pct(tpots, 0.99) / 1e9,
        "tpot_by_class_s": by_class,
        "normalized_latency_mean_s": _mean([m.normalized_latency_ns for m in recs]) / 1e9,
        "e2e_mean_s": _mean([m.e2e_ns for m in recs]) / 1e9,
        "prefill_tokens": sum(m.prefill_tokens for m in recs),
        "redundant_tokens": sum(m.redundant_tokens for m in recs),
        "recovery_tokens": sum(r.recovery_tokens for r in res.requests),
        "prefill_compute_s": prefill_compute / 1e9,
        "prefill_wall_s": sum(r.prefill_wall_ns for r in res.requests) / 1e9,
        "load_stall_s": sum(m.load_stall_ns for m in recs) / 1e9,
        "wasted_fraction_by_turn": {str(k): v for k, v in
                                    wasted_fraction_by_turn(recs).items()},
        "load_imbalance_ratio": imb["ratio"],
        "load_imbalance_mean_ratio": imb["mean_ratio"],
        "load_windows": len(windows),
        "tier_traffic_bytes": dict(sorted(res.traffic.items())),
        "tier_bytes": res.tier_bytes,
        "advisory_lead_s": {"count": len(leads), "mean": _mean(leads),
                            "p50": _pct(leads, 0.5), "min": min(leads, default=float("nan")),
                            "max": max(leads, default=float("nan"))},
        "engine": dict(sorted(res.engine_stats.items())),
        "lost_caches": res.lost_caches,
        "anomalies": len(res.anomalies),
    }


# ---------------------------------------------------------------- comparison

COMPARE_METRICS = ("tpot_mean_s", "ttft_mean_s", "normalized_latency_mean_s",
                   "requests_per_sec", "load_imbalance_ratio", "makespan_s",
                   "prefill_compute_s")


class CompareError(ValueError):
    pass


def compare_runs(reports: Sequence[dict], baseline: int = 0,
                 names: Sequence[str] | None = None) -> list[dict]:
    """Ratio of each run's metrics to the baseline run's."""
    if len(reports) < 2:
        raise CompareError("need at least two reports")
    names = list(names) if names else [f"{r['policy']}_{r['concurrency']}_{r['seed']}"
                                       for r in reports]
    base = reports[baseline]
    bad = [names[i] for i, r in enumerate(reports) if r["trace_hash"] != base["trace_hash"]]
    if bad:
        raise CompareError(f"trace hash mismatch against {names[baseline]}: {', '.join(bad)}")
    rows = []
    for name, r in zip(names, reports):
        row = {"run": name, "baseline": names[baseline]}
        for k in COMPARE_METRICS:
            a, b = r.get(k), base.get(k)
            row[k] = (a / b) if (a is not None and b not in (None, 0) and
                                 not _isnan(a) and not _isnan(b)) else float("nan")
        rows.append(row)
    return rows


def _isnan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)


# ---------------------------------------------------------------- files

def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if hasattr(o, "value"):
        return o.value
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_run(res: RunResult, outdir: str | Path, extra: dict | None = None) -> dict:
    """Write report.json, requests.csv and the transfer/routing/load ledgers."""
    out = Path(outdir)
    rep = build_report(res)
    if extra:
        rep["provenance"] = extra
    atomic_write(out / "report.json", _json(rep))
    rows = [request_metrics(r).row() for r in res.requests]
    atomic_write(out / "requests.csv", _csv(rows, REQUEST_COLUMNS))
    atomic_write(out / "transfers.csv", _csv(
        [t.as_row() for t in res.transfers],
        ("time_ns", "end_ns", "node", "session", "layers", "from", "to", "bytes", "reason")))
    atomic_write(out / "routing.csv", _csv(
        [r.as_row() for r in res.routing],
        ("time_ns", "session", "turn", "kind", "node", "reason")))
    n = res.config.cluster.nodes
    atomic_write(out / "load.csv", _csv(
        [{"window_start_ns": t, **{f"node{i}": repr(v) for i, v in enumerate(w)}}
         for t, w in res.load_windows],
        ["window_start_ns"] + [f"node{i}" for i in range(n)]))
    return rep


def write_comparison(rows: Sequence[dict], path: str | Path) -> None:
    cols = ["run", "baseline", *COMPARE_METRICS]
    atomic_write(path, _csv([{k: (repr(v) if isinstance(v, float) else v)
                              for k, v in row.items()} for row in rows], cols))
