import csv
import json
import math

import pytest

from kvsim import ClusterConfig, RunConfig, run
from kvsim.fixtures import micro_trace
from kvsim.metrics import (CompareError, RequestMetrics, build_report, compare_runs,
                           imbalance_windows, measurement_window, wasted_fraction_by_turn,
                           write_run)


def rm(turn, prefill, redundant, first=100, finish=400, out=4, high=False):
    return RequestMetrics("s", turn, 0, 0, 0, first, finish, out, prefill, redundant, 0, 0, 0,
                          high)


def test_request_metric_derivations():
    m = rm(0, 10, 0)
    assert (m.ttft_ns, m.e2e_ns, m.tpot_ns, m.normalized_latency_ns) == (100, 400, 100.0, 100.0)
    assert rm(0, 10, 0, out=1).tpot_ns is None
    assert rm(0, 1, 0, high=True).row()["priority"] == "high"


def test_wasted_fraction_pools_tokens_per_turn():
    recs = [rm(0, 100, 0), rm(1, 300, 200), rm(1, 100, 0), rm(2, 0, 0)]
    assert wasted_fraction_by_turn(recs) == {0: 0.0, 1: 0.5}


def test_measurement_window_trims_both_ends():
    assert measurement_window(1000, 0.8) == (100, 900)
    assert measurement_window(1000, 1.0) == (0, 1000)


@pytest.fixture(scope="module")
def micro():
    cfg = RunConfig(ClusterConfig(nodes=2))
    return {p: run(micro_trace(), cfg, p) for p in ("recompute", "symphony")}


def test_report_on_the_micro_trace(micro):
    rec, sym = build_report(micro["recompute"]), build_report(micro["symphony"])
    assert rec["requests"] == sym["requests"] == 5 and rec["sessions"] == 3
    # turn 1 of a (history 66) and c (history 17) recomputed under Recompute
    assert rec["redundant_tokens"] == 83 and sym["redundant_tokens"] == 0
    assert rec["prefill_tokens"] - sym["prefill_tokens"] == 83
    assert rec["wasted_fraction_by_turn"]["1"] == pytest.approx(83 / (83 + 80))
    assert sym["prefill_compute_s"] < rec["prefill_compute_s"]
    assert sym["tpot_by_class_s"]["high"] is None
    assert sym["advisory_lead_s"]["count"] == 2


def test_compare_runs(micro):
    reps = [build_report(micro[p]) for p in ("recompute", "symphony")]
    rows = compare_runs(reps)
    assert rows[0]["tpot_mean_s"] == 1.0 and rows[0]["baseline"] == "recompute_3_0"
    assert rows[1]["prefill_compute_s"] < 1.0
    with pytest.raises(CompareError):
        compare_runs(reps[:1])
    bad = dict(reps[1], trace_hash="0" * 16)
    with pytest.raises(CompareError, match="mismatch"):
        compare_runs([reps[0], bad])
    zero = dict(reps[1], makespan_s=0.0)
    assert math.isnan(compare_runs([zero, reps[0]])[1]["makespan_s"])


def test_write_run_files(micro, tmp_path):
    rep = write_run(micro["symphony"], tmp_path, extra={"note": "x"})
    disk = json.loads((tmp_path / "report.json").read_text())
    assert disk["provenance"] == {"note": "x"}
    assert disk["trace_hash"] == rep["trace_hash"]
    with (tmp_path / "requests.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 and {r["node"] for r in rows} == {"0"}
    header = (tmp_path / "load.csv").read_text().splitlines()[0]
    assert header == "window_start_ns,node0,node1"
    assert not list(tmp_path.glob(".*"))  # no temp files left behind


def test_imbalance_windows_stay_inside_the_span(micro):
    res = micro["symphony"]
    lo, hi = measurement_window(res.makespan_ns, res.config.sim.measure_fraction)
    w = imbalance_windows(res)
    assert all(len(x) == 2 for x in w)
    assert len(w) <= len([t for t, _ in res.load_windows if lo <= t < hi])
