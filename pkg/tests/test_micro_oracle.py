"""The micro trace, followed by hand.

Constants: prefill 8192 tok/s, decode step 12 ms * (1 + b/16), 1.1 MB per
token, 16-token blocks, PCIe 25 GB/s, SSD 3 GB/s, 10 us per transfer.
Every request lands on node 0: each arrives to an idle cluster and ties go
to the lowest node id. Nothing is ever evicted (64 GB of DEVICE), so the
advisories cause no transfers.

A prefill of p new tokens also produces the first output token, so the
session grows by p + 1 tokens and the persist covers every block that
became allocated, staged DEVICE->HOST over PCIe and then written HOST->DISK.

  a0  arrive 1.0 s, 64 tok   prefill 64/8192 s            =  7 812 500 ns
      65 tok -> 5 blocks = 80 tok = 88.0 MB
      stage 88e6/25e9 + 10 us                             =  3 530 000
      disk  88e6/3e9  + 10 us = 29 343 333.3              = 29 343 333
      one decode step (b=1) 12.75 ms                      = 12 750 000
  b0  arrive 2.0 s, 128 tok  prefill                      = 15 625 000
      129 tok -> 9 blocks = 144 tok = 158.4 MB
      stage 158.4e6/25e9 + 10 us                          =  6 346 000
      disk  158.4e6/3e9  + 10 us                          = 52 810 000
      two decode steps
  c0  arrive 3.0 s, 16 tok   prefill                      =  1 953 125
      17 tok -> 2 blocks = 32 tok = 35.2 MB
      stage 35.2e6/25e9 + 10 us                           =  1 418 000
      disk  35.2e6/3e9  + 10 us = 11 743 333.3            = 11 743 333
      one response token, done when the prefill ends
  adv a1 at a0 done + 2 s;  adv c1 at c0 done + 1 s
  a1  arrive a0 done + 3 s, 32 tok, history 66 on DEVICE   =  3 906 250
      99 tok -> 7 blocks, 2 new = 35.2 MB: stage 1 418 000, disk 11 743 333
  c1  arrive c0 done + 2 s, 48 tok, history 17 on DEVICE   =  5 859 375
      66 tok -> 5 blocks, 3 new = 52.8 MB
      stage 52.8e6/25e9 + 10 us                           =  2 122 000
      disk  52.8e6/3e9  + 10 us                           = 17 610 000
"""

import time

from kvsim import ClusterConfig, RunConfig, SimConfig, run
from kvsim.fixtures import micro_trace

A0 = 1_000_000_000
A0_PF = A0 + 7_812_500
A0_ST = A0_PF + 3_530_000
A0_DONE = A0_PF + 12_750_000
B0 = 2_000_000_000
B0_PF = B0 + 15_625_000
B0_ST = B0_PF + 6_346_000
C0 = 3_000_000_000
C0_PF = C0 + 1_953_125
C0_ST = C0_PF + 1_418_000
A1 = A0_DONE + 3_000_000_000
A1_PF = A1 + 3_906_250
A1_ST = A1_PF + 1_418_000
C1 = C0_PF + 2_000_000_000
C1_PF = C1 + 5_859_375
C1_ST = C1_PF + 2_122_000

ORACLE = [
    (A0, "TraceArrival", -1, ("arrival", "a", 0)),
    (A0_PF, "EngineStep", 0, ("prefill", "a", 0)),
    (A0_ST, "WriteComplete", 0, ("stage", "a", "HOST")),
    (A0_DONE, "EngineStep", 0, ("decode", 1)),
    (A0_ST + 29_343_333, "WriteComplete", 0, ("persist", "a", "DISK")),
    (B0, "TraceArrival", -1, ("arrival", "b", 0)),
    (B0_PF, "EngineStep", 0, ("prefill", "b", 0)),
    (B0_ST, "WriteComplete", 0, ("stage", "b", "HOST")),
    (B0_PF + 12_750_000, "EngineStep", 0, ("decode", 1)),
    (B0_PF + 25_500_000, "EngineStep", 0, ("decode", 1)),
    (B0_ST + 52_810_000, "WriteComplete", 0, ("persist", "b", "DISK")),
    (C0, "TraceArrival", -1, ("arrival", "c", 0)),
    (C0_PF, "EngineStep", 0, ("prefill", "c", 0)),
    (C0_ST, "WriteComplete", 0, ("stage", "c", "HOST")),
    (C0_ST + 11_743_333, "WriteComplete", 0, ("persist", "c", "DISK")),
    (A0_DONE + 2_000_000_000, "AdvisoryDelivery", -1, ("advisory", "a", 1)),
    (C0_PF + 1_000_000_000, "AdvisoryDelivery", -1, ("advisory", "c", 1)),
    (A1, "TraceArrival", -1, ("arrival", "a", 1)),
    (A1_PF, "EngineStep", 0, ("prefill", "a", 1)),
    (A1_ST, "WriteComplete", 0, ("stage", "a", "HOST")),
    (A1_PF + 12_750_000, "EngineStep", 0, ("decode", 1)),
    (A1_ST + 11_743_333, "WriteComplete", 0, ("persist", "a", "DISK")),
    (C1, "TraceArrival", -1, ("arrival", "c", 1)),
    (C1_PF, "EngineStep", 0, ("prefill", "c", 1)),
    (C1_ST, "WriteComplete", 0, ("stage", "c", "HOST")),
    (C1_PF + 12_750_000, "EngineStep", 0, ("decode", 1)),
    (C1_ST + 17_610_000, "WriteComplete", 0, ("persist", "c", "DISK")),
]


def micro_run():
    cfg = RunConfig(ClusterConfig(nodes=2), sim=SimConfig(record_timeline=True,
                                                          check_invariants=True))
    return run(micro_trace(), cfg, "symphony")


def test_frozen_values_spelled_out():
    # a few absolute times, so a typo in the constants above cannot hide
    assert A0_DONE == 1_020_562_500
    assert A1 == 4_020_562_500
    assert C1 == 5_001_953_125
    assert C1_ST + 17_610_000 == 5_027_544_500


def test_micro_timeline_matches_oracle():
    t0 = time.perf_counter()
    res = micro_run()
    elapsed = time.perf_counter() - t0
    assert len(ORACLE) <= 40
    assert res.timeline == ORACLE
    assert elapsed < 1.0


def test_micro_requests():
    res = micro_run()
    got = {(r.session_id, r.turn_index): (r.node, r.first_token_ns, r.finish_ns,
                                          r.prefill_tokens) for r in res.requests}
    assert got == {
        ("a", 0): (0, A0_PF, A0_DONE, 64),
        ("b", 0): (0, B0_PF, B0_PF + 25_500_000, 128),
        ("c", 0): (0, C0_PF, C0_PF, 16),
        ("a", 1): (0, A1_PF, A1_PF + 12_750_000, 32),
        ("c", 1): (0, C1_PF, C1_PF + 12_750_000, 48),
    }
    assert res.makespan_ns == C1_PF + 12_750_000
