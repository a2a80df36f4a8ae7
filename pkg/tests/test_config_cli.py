import json

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES
from kvsim import ClusterConfig, EngineConfig, GpuProfile, LinkProfile, SchedulerConfig, SimConfig
from kvsim.cli import main
from kvsim.config import (ConfigError, ExperimentConfig, WorkloadConfig, build, dump_yaml,
                          load_config, parse_override)
from kvsim.workload import load_trace, trace_hash

pos = st.floats(1e-3, 1e12, allow_nan=False)
gpus = st.builds(GpuProfile, prefill_throughput=pos, decode_base_ms=pos,
                 hbm_capacity=st.integers(1, 10**12), num_layers=st.integers(1, 96))
links = st.builds(LinkProfile, pcie_bandwidth=pos, disk_bandwidth=pos, network_bandwidth=pos)
clusters = st.builds(
    ClusterConfig, nodes=st.integers(1, 64), gpu=gpus, links=links,
    host_capacity=st.integers(1, 10**13), block_tokens=st.sampled_from([8, 16, 32]),
    decode_points=st.one_of(st.none(), st.just(((1, 10.0), (64, 30.0)))),
    demand_preempts_prefetch=st.booleans())
engines = st.builds(EngineConfig, max_batch=st.integers(1, 256),
                    prefill_mode=st.sampled_from(["interleave", "decode_priority"]),
                    latency_budget_ms=st.one_of(st.none(), pos))
schedulers = st.builds(SchedulerConfig, load_metric=st.sampled_from(["requests", "tokens"]),
                       count_planned=st.booleans(), owner_slack=st.integers(0, 4))
sims = st.builds(SimConfig, measure_fraction=st.floats(0.1, 1.0), load_window_s=pos)
workloads = st.builds(
    WorkloadConfig, synthetic=st.sampled_from(["sharegpt", "heavy", "single_turn"]),
    sessions=st.integers(1, 5000), users=st.lists(st.integers(1, 512), min_size=1,
                                                  max_size=4).map(tuple),
    miss_fraction=st.floats(0, 1), high_fraction=st.floats(0, 1),
    reshape=st.one_of(st.none(), st.tuples(st.integers(1, 4096), st.integers(1, 64))))
configs = st.builds(ExperimentConfig, cluster=clusters, engine=engines, scheduler=schedulers,
                    sim=sims, workload=workloads,
                    policies=st.lists(st.sampled_from(["recompute", "retain", "swap",
                                                       "symphony"]),
                                      min_size=1, max_size=4, unique=True).map(tuple),
                    seed=st.integers(0, 2**31))


@settings(max_examples=PROPERTY_CASES)
@given(configs)
def test_config_survives_yaml(cfg):
    assert build(ExperimentConfig, yaml.safe_load(dump_yaml(cfg))) == cfg


def test_overrides_beat_the_file(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("cluster:\n  nodes: 4\n  links:\n    disk_bandwidth: 6e9\nseed: 3\n")
    cfg = load_config(p, ["cluster.nodes=2", "workload.users=[8, 16]"])
    assert cfg.cluster.nodes == 2
    assert cfg.cluster.links.disk_bandwidth == 6e9  # YAML 1.1 reads 6e9 as a string
    assert cfg.workload.users == (8, 16)
    assert cfg.seed == 3
    assert load_config().cluster.nodes == 8


@pytest.mark.parametrize("text, msg", [
    ("cluster:\n  nodez: 4\n", "unknown key"),
    ("cluster:\n  nodes: four\n", "expected a number"),
    ("cluster:\n  nodes: 2.5\n", "expected an integer"),
    ("cluster:\n  nodes: 0\n", "at least one node"),
    ("sim:\n  record_timeline: 1\n", "true/false"),
    ("policies: [magic]\n", "unknown policy"),
    ("workload:\n  reshape: [1, 2, 3]\n", "expected 2 items"),
    ("- a\n", "top level"),
    ("a: [\n", "invalid YAML"),
])
def test_bad_configs(tmp_path, text, msg):
    p = tmp_path / "e.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=msg):
        load_config(p)


def test_parse_override():
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("x=") == (["x"], None)
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        load_config(None, ["seed.x=1"])


def test_build_trace_reshape_and_sizes():
    cfg = load_config(None, ["workload.sessions=12", "workload.reshape=[1024, 1]"])
    t = cfg.build_trace(4)
    assert len(t.sessions) == 12 and t.concurrency_target == 4
    assert {(x.prompt_tokens, x.response_tokens) for s in t.sessions for x in s.turns} == {
        (1024, 1)}


# ---------------------------------------------------------------- CLI

SMALL = ["--sessions", "8", "--nodes", "2"]


def test_cli_round_trip(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["gen-trace", *SMALL, "--users", "3", "-o", str(trace)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["sessions"] == 8 and summary["concurrency_target"] == 3
    t = load_trace(trace)

    out = tmp_path / "runs"
    args = ["run", *SMALL, "--trace", str(trace), "--policies", "recompute", "symphony",
            "--output", str(out), "--workers", "1"]
    assert main(args) == 0
    cells = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert cells == ["recompute_3_0", "symphony_3_0"]
    rep = json.loads((out / "symphony_3_0" / "report.json").read_text())
    assert rep["trace_hash"] == trace_hash(t) and rep["requests"] > 0
    assert (out / "config.yaml").exists()
    for f in ("requests.csv", "transfers.csv", "routing.csv", "load.csv"):
        assert (out / "recompute_3_0" / f).exists()

    # an existing cell is not clobbered without --force
    assert main(args) == 1
    assert main(args + ["--force"]) == 0

    capsys.readouterr()
    assert main(["compare", str(out / "recompute_3_0"), str(out / "symphony_3_0"),
                 "-o", str(tmp_path / "cmp.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("recompute_3_0: tpot_mean_s=1.000")
    assert (tmp_path / "cmp.csv").read_text().startswith("run,baseline,")

    other = tmp_path / "other"
    assert main(["run", "--sessions", "9", "--nodes", "2", "--users", "3", "--policies",
                 "recompute", "--output", str(other), "--workers", "1"]) == 0
    # different workloads are not comparable
    assert main(["compare", str(out / "recompute_3_0"), str(other / "recompute_3_0")]) == 2
    assert main(["compare", str(out / "recompute_3_0"), str(out / "symphony_3_0"),
                 "--baseline", "nope"]) == 2


def test_cli_validate_config(tmp_path, capsys):
    p = tmp_path / "e.yaml"
    p.write_text("cluster:\n  nodes: 3\n")
    assert main(["validate-config", str(p), "--set", "seed=9"]) == 0
    cfg = build(ExperimentConfig, yaml.safe_load(capsys.readouterr().out))
    assert (cfg.cluster.nodes, cfg.seed) == (3, 9)
    p.write_text("cluster:\n  gpus: 3\n")
    assert main(["validate-config", str(p)]) == 2
    assert main(["validate-config", str(tmp_path / "missing.yaml")]) == 2


def test_cli_prefill_heavy_flag(tmp_path):
    trace = tmp_path / "t.jsonl"
    assert main(["gen-trace", "--sessions", "5", "--users", "2", "--prefill-heavy",
                 "-o", str(trace)]) == 0
    t = load_trace(trace)
    assert all(x.prompt_tokens == 1024 and x.response_tokens == 1
               for s in t.sessions for x in s.turns)
