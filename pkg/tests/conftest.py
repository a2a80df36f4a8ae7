import dataclasses

from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from kvsim import (ClusterConfig, EngineConfig, GpuProfile, RunConfig, SchedulerConfig,
                   SimConfig)
from kvsim.fixtures import chat_trace
from kvsim.workload import SessionScript, Turn, UserProfile

settings.register_profile(
    "kvsim", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile("kvsim")

PROPERTY_CASES = 1000


@dataclasses.dataclass(frozen=True)
class Scenario:
    scripts: tuple
    users: int
    nodes: int
    policy: str
    device_tokens: int
    miss_fraction: float
    high_fraction: float
    seed: int
    budget_ms: float | None
    owner_slack: int = 1

    def trace(self):
        return chat_trace(list(self.scripts), self.users, self.seed,
                          miss_fraction=self.miss_fraction, high_fraction=self.high_fraction)

    def config(self, **sim) -> RunConfig:
        gpu = GpuProfile(hbm_capacity=self.device_tokens * 1_100_000)
        cluster = ClusterConfig(nodes=self.nodes, gpu=gpu, host_capacity=200 * 1_100_000 * 16)
        return RunConfig(cluster=cluster, engine=EngineConfig(latency_budget_ms=self.budget_ms),
                         scheduler=SchedulerConfig(owner_slack=self.owner_slack),
                         sim=SimConfig(**sim))


turns = st.builds(Turn, prompt_tokens=st.integers(1, 300), response_tokens=st.integers(1, 24),
                  prompt_words=st.integers(0, 6), response_words=st.integers(0, 6))


@st.composite
def scenarios(draw, policies=("recompute", "retain", "swap", "symphony"), min_nodes=1):
    n = draw(st.integers(1, 6))
    scripts = []
    for i in range(n):
        ts = tuple(draw(st.lists(turns, min_size=1, max_size=4)))
        speed = draw(st.sampled_from([120.0, 600.0, 3000.0]))
        scripts.append(SessionScript(f"s{i}", "m", ts, UserProfile(speed, speed)))
    largest = max(sum(t.prompt_tokens + t.response_tokens for t in s.turns) for s in scripts)
    # the biggest session plus a few blocks of slack; small enough to force eviction
    device = (largest // 16 + draw(st.integers(2, 12))) * 16
    users = draw(st.integers(max(1, n - 2), n))
    return Scenario(tuple(scripts), users, draw(st.integers(min_nodes, 3)),
                    draw(st.sampled_from(policies)), device,
                    draw(st.sampled_from([0.0, 0.0, 0.5, 1.0])),
                    draw(st.sampled_from([0.0, 0.0, 0.5])), draw(st.integers(0, 2**16)),
                    draw(st.sampled_from([None, None, 15.0])), draw(st.integers(0, 1)))
