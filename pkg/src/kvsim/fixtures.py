"""Synthetic conversation corpora and small hand-sized traces.

``sharegpt_like`` imitates the shape of public chat logs: about a quarter of
conversations are single-turn, the rest have a heavy-tailed number of turns,
and prompt/response lengths are lognormal. ``heavy_tailed`` skews session
length much harder so that a few users dominate the work.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

from .workload import (DEFAULT_WORDS_PER_TOKEN, SessionScript, Trace, Turn, UserProfile,
                       assign_priorities, inject_advisories, synthesize_arrivals)


@dataclass(frozen=True)
class CorpusShape:
    single_turn_fraction: float = 0.266
    turn_tail_alpha: float = 1.1        # Pareto tail of the extra turns
    max_turns: int = 24
    prompt_median: float = 90.0
    prompt_sigma: float = 1.0
    response_median: float = 400.0
    response_sigma: float = 0.7
    max_prompt: int = 2048
    max_response: int = 1024
    max_context: int = 16384
    reading_speed: float = 1500.0       # words/minute (skimming)
    typing_speed: float = 600.0         # includes pasted text

    def __post_init__(self):
        if not 0 <= self.single_turn_fraction <= 1:
            raise ValueError("single_turn_fraction must lie in [0, 1]")
        if self.max_turns < 1 or self.turn_tail_alpha <= 0:
            raise ValueError("bad turn distribution")


HEAVY_TAILED = CorpusShape(single_turn_fraction=0.5, turn_tail_alpha=0.7, max_turns=60,
                           prompt_median=120.0, response_median=300.0)


def _lognormal_tokens(rng: random.Random, median: float, sigma: float, cap: int) -> int:
    return max(1, min(cap, round(rng.lognormvariate(math.log(median), sigma))))


def _words(tokens: int) -> int:
    return max(1, math.floor(tokens * DEFAULT_WORDS_PER_TOKEN + 0.5))


def synthetic_scripts(n_sessions: int, seed: int, shape: CorpusShape = CorpusShape(),
                      prefix: str = "s") -> list[SessionScript]:
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    rng = random.Random(seed)
    prof = UserProfile(shape.reading_speed, shape.typing_speed)
    out = []
    width = len(str(n_sessions - 1))
    for i in range(n_sessions):
        if rng.random() < shape.single_turn_fraction:
            n_turns = 1
        else:
            extra = math.floor(rng.paretovariate(shape.turn_tail_alpha))
            n_turns = min(shape.max_turns, 1 + extra)
            n_turns = max(2, n_turns)
        turns = []
        ctx = 0
        for _ in range(n_turns):
            p = _lognormal_tokens(rng, shape.prompt_median, shape.prompt_sigma, shape.max_prompt)
            r = _lognormal_tokens(rng, shape.response_median, shape.response_sigma,
                                  shape.max_response)
            if turns and ctx + p + r > shape.max_context:
                break
            ctx += p + r
            turns.append(Turn(p, r, _words(p), _words(r)))
        out.append(SessionScript(f"{prefix}{i:0{width}d}", "chat-llm", tuple(turns), prof))
    return out


def sharegpt_like(n_sessions: int = 1000, seed: int = 0) -> list[SessionScript]:
    return synthetic_scripts(n_sessions, seed, CorpusShape())


def heavy_tailed(n_sessions: int = 1000, seed: int = 0) -> list[SessionScript]:
    return synthetic_scripts(n_sessions, seed, HEAVY_TAILED, prefix="h")


def single_turn(n_sessions: int, seed: int = 0) -> list[SessionScript]:
    return synthetic_scripts(n_sessions, seed, replace(CorpusShape(), single_turn_fraction=1.0),
                             prefix="u")


def chat_trace(scripts: list[SessionScript], concurrency: int, seed: int = 0,
               miss_fraction: float = 0.0, high_fraction: float = 0.0,
               speed_sigma: float = 0.15) -> Trace:
    """Closed-loop chat trace with advisories ahead of every later turn."""
    if high_fraction:
        scripts = assign_priorities(scripts, high_fraction, seed + 7)
    base = synthesize_arrivals(scripts, concurrency, seed, speed_sigma=speed_sigma)
    return inject_advisories(base, miss_fraction, seed + 1)


# --------------------------------------------------------------- micro trace

MICRO_PROFILE = UserProfile(reading_speed=60.0, typing_speed=60.0)  # one word per second


def micro_scripts() -> list[SessionScript]:
    """Three sessions small enough to follow by hand.

    With one word per second, arrival deltas in seconds equal word counts.
    """
    a = SessionScript("a", "chat-llm", (Turn(64, 2, 1, 2), Turn(32, 2, 1, 1)), MICRO_PROFILE)
    b = SessionScript("b", "chat-llm", (Turn(128, 3, 2, 1),), MICRO_PROFILE)
    c = SessionScript("c", "chat-llm", (Turn(16, 1, 3, 1), Turn(48, 2, 1, 1)), MICRO_PROFILE)
    return [a, b, c]


def micro_trace() -> Trace:
    return inject_advisories(synthesize_arrivals(micro_scripts(), 3, 0, speed_sigma=0.0),
                             0.0, 0)
