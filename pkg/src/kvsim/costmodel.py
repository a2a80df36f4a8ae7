"""Analytic timing and sizing for prefill, decode and data movement.

Every duration is computed exactly (rational arithmetic) and rounded half-up
to an integer number of nanoseconds; the ``*_time`` helpers return seconds for
callers that want them, the ``*_ns`` helpers feed the event loop.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Protocol, Sequence

NS_PER_S = 10**9
INT64_MAX = 2**63 - 1


def _frac(x: float | int | Fraction) -> Fraction:
    # str() keeps decimal literals like 1e-05 exact instead of their binary expansion
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(x))


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def seconds_to_ns(seconds: float | Fraction) -> int:
    return round_half_up(_frac(seconds) * NS_PER_S)


def ns_to_seconds(ns: int) -> float:
    return ns / NS_PER_S


class Link(enum.Enum):
    PCIE_H2D = "pcie_h2d"
    PCIE_D2H = "pcie_d2h"
    DISK_READ = "disk_read"
    DISK_WRITE = "disk_write"
    NETWORK = "network"


class DecodeLatencyModel(Protocol):
    def step_ns(self, batch_size: int) -> int: ...


@dataclass(frozen=True)
class AffineDecodeModel:
    """Per-step latency ``t0 * (1 + b / b_half)``."""

    base_ms: float = 12.0
    half_batch: float = 16.0

    def step_ns(self, batch_size: int) -> int:
        return _affine_step_ns(self.base_ms, self.half_batch, batch_size)


@lru_cache(maxsize=4096)
def _affine_step_ns(base_ms: float, half_batch: float, batch_size: int) -> int:
    if batch_size < 1:
        raise ValueError(f"decode batch size must be >= 1, got {batch_size}")
    t0 = _frac(base_ms) / 1000
    return round_half_up(t0 * (1 + Fraction(batch_size) / _frac(half_batch)) * NS_PER_S)


@dataclass(frozen=True)
class PiecewiseDecodeModel:
    """Linear interpolation over measured ``(batch_size, step_ms)`` points.

    Beyond the last point the final segment's slope is extended.
    """

    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("need at least two measured points")
        xs = [p[0] for p in self.points]
        if xs != sorted(xs) or len(set(xs)) != len(xs):
            raise ValueError("batch sizes must be strictly increasing")

    def step_ns(self, batch_size: int) -> int:
        if batch_size < 1:
            raise ValueError(f"decode batch size must be >= 1, got {batch_size}")
        xs = [p[0] for p in self.points]
        i = bisect.bisect_left(xs, batch_size)
        i = min(max(i, 1), len(xs) - 1)
        (x0, y0), (x1, y1) = self.points[i - 1], self.points[i]
        y = _frac(y0) + (_frac(y1) - _frac(y0)) * Fraction(batch_size - x0, x1 - x0)
        return round_half_up(y / 1000 * NS_PER_S)


@dataclass(frozen=True)
class GpuProfile:
    prefill_throughput: float = 8192.0  # tokens/s
    decode_base_ms: float = 12.0
    decode_half_batch: float = 16.0
    hbm_capacity: int = 64_000_000_000  # bytes left for K,V after weights
    kv_bytes_per_token: int = 1_100_000
    num_layers: int = 32
    max_context: int = 131_072

    def __post_init__(self):
        for name in ("prefill_throughput", "decode_base_ms", "decode_half_batch",
                     "hbm_capacity", "kv_bytes_per_token", "num_layers", "max_context"):
            if not getattr(self, name) > 0:
                raise ValueError(f"GpuProfile.{name} must be > 0")
        if self.kv_bytes_per_token * self.max_context > INT64_MAX:
            raise ValueError("kv_bytes_per_token * max_context overflows int64")

    @property
    def decode_model(self) -> DecodeLatencyModel:
        return AffineDecodeModel(self.decode_base_ms, self.decode_half_batch)


@dataclass(frozen=True)
class LinkProfile:
    pcie_bandwidth: float = 25e9  # bytes/s
    disk_bandwidth: float = 3e9
    network_bandwidth: float = 12.5e9
    per_transfer_latency: float = 10e-6  # s

    def __post_init__(self):
        for name in ("pcie_bandwidth", "disk_bandwidth", "network_bandwidth",
                     "per_transfer_latency"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LinkProfile.{name} must be > 0")

    def bandwidth(self, link: Link) -> float:
        if link in (Link.PCIE_H2D, Link.PCIE_D2H):
            return self.pcie_bandwidth
        if link in (Link.DISK_READ, Link.DISK_WRITE):
            return self.disk_bandwidth
        if link is Link.NETWORK:
            return self.network_bandwidth
        raise ValueError(f"unknown link {link!r}")


def kv_bytes(tokens: int, profile: GpuProfile) -> int:
    return tokens * profile.kv_bytes_per_token


def kv_bytes_per_layer(tokens: int, profile: GpuProfile) -> int:
    return -(-kv_bytes(tokens, profile) // profile.num_layers)


def prefill_ns(tokens: int, profile: GpuProfile) -> int:
    if tokens < 1:
        raise ValueError("prefill of zero tokens")
    return _prefill_ns(tokens, profile.prefill_throughput)


@lru_cache(maxsize=65536)
def _prefill_ns(tokens: int, throughput: float) -> int:
    return round_half_up(Fraction(tokens * NS_PER_S) / _frac(throughput))


def prefill_time(tokens: int, profile: GpuProfile) -> float:
    return ns_to_seconds(prefill_ns(tokens, profile))


def decode_step_ns(batch_size: int, profile: GpuProfile,
                   model: DecodeLatencyModel | None = None) -> int:
    if batch_size < 1:
        raise ValueError(f"decode batch size must be >= 1, got {batch_size}")
    if model is None:
        return _affine_step_ns(profile.decode_base_ms, profile.decode_half_batch, batch_size)
    return model.step_ns(batch_size)


def decode_step_time(batch_size: int, profile: GpuProfile,
                     model: DecodeLatencyModel | None = None) -> float:
    return ns_to_seconds(decode_step_ns(batch_size, profile, model))


def transfer_ns(nbytes: int, link: Link, profile: LinkProfile) -> int:
    if not isinstance(link, Link):
        raise ValueError(f"unknown link {link!r}")
    if nbytes < 0:
        raise ValueError("negative transfer size")
    return _transfer_ns(nbytes, profile.bandwidth(link), profile.per_transfer_latency)


@lru_cache(maxsize=65536)
def _transfer_ns(nbytes: int, bandwidth: float, latency: float) -> int:
    return round_half_up((_frac(latency) + Fraction(nbytes) / _frac(bandwidth)) * NS_PER_S)


def transfer_time(nbytes: int, link: Link, profile: LinkProfile) -> float:
    return ns_to_seconds(transfer_ns(nbytes, link, profile))


@dataclass(frozen=True)
class CostModel:
    """Bundles a GPU profile, link profile and decode-latency model for one node."""

    gpu: GpuProfile = field(default_factory=GpuProfile)
    links: LinkProfile = field(default_factory=LinkProfile)
    decode: DecodeLatencyModel | None = None

    def prefill_ns(self, tokens: int) -> int:
        return prefill_ns(tokens, self.gpu)

    def decode_step_ns(self, batch_size: int) -> int:
        return decode_step_ns(batch_size, self.gpu, self.decode)

    def transfer_ns(self, nbytes: int, link: Link) -> int:
        return transfer_ns(nbytes, link, self.links)

    def kv_bytes(self, tokens: int) -> int:
        return kv_bytes(tokens, self.gpu)


def piecewise_from(points: Sequence[tuple[int, float]]) -> PiecewiseDecodeModel:
    return PiecewiseDecodeModel(tuple((int(b), float(ms)) for b, ms in points))
