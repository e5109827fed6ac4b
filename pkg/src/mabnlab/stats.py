"""Batch statistics, moving-average estimators and statistic traces.

Per-channel statistics are reduced over every axis except the channel axis
(axis 1 for NCHW or ``[B, p]`` inputs). Variances are biased (divide by the
number of reduced elements); there is no Bessel correction anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


def _reduce_axes(x, axes):
    if axes is not None:
        return tuple(axes)
    if x.ndim < 2:
        raise ValueError(f"expected at least [B, C], got shape {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def _count(x, axes):
    n = 1
    for a in axes:
        n *= x.shape[a]
    if n == 0:
        raise ValueError("empty batch: cannot compute statistics over zero samples")
    return n


def batch_moments(x, axes=None):
    """Per-channel mean and biased variance."""
    x = np.asarray(x)
    axes = _reduce_axes(x, axes)
    _count(x, axes)
    mu = x.mean(axis=axes)
    centered = x - np.expand_dims(mu, axes)
    sigma2 = (centered * centered).mean(axis=axes)
    return mu, sigma2


def chi_squared(x, axes=None):
    """Per-channel second raw moment ``mean(x**2)``."""
    x = np.asarray(x)
    axes = _reduce_axes(x, axes)
    _count(x, axes)
    return (x * x).mean(axis=axes)


def grad_stats(y, dy, axes=None):
    """Per-channel ``g = mean(dy)`` and ``psi = mean(y * dy)``."""
    y = np.asarray(y)
    dy = np.asarray(dy)
    if y.shape != dy.shape:
        raise ValueError(f"shape mismatch: y{y.shape} vs dy{dy.shape}")
    axes = _reduce_axes(y, axes)
    _count(y, axes)
    return dy.mean(axis=axes), (y * dy).mean(axis=axes)


class BatchStats(NamedTuple):
    mu: np.ndarray
    sigma2: np.ndarray
    chi2: np.ndarray
    g: np.ndarray | None = None
    psi: np.ndarray | None = None

    @classmethod
    def forward(cls, x, axes=None):
        mu, sigma2 = batch_moments(x, axes)
        return cls(mu, sigma2, chi_squared(x, axes))


class EmaState:
    """Exponential moving average ``value <- a * value + (1 - a) * obs``."""

    def __init__(self, init, momentum):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.value = np.array(init, dtype=np.float64)
        self.momentum = float(momentum)

    def update(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite observation rejected")
        a = self.momentum
        self.value = a * self.value + (1.0 - a) * obs
        return self.value

    def state_dict(self):
        return {"value": self.value.copy(), "momentum": self.momentum}

    def load_state_dict(self, d):
        self.value = np.array(d["value"], dtype=np.float64)
        self.momentum = float(d["momentum"])


def ema_update(state: EmaState, obs) -> EmaState:
    state.update(obs)
    return state


class SmaBuffer:
    """Ring buffer holding the last ``capacity`` observations.

    The window always includes the newest push. With fewer than ``capacity``
    entries stored the mean runs over what is available.
    """

    def __init__(self, capacity, shape=()):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.ring = np.zeros((self.capacity,) + tuple(shape), dtype=np.float64)
        self.fill = 0
        self.pos = 0

    def push(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite observation rejected")
        self.ring[self.pos] = obs
        self.pos = (self.pos + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)
        return self.mean()

    def mean(self):
        if self.fill == 0:
            raise ValueError("empty buffer")
        if self.fill < self.capacity:
            return self.ring[: self.fill].mean(axis=0)
        return self.ring.mean(axis=0)

    def state_dict(self):
        return {"ring": self.ring.copy(), "fill": self.fill, "pos": self.pos}

    def load_state_dict(self, d):
        self.ring = np.array(d["ring"], dtype=np.float64)
        self.capacity = self.ring.shape[0]
        self.fill = int(d["fill"])
        self.pos = int(d["pos"])


def sma_push_and_mean(buffer: SmaBuffer, obs):
    return buffer.push(obs)


STAT_NAMES = ("mu", "sigma2", "chi2", "g", "psi", "chi2_sma", "psi_sma")


class TraceRecord(NamedTuple):
    iter: int
    layer: str
    stat: str
    l2norm: float


@dataclass
class StatTrace:
    """Append-only log of per-iteration statistic L2 norms."""

    records: list = field(default_factory=list)

    def record(self, iteration, layer, stats):
        if self.records and iteration < self.records[-1].iter:
            raise ValueError(
                f"iteration {iteration} precedes last recorded iteration {self.records[-1].iter}"
            )
        for name, value in stats.items():
            if name not in STAT_NAMES:
                raise ValueError(f"unknown statistic name {name!r}")
            v = np.asarray(value, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite statistic {name!r}")
            self.records.append(TraceRecord(int(iteration), str(layer), name, float(np.sqrt(v @ v))))

    def series(self, stat, layer=None):
        """Norms of one statistic in iteration order."""
        return np.array(
            [r.l2norm for r in self.records if r.stat == stat and (layer is None or r.layer == layer)]
        )

    def __len__(self):
        return len(self.records)


def record_trace(trace: StatTrace, iteration, layer, stats):
    trace.record(iteration, layer, stats)
