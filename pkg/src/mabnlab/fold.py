"""Inference-time folding of linear normalizers and a throughput benchmark.

A finalized BN/MABN layer is a per-channel affine map, so it can be absorbed
into the preceding convolution. Instance-level normalizers (group norm)
need statistics of each input and cannot; :func:`instance_norm_inference`
is that nonlinear contrast path.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .norm import FinalizedNorm
from .tensor import conv2d


@dataclass(frozen=True)
class FoldedConv:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad).output

    @property
    def n_params(self):
        return self.weight.size + self.bias.size


def fold(weight, bias, norm: FinalizedNorm, stride=1, pad=0) -> FoldedConv:
    """Absorb ``norm`` into a convolution: ``w' = scale * w``, ``b' = scale * b + shift``."""
    if not isinstance(norm, FinalizedNorm):
        raise TypeError("normalizer must be finalized (FinalizedNorm) before folding")
    weight = np.asarray(weight)
    scale = np.asarray(norm.scale)
    shift = np.asarray(norm.shift)
    co = weight.shape[0]
    if scale.shape != (co,) or shift.shape != (co,):
        raise ValueError(
            f"normalizer has {scale.shape[0]} channels but convolution has {co} output channels"
        )
    b = np.zeros(co, dtype=weight.dtype) if bias is None else np.asarray(bias)
    w_f = (weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1))).astype(weight.dtype)
    b_f = (scale * b + shift).astype(weight.dtype)
    return FoldedConv(w_f, b_f, stride, pad)


def instance_norm_inference(x, groups, gamma=None, beta=None, eps=1e-5):
    """Group-wise standardization of every instance, then a per-channel affine."""
    x = np.asarray(x)
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ValueError(f"{C} channels cannot be split into {groups} groups")
    xg = x.reshape(B, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    y = (centered / np.sqrt(var + eps)).reshape(x.shape)
    view = (1, C) + (1,) * (x.ndim - 2)
    if gamma is not None:
        y = y * np.asarray(gamma, dtype=x.dtype).reshape(view)
    if beta is not None:
        y = y + np.asarray(beta, dtype=x.dtype).reshape(view)
    return y


# -- benchmark ---------------------------------------------------------------------

@dataclass
class BenchReport:
    label: str
    iters_per_sec: float
    wall_time: float
    input_shape: list
    reps: int
    threads: int = 1
    runs: list = field(default_factory=list)

    def to_json(self, timing=True):
        d = {"format_version": 1, "label": self.label, "reps": self.reps,
             "input_shape": list(self.input_shape), "threads": self.threads}
        if timing:
            d["iters_per_sec"] = self.iters_per_sec
        return json.dumps(d, sort_keys=True)


def bench(model, input_shape, warmup=2, reps=5, iters_per_run=3, label="model", seed=0,
          threads=1, dtype=np.float32) -> BenchReport:
    """Median-of-``reps`` forward throughput of ``model`` on a random input."""
    if reps < 1 or iters_per_run < 1:
        raise ValueError("reps and iters_per_run must be >= 1")
    x = np.random.default_rng(seed).uniform(-1, 1, size=input_shape).astype(dtype)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            model(x)
        runs = []
        t_start = time.perf_counter()
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(iters_per_run):
                model(x)
            runs.append(iters_per_run / (time.perf_counter() - t0))
        wall = time.perf_counter() - t_start
    return BenchReport(label, statistics.median(runs), wall, list(input_shape), reps, threads, runs)


class ConvStack:
    """Synthetic conv stack used for folding checks and throughput comparisons.

    ``kind`` picks what follows every convolution:
    ``"unfolded"`` a finalized per-channel affine normalizer,
    ``"folded"`` nothing (the normalizer already lives in the conv weights),
    ``"instance"`` group normalization computed from each input.
    """

    def __init__(self, n_layers=6, in_channels=32, channels=64, kernel=3, seed=0,
                 dtype=np.float32, groups=32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.pad = kernel // 2
        self.groups = groups
        self.weights, self.norms = [], []
        c_in = in_channels
        for _ in range(n_layers):
            std = np.sqrt(2.0 / (c_in * kernel * kernel))
            self.weights.append((rng.normal(size=(channels, c_in, kernel, kernel)) * std).astype(self.dtype))
            scale = rng.uniform(0.5, 1.5, size=channels)
            shift = rng.uniform(-0.2, 0.2, size=channels)
            self.norms.append(FinalizedNorm(scale, shift))
            c_in = channels
        self.gammas = [n.scale.astype(self.dtype) for n in self.norms]
        self.betas = [n.shift.astype(self.dtype) for n in self.norms]
        self.folded = [fold(w, None, n, pad=self.pad) for w, n in zip(self.weights, self.norms)]

    def unfolded(self, x):
        h = x
        for w, n in zip(self.weights, self.norms):
            h = conv2d(h, w, pad=self.pad).output
            h = h * n.scale.astype(self.dtype)[:, None, None] + n.shift.astype(self.dtype)[:, None, None]
            h = np.maximum(h, 0)
        return h

    def folded_forward(self, x):
        h = x
        for f in self.folded:
            h = np.maximum(f(h), 0)
        return h

    def instance(self, x):
        h = x
        for w, g, b in zip(self.weights, self.gammas, self.betas):
            h = conv2d(h, w, pad=self.pad).output
            h = instance_norm_inference(h, self.groups, g, b)
            h = np.maximum(h, 0)
        return h

    def model(self, kind):
        return {"unfolded": self.unfolded, "folded": self.folded_forward, "instance": self.instance}[kind]

    def n_params(self, kind):
        conv = sum(w.size for w in self.weights)
        if kind == "folded":
            return sum(f.n_params for f in self.folded)
        return conv + 2 * sum(n.scale.size for n in self.norms)
