"""Normalization layers: BN, Batch Renormalization, the chi-squared form and MABN.

Everything is expressed through one configurable layer, :class:`NormLayer`.
Two knobs pick where statistics come from:

``bp_source``
    the statistics used to build ``Y`` and, with them, the whole backward
    pass: ``Y = (X - mu) / s`` (vanilla) or ``Y = X / s`` (modified) and
    ``dX = (dY - g - Y * psi) / s`` (vanilla) or ``dX = (dY - Y * psi) / s``.
``fp_source``
    the statistics the forward output should match. When they differ from the
    ``bp_source`` ones, ``Y`` is renormalized: ``Yh = r * Y + d`` with
    ``r = clip(s_bp / s_fp, 1/lam, lam)`` and
    ``d = clip((mu_bp - mu_fp) / s_fp, -d_max, d_max)``.

``r``, ``d`` and every moving statistic are constants for the backward pass.
With that, ``(vanilla, batch, batch)`` is BN, ``(vanilla, ema, batch)`` is
BRN and ``(modified, ema, sma)`` is MABN.

The standalone functions :func:`bn_forward`, :func:`bn_backward`,
:func:`modified_forward` and :func:`modified_backward` are plain batch
statistic implementations kept separate from the layer so they can act as
its reference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .stats import EmaState, SmaBuffer, batch_moments, chi_squared, grad_stats
from .tensor import LayerGradPair

FORMS = ("vanilla", "modified")
SOURCES = ("batch", "ema", "sma")


@dataclass(frozen=True)
class NormVariantConfig:
    form: str = "vanilla"
    fp_source: str = "batch"
    bp_source: str = "batch"
    momentum: float = 0.9
    sma_capacity: int = 16
    clip: float = 5.0
    brn_d_max: float = 2.5
    warmup_iters: int = 0
    eps: float = 1e-5
    affine: bool = True
    # None: centralize conv weights iff form == "modified"
    centralize_weights: Optional[bool] = None

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}, got {self.form!r}")
        for name in ("fp_source", "bp_source"):
            if getattr(self, name) not in SOURCES:
                raise ValueError(f"{name} must be one of {SOURCES}, got {getattr(self, name)!r}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.sma_capacity < 1:
            raise ValueError(f"sma_capacity must be >= 1, got {self.sma_capacity}")
        if self.clip < 1.0:
            raise ValueError(f"clip bound must be >= 1, got {self.clip}")
        if self.brn_d_max < 0 or self.warmup_iters < 0 or self.eps < 0:
            raise ValueError("brn_d_max, warmup_iters and eps must be non-negative")

    @property
    def uses_weight_centralization(self):
        if self.centralize_weights is None:
            return self.form == "modified"
        return bool(self.centralize_weights)

    @property
    def known_unstable(self):
        """Vanilla form with moving statistics in backward collapses in practice."""
        return self.form == "vanilla" and self.bp_source == "sma"

    def to_dict(self):
        return asdict(self)


def preset(name, **overrides) -> NormVariantConfig:
    """Named configurations: ``bn``, ``brn`` and ``mabn``."""
    name = name.lower()
    if name == "bn":
        cfg = NormVariantConfig(form="vanilla", fp_source="batch", bp_source="batch", momentum=0.9)
    elif name == "brn":
        cfg = NormVariantConfig(form="vanilla", fp_source="ema", bp_source="batch",
                                momentum=0.98, warmup_iters=100)
    elif name == "mabn":
        cfg = NormVariantConfig(form="modified", fp_source="ema", bp_source="sma",
                                momentum=0.98, sma_capacity=16, warmup_iters=100)
    else:
        raise ValueError(f"unknown preset {name!r}; expected bn, brn or mabn")
    return replace(cfg, **overrides)


def _expand(stat, ndim):
    """(G, C) -> (G, 1, C, 1, ...) for a grouped (G, b, C, *spatial) tensor."""
    return stat.reshape(stat.shape[0], 1, stat.shape[1], *([1] * (ndim - 3)))


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_axes(ndim):
    return tuple(a for a in range(ndim) if a != 1)


# -- batch-statistic reference implementations -----------------------------

def bn_forward(x, eps=0.0):
    """``Y = (X - mu_B) / sqrt(sigma2_B + eps)`` per channel. Returns ``(Y, cache)``."""
    x = np.asarray(x)
    mu, sigma2 = batch_moments(x)
    denom = sigma2 + eps
    if np.any(denom <= 0):
        raise ZeroDivisionError("sigma2 + eps is zero; constant input with eps=0")
    s = np.sqrt(denom)
    y = (x - _channel_view(mu, x.ndim)) / _channel_view(s, x.ndim)
    return y, (y, s)


def bn_backward(dy, cache):
    """``dX = (dY - g_B - Y * psi_B) / sigma_B``."""
    y, s = cache
    if np.shape(dy) != y.shape:
        raise ValueError(f"gradient shape {np.shape(dy)} does not match cached {y.shape}")
    g, psi = grad_stats(y, dy)
    n = y.ndim
    return (dy - _channel_view(g, n) - y * _channel_view(psi, n)) / _channel_view(s, n)


def modified_forward(x, eps=0.0):
    """``Y = X / sqrt(chi2_B + eps)`` per channel. Returns ``(Y, cache)``."""
    x = np.asarray(x)
    chi2 = chi_squared(x)
    denom = chi2 + eps
    if np.any(denom <= 0):
        raise ZeroDivisionError("chi2 + eps is zero; all-zero input with eps=0")
    chi = np.sqrt(denom)
    y = x / _channel_view(chi, x.ndim)
    return y, (y, chi)


def modified_backward(dy, cache):
    """``dX = (dY - Y * psi_B) / chi_B``."""
    y, chi = cache
    if np.shape(dy) != y.shape:
        raise ValueError(f"gradient shape {np.shape(dy)} does not match cached {y.shape}")
    _, psi = grad_stats(y, dy)
    n = y.ndim
    return (dy - y * _channel_view(psi, n)) / _channel_view(chi, n)


@dataclass(frozen=True)
class FinalizedNorm:
    """A normalizer frozen into the per-channel linear map ``scale * X + shift``."""

    scale: np.ndarray
    shift: np.ndarray

    def __call__(self, x):
        n = np.ndim(x)
        return x * _channel_view(self.scale, n) + _channel_view(self.shift, n)


def renorm_clip(ratio, lam):
    """Clip a renormalization ratio into ``[1/lam, lam]``."""
    return np.clip(ratio, 1.0 / lam, lam)


# -- weight centralization -------------------------------------------------

def weight_centralize(w) -> LayerGradPair:
    """Subtract each output channel's mean over all remaining axes.

    The pullback is the same projection: ``g - mean(g)`` per output channel.
    """
    w = np.asarray(w)
    axes = tuple(range(1, w.ndim))
    out = w - w.mean(axis=axes, keepdims=True)

    def pullback(g):
        return g - g.mean(axis=axes, keepdims=True)

    return LayerGradPair(out, pullback)


# -- the layer -------------------------------------------------------------

class NormLayer:
    """Per-channel normalization over ``[B, C, *spatial]`` inputs.

    ``norm_batch`` splits the incoming batch into contiguous groups of that
    many samples; statistics are computed inside each group. Each group owns
    its slot in the SMA ring buffers, while the EMA statistics are shared and
    updated once per iteration with the group-averaged observation.
    """

    def __init__(self, channels, config: NormVariantConfig | None = None, norm_batch=None,
                 name="norm"):
        self.channels = int(channels)
        self.config = config or NormVariantConfig()
        self.norm_batch = norm_batch
        self.name = name
        self.gamma = np.ones(self.channels)
        self.beta = np.zeros(self.channels)
        self.grads = {"gamma": np.zeros(self.channels), "beta": np.zeros(self.channels)}
        self.iteration = 0
        self.track = False
        self.last_stats: dict = {}
        self._cache = None
        self.n_groups = None
        a = self.config.momentum
        C = self.channels
        self.ema = {
            "mu": EmaState(np.zeros(C), a),
            "sigma2": EmaState(np.ones(C), a),
            "chi": EmaState(np.ones(C), a),
            "g": EmaState(np.zeros(C), a),
            "psi": EmaState(np.zeros(C), a),
        }
        self.sma: dict = {}

    # parameters -----------------------------------------------------------
    @property
    def params(self):
        if not self.config.affine:
            return {}
        return {"gamma": self.gamma, "beta": self.beta}

    def _ensure_buffers(self, n_groups):
        if self.n_groups is None:
            self.n_groups = n_groups
            shape = (n_groups, self.channels)
            m = self.config.sma_capacity
            self.sma = {k: SmaBuffer(m, shape) for k in ("mu", "sigma2", "chi2", "g", "psi")}
        elif self.n_groups != n_groups:
            raise ValueError(
                f"layer {self.name!r} was built for {self.n_groups} normalization groups, got {n_groups}"
            )

    def _group(self, x):
        B = x.shape[0]
        nb = self.norm_batch or B
        if B % nb:
            raise ValueError(f"batch of {B} is not divisible by normalization batch {nb}")
        G = B // nb
        return x.reshape((G, nb) + x.shape[1:]), G

    def _sources(self):
        if self.iteration < self.config.warmup_iters:
            return "batch", "batch"
        return self.config.fp_source, self.config.bp_source

    # forward ----------------------------------------------------------------
    def forward(self, x, training=True):
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, ...], got {x.shape}")
        if not training:
            scale, shift = self.finalize_for_inference()
            return x * _channel_view(scale, x.ndim).astype(x.dtype) + _channel_view(shift, x.ndim).astype(x.dtype)
        return self._forward_train(x)

    __call__ = forward

    def _forward_train(self, x):
        cfg = self.config
        eps = cfg.eps
        xg, G = self._group(x)
        self._ensure_buffers(G)
        nd = xg.ndim
        axes = (1,) + tuple(range(3, nd))
        vanilla = cfg.form == "vanilla"

        if vanilla:
            mu_b, s2_b = batch_moments(xg, axes)
            self.ema["mu"].update(mu_b.mean(axis=0))
            self.ema["sigma2"].update(s2_b.mean(axis=0))
            mu_sma = self.sma["mu"].push(mu_b)
            s2_sma = self.sma["sigma2"].push(s2_b)
            sources = {
                "batch": (mu_b, s2_b),
                "sma": (mu_sma, s2_sma),
                "ema": (np.broadcast_to(self.ema["mu"].value, mu_b.shape),
                        np.broadcast_to(self.ema["sigma2"].value, s2_b.shape)),
            }
        else:
            chi2_b = chi_squared(xg, axes)
            self.ema["chi"].update(np.sqrt(chi2_b).mean(axis=0))
            chi2_sma = self.sma["chi2"].push(chi2_b)
            zeros = np.zeros_like(chi2_b)
            sources = {
                "batch": (zeros, chi2_b),
                "sma": (zeros, chi2_sma),
                "ema": (zeros, np.broadcast_to(self.ema["chi"].value ** 2, chi2_b.shape)),
            }

        fp, bp = self._sources()
        mu_bp, v_bp = sources[bp]
        denom = v_bp + eps
        if np.any(denom <= 0):
            raise ZeroDivisionError("normalizer variance + eps is zero")
        s_bp = np.sqrt(denom)
        dt = x.dtype
        if vanilla:
            y = (xg - _expand(mu_bp, nd).astype(dt)) / _expand(s_bp, nd).astype(dt)
        else:
            y = xg / _expand(s_bp, nd).astype(dt)

        if fp == bp:
            r = d = None
            yh = y
        else:
            mu_fp, v_fp = sources[fp]
            fp_denom = v_fp + eps
            if np.any(fp_denom <= 0):
                raise ZeroDivisionError("renormalization statistic is zero")
            s_fp = np.sqrt(fp_denom)
            r = renorm_clip(s_bp / s_fp, cfg.clip)
            yh = y * _expand(r, nd).astype(dt)
            if vanilla:
                d = np.clip((mu_bp - mu_fp) / s_fp, -cfg.brn_d_max, cfg.brn_d_max)
                yh = yh + _expand(d, nd).astype(dt)
            else:
                d = None

        yh = yh.reshape(x.shape)
        z = yh * _channel_view(self.gamma, x.ndim).astype(dt) + _channel_view(self.beta, x.ndim).astype(dt)
        self._cache = {"y": y, "yh": yh, "s_bp": s_bp, "r": r, "bp": bp, "shape": x.shape}

        if self.track:
            x0 = xg[0]
            ax0 = (0,) + tuple(range(2, x0.ndim))
            mu0, s20 = batch_moments(x0, ax0)
            self.last_stats = {"mu": mu0, "sigma2": s20, "chi2": chi_squared(x0, ax0)}
            if not vanilla:
                self.last_stats["chi2_sma"] = self.sma["chi2"].mean()[0]
        self.iteration += 1
        return z

    # backward ---------------------------------------------------------------
    def backward(self, dz):
        if self._cache is None:
            raise RuntimeError(f"backward called on {self.name!r} before forward")
        c = self._cache
        self._cache = None
        dz = np.asarray(dz)
        if dz.shape != c["shape"]:
            raise ValueError(f"gradient shape {dz.shape} != output shape {c['shape']}")
        cfg = self.config
        n = dz.ndim
        red = _reduce_axes(n)
        if cfg.affine:
            self.grads["gamma"] = (dz * c["yh"]).sum(axis=red, dtype=np.float64)
            self.grads["beta"] = dz.sum(axis=red, dtype=np.float64)
        dyh = dz * _channel_view(self.gamma, n).astype(dz.dtype)

        y = c["y"]
        nd = y.ndim
        dy = dyh.reshape(y.shape)
        dt = dz.dtype
        if c["r"] is not None:
            dy = dy * _expand(c["r"], nd).astype(dt)
        axes = (1,) + tuple(range(3, nd))
        g_b, psi_b = grad_stats(y, dy, axes)
        g_sma = self.sma["g"].push(g_b)
        psi_sma = self.sma["psi"].push(psi_b)
        self.ema["g"].update(g_b.mean(axis=0))
        self.ema["psi"].update(psi_b.mean(axis=0))

        bp = c["bp"]
        if bp == "batch":
            g, psi = g_b, psi_b
        elif bp == "sma":
            g, psi = g_sma, psi_sma
        else:
            g = np.broadcast_to(self.ema["g"].value, g_b.shape)
            psi = np.broadcast_to(self.ema["psi"].value, psi_b.shape)

        psi_x = _expand(psi, nd).astype(dt)
        s_x = _expand(c["s_bp"], nd).astype(dt)
        if cfg.form == "vanilla":
            dx = (dy - _expand(g, nd).astype(dt) - y * psi_x) / s_x
        else:
            dx = (dy - y * psi_x) / s_x

        if self.track:
            self.last_stats["g"] = g_b[0]
            self.last_stats["psi"] = psi_b[0]
            if cfg.form == "modified":
                self.last_stats["psi_sma"] = psi_sma[0]
        return dx.reshape(dz.shape).astype(dz.dtype, copy=False)

    # inference --------------------------------------------------------------
    def finalize_for_inference(self):
        """Per-channel ``(scale, shift)`` with ``Z = scale * X + shift``."""
        eps = self.config.eps
        if self.config.form == "vanilla":
            denom = self.ema["sigma2"].value + eps
            if np.any(~np.isfinite(denom)) or np.any(denom <= 0):
                raise ValueError(f"layer {self.name!r}: nonpositive moving variance")
            inv = 1.0 / np.sqrt(denom)
            scale = self.gamma * inv
            shift = self.beta - self.gamma * self.ema["mu"].value * inv
        else:
            denom = self.ema["chi"].value ** 2 + eps
            if np.any(~np.isfinite(denom)) or np.any(denom <= 0):
                raise ValueError(f"layer {self.name!r}: nonpositive moving second moment")
            scale = self.gamma / np.sqrt(denom)
            shift = self.beta.copy()
        return scale, shift

    def finalize(self) -> FinalizedNorm:
        scale, shift = self.finalize_for_inference()
        return FinalizedNorm(scale, shift)

    def inference_reference(self, x):
        """EMA-statistics forward written out in normalize-then-affine form."""
        x = np.asarray(x, dtype=np.float64)
        eps = self.config.eps
        n = x.ndim
        if self.config.form == "vanilla":
            y = (x - _channel_view(self.ema["mu"].value, n)) / _channel_view(
                np.sqrt(self.ema["sigma2"].value + eps), n)
        else:
            y = x / _channel_view(np.sqrt(self.ema["chi"].value ** 2 + eps), n)
        return y * _channel_view(self.gamma, n) + _channel_view(self.beta, n)

    # checkpointing ----------------------------------------------------------
    def state_dict(self):
        d = {
            "gamma": self.gamma.copy(),
            "beta": self.beta.copy(),
            "iteration": self.iteration,
            "n_groups": self.n_groups,
            "ema": {k: v.state_dict() for k, v in self.ema.items()},
            "sma": {k: v.state_dict() for k, v in self.sma.items()},
        }
        return d

    def load_state_dict(self, d):
        self.gamma = np.array(d["gamma"], dtype=np.float64)
        self.beta = np.array(d["beta"], dtype=np.float64)
        self.iteration = int(d["iteration"])
        self.n_groups = None if d["n_groups"] is None else int(d["n_groups"])
        for k, v in d["ema"].items():
            self.ema[k].load_state_dict(v)
        self.sma = {}
        for k, v in d["sma"].items():
            buf = SmaBuffer(1)
            buf.load_state_dict(v)
            self.sma[k] = buf


def build_variant(config: NormVariantConfig, channels, norm_batch=None, name="norm") -> NormLayer:
    return NormLayer(channels, config, norm_batch=norm_batch, name=name)
