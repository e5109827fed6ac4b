"""Dense-tensor layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every layer
function returns a :class:`LayerGradPair`: the forward output plus a
one-shot ``backward`` closure holding whatever the pullback needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class LayerGradPair:
    output: np.ndarray
    _pullback: Callable = field(repr=False)
    _used: bool = field(default=False, repr=False)

    def backward(self, grad):
        if self._used:
            raise RuntimeError("backward already called for this forward pass")
        grad = np.asarray(grad)
        if grad.shape != self.output.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match output shape {self.output.shape}"
            )
        self._used = True
        return self._pullback(grad)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite values in input")


def conv2d(x, w, b=None, stride=1, pad=0) -> LayerGradPair:
    """Cross-correlation of ``x[B,C,H,W]`` with ``w[Co,C,kh,kw]``.

    ``backward(dy)`` returns ``(dx, dw, db)``; ``db`` is ``None`` when no
    bias was given.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got x{x.shape} w{w.shape}")
    B, C, H, W = x.shape
    Co, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"input channels {C} != kernel channels {Cw} (x{x.shape}, w{w.shape})")
    if b is not None and np.shape(b) != (Co,):
        raise ShapeError(f"bias shape {np.shape(b)} != ({Co},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    _check_finite(x, w)
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # column matrix laid out (kh, kw, C, B, Ho, Wo) so each tap is one slice copy
    cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(kh * kw * C, B * Ho * Wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(Co, kh * kw * C)
    out = wmat @ cols
    if b is not None:
        out += np.asarray(b)[:, None]
    y = np.ascontiguousarray(out.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3))

    def pullback(dy):
        dmat = dy.transpose(1, 0, 2, 3).reshape(Co, B * Ho * Wo)
        dw = (dmat @ cols.T).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2)
        db = dmat.sum(axis=1) if b is not None else None
        dcols = (wmat.T @ dmat).reshape(kh, kw, C, B, Ho, Wo)
        dxp = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db

    return LayerGradPair(y, pullback)


def affine(x, w, b) -> LayerGradPair:
    """``y = x @ w.T + b`` for ``x[B,p]``, ``w[q,p]``, ``b[q]``."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: x{x.shape} incompatible with w{w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} != ({w.shape[0]},)")
    y = x @ w.T + b

    def pullback(dy):
        return dy @ w, dy.T @ x, dy.sum(axis=0)

    return LayerGradPair(y, pullback)


def relu(x) -> LayerGradPair:
    x = np.asarray(x)
    mask = x > 0
    y = x * mask

    def pullback(dy):
        return dy * mask

    return LayerGradPair(y, pullback)


def global_avg_pool(x) -> LayerGradPair:
    """Mean over the spatial axes, ``[B,C,H,W] -> [B,C]``."""
    x = np.asarray(x)
    B, C, H, W = x.shape
    y = x.mean(axis=(2, 3))

    def pullback(dy):
        return np.broadcast_to(dy[:, :, None, None] / (H * W), x.shape).copy()

    return LayerGradPair(y, pullback)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, grad)`` with ``grad = (softmax - onehot) / B``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    idx = np.arange(B)
    loss = -logp[idx, labels].mean()
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    grad /= B
    return loss, grad


# Probes run in extended precision where the platform has it: in float64 the
# roundoff of f(x +- h) is ~1e-10 absolute, which swamps near-zero elements.
PROBE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def numerical_grad(f, x, h=1e-5, dtype=PROBE_DTYPE):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=dtype)
    step = dtype(h)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite value while probing element {i}")
        gflat[i] = float((fp - fm) / (2 * step))
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(f, x, analytic, h=1e-5, floor=1e-8):
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``.

    ``f`` maps an array to a scalar. A non-finite probe or analytic gradient
    fails the check with ``inf``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != np.shape(x):
        raise ShapeError(f"analytic gradient {analytic.shape} != x {np.shape(x)}")
    if not np.all(np.isfinite(analytic)):
        return float("inf")
    try:
        numeric = numerical_grad(f, x, h)
    except FloatingPointError:
        return float("inf")
    return float(relative_error(analytic, numeric, floor).max())
