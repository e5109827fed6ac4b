"""Toy-scale training harness for comparing normalization variants.

A small conv net (four 3x3 convolutions, each followed by a normalization
layer and ReLU, then global average pooling and a linear classifier) is
trained with SGD on a synthetic 10-class image task. Each gradient batch is
split into normalization groups of ``norm_batch`` samples; gradients are
averaged over the whole gradient batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .norm import NormLayer, NormVariantConfig, weight_centralize
from .stats import StatTrace
from .tensor import affine, conv2d, global_avg_pool, relu, softmax_cross_entropy

log = logging.getLogger(__name__)

N_CLASSES = 10
IMAGE_SIZE = 16


# -- data ------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 1234
    n_train: int = 8000
    n_val: int = 4000
    code_dim: int = 12
    code_noise: float = 0.8
    pixel_noise: float = 0.3
    gain_spread: float = 0.5
    offset_spread: float = 0.5


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


def _smooth_basis(rng, k, size):
    """``k`` random low-frequency ``size x size`` patterns."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    basis = np.zeros((k, size, size))
    for i in range(k):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            py, px = rng.uniform(0, 2 * np.pi, size=2)
            basis[i] += rng.normal() * np.sin(2 * np.pi * fy * yy + py) * np.sin(2 * np.pi * fx * xx + px)
        basis[i] /= np.linalg.norm(basis[i]) / size
    return basis


def synth_dataset(seed=1234, n_train=8000, n_val=2000, spec: DatasetSpec | None = None) -> Dataset:
    """Class-conditional Gaussian codes pushed through a fixed random nonlinear map.

    Each image also gets a random gain and offset, so per-sample statistics
    differ strongly between images and tiny normalization groups see very
    noisy channel statistics.
    """
    spec = spec or DatasetSpec(seed=seed, n_train=n_train, n_val=n_val)
    rng = np.random.default_rng(spec.seed)
    hidden = 32
    centers = rng.normal(size=(N_CLASSES, spec.code_dim))
    a = rng.normal(size=(hidden, spec.code_dim)) / np.sqrt(spec.code_dim)
    a_bias = rng.normal(size=hidden) * 0.5
    basis = _smooth_basis(rng, hidden, IMAGE_SIZE).reshape(hidden, -1)

    def draw(n):
        labels = rng.permutation(np.arange(n) % N_CLASSES)
        codes = centers[labels] + spec.code_noise * rng.normal(size=(n, spec.code_dim))
        h = np.tanh(codes @ a.T * 1.5 + a_bias)
        img = (h @ basis) / np.sqrt(hidden)
        gain = np.exp(spec.gain_spread * rng.normal(size=(n, 1)))
        offset = spec.offset_spread * rng.normal(size=(n, 1))
        img = gain * img + offset + spec.pixel_noise * rng.normal(size=img.shape)
        return img.reshape(n, 1, IMAGE_SIZE, IMAGE_SIZE), labels.astype(np.int64)

    xt, yt = draw(spec.n_train)
    xv, yv = draw(spec.n_val)
    return Dataset(xt, yt, xv, yv)


def split_into_norm_groups(batch, norm_batch):
    """Split ``batch`` along axis 0 into contiguous groups of ``norm_batch`` samples."""
    batch = np.asarray(batch)
    n = batch.shape[0]
    if norm_batch < 1 or n % norm_batch:
        raise ValueError(f"gradient batch {n} is not divisible by normalization batch {norm_batch}")
    return [batch[i:i + norm_batch] for i in range(0, n, norm_batch)]


# -- optimizer -------------------------------------------------------------

class SGD:
    """SGD with momentum; weight decay is folded into the velocity.

    ``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.
    """

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}
        self.skipped = 0

    def step(self, params, grads, lr):
        if not all(np.all(np.isfinite(grads[k])) for k in params):
            self.skipped += 1
            return False
        for k, p in params.items():
            g = grads[k]
            v = self.velocity.get(k)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g + self.weight_decay * p
            self.velocity[k] = v
            p -= (lr * v).astype(p.dtype, copy=False)
        return True

    def state_dict(self):
        return {"velocity": {k: v.copy() for k, v in self.velocity.items()}, "skipped": self.skipped}

    def load_state_dict(self, d):
        self.velocity = {k: np.array(v) for k, v in d["velocity"].items()}
        self.skipped = int(d["skipped"])


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Functional single step; returns ``(new_params, new_velocity)``."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        v = velocity.get(k, np.zeros_like(p)) if velocity else np.zeros_like(p)
        new_v[k] = momentum * v + grads[k] + weight_decay * p
        new_p[k] = p - lr * new_v[k]
    return new_p, new_v


# -- model -------------------------------------------------------------------

class ConvNet:
    """conv-norm-relu x4, global average pool, linear head."""

    def __init__(self, norm_config: NormVariantConfig, norm_batch=None, channels=(16, 32, 32, 64),
                 strides=(2, 2, 2, 2), in_channels=1, n_classes=N_CLASSES, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.strides = tuple(strides)
        self.centralize = norm_config.uses_weight_centralization
        self.params: dict = {}
        self.norms: list = []
        c_in = in_channels
        for i, c in enumerate(channels):
            std = np.sqrt(2.0 / (c_in * 9))
            self.params[f"conv{i + 1}.w"] = (rng.normal(size=(c, c_in, 3, 3)) * std).astype(self.dtype)
            self.norms.append(NormLayer(c, norm_config, norm_batch=norm_batch, name=f"norm{i + 1}"))
            c_in = c
        bound = 1.0 / np.sqrt(c_in)
        self.params["fc.w"] = rng.uniform(-bound, bound, size=(n_classes, c_in)).astype(self.dtype)
        self.params["fc.b"] = np.zeros(n_classes, dtype=self.dtype)
        self.grads: dict = {}
        self._tape = None

    def all_params(self):
        out = dict(self.params)
        for n in self.norms:
            for k, v in n.params.items():
                out[f"{n.name}.{k}"] = v
        return out

    def all_grads(self):
        out = dict(self.grads)
        for n in self.norms:
            for k in n.params:
                out[f"{n.name}.{k}"] = n.grads[k]
        return out

    def conv_weight(self, i):
        w = self.params[f"conv{i + 1}.w"]
        return weight_centralize(w).output if self.centralize else w

    def forward(self, x, training=True):
        x = np.asarray(x, dtype=self.dtype)
        tape = []
        h = x
        for i, norm in enumerate(self.norms):
            w = self.params[f"conv{i + 1}.w"]
            wc = weight_centralize(w) if self.centralize else None
            conv = conv2d(h, wc.output if wc else w, stride=self.strides[i], pad=1)
            z = norm.forward(conv.output, training=training)
            act = relu(z)
            tape.append((wc, conv, act))
            h = act.output
        pool = global_avg_pool(h)
        fc = affine(pool.output, self.params["fc.w"], self.params["fc.b"])
        if training:
            self._tape = (tape, pool, fc)
        return fc.output

    def backward(self, dlogits):
        tape, pool, fc = self._tape
        self._tape = None
        dh, dw, db = fc.backward(dlogits.astype(self.dtype, copy=False))
        self.grads = {"fc.w": dw, "fc.b": db}
        dh = pool.backward(dh)
        for i in reversed(range(len(self.norms))):
            wc, conv, act = tape[i]
            dz = act.backward(dh)
            dconv = self.norms[i].backward(dz)
            dh, dwc, _ = conv.backward(dconv)
            self.grads[f"conv{i + 1}.w"] = wc.backward(dwc) if wc else dwc
        return dh

    def folded_layers(self):
        """Per conv: ``(weight, bias)`` with the finalized normalizer absorbed."""
        from .fold import fold

        out = []
        for i, norm in enumerate(self.norms):
            out.append(fold(self.conv_weight(i), None, norm.finalize()))
        return out

    def forward_folded(self, x, folded=None):
        folded = folded or self.folded_layers()
        h = np.asarray(x, dtype=self.dtype)
        for i, fc in enumerate(folded):
            h = conv2d(h, fc.weight.astype(self.dtype), fc.bias.astype(self.dtype),
                       stride=self.strides[i], pad=1).output
            h = np.maximum(h, 0)
        pooled = h.mean(axis=(2, 3))
        return pooled @ self.params["fc.w"].T + self.params["fc.b"]

    def state_dict(self):
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "norms": [n.state_dict() for n in self.norms],
        }

    def load_state_dict(self, d):
        for k, v in d["params"].items():
            self.params[k] = np.array(v, dtype=self.dtype)
        for n, s in zip(self.norms, d["norms"]):
            n.load_state_dict(s)


# -- configuration and reports ---------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    grad_batch: int = 32
    norm_batch: int = 32
    iterations: int = 6000
    base_lr: float = 0.1
    milestones: tuple = (3000, 4500)
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seeds: tuple = (0,)
    norm: NormVariantConfig = field(default_factory=NormVariantConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    channels: tuple = (16, 32, 32, 64)
    strides: tuple = (2, 2, 2, 2)
    eval_every: int = 500
    train_eval_samples: int = 1000
    trace_every: int = 1
    trace_layer: str = "norm1"
    precision: str = "single"

    def __post_init__(self):
        if self.grad_batch < 1 or self.norm_batch < 1 or self.grad_batch % self.norm_batch:
            raise ValueError(
                f"grad_batch {self.grad_batch} must be a positive multiple of norm_batch {self.norm_batch}"
            )
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def lr_at(self, it):
        k = sum(1 for m in self.milestones if it >= m)
        return self.base_lr * self.decay ** k

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["seeds"] = list(self.seeds)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d


@dataclass
class RunReport:
    seed: int
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iter, train_err, val_err)
    diverged: bool = False
    skipped_steps: int = 0
    known_unstable: bool = False
    trace: StatTrace = field(default_factory=StatTrace)

    @property
    def final_val_err(self):
        return self.evals[-1][2] if self.evals else float("nan")

    def summary(self):
        return {
            "seed": self.seed,
            "iterations": len(self.losses),
            "final_val_err": self.final_val_err,
            "final_train_err": self.evals[-1][1] if self.evals else float("nan"),
            "final_loss": self.losses[-1] if self.losses else float("nan"),
            "diverged": self.diverged,
            "skipped_steps": self.skipped_steps,
            "known_unstable": self.known_unstable,
        }


def evaluate(predict, x, y, batch=500):
    """Top-1 error of ``predict(x) -> logits`` on ``(x, y)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    wrong = 0
    for i in range(0, len(y), batch):
        logits = predict(x[i:i + batch])
        wrong += int((np.argmax(logits, axis=1) != y[i:i + batch]).sum())
    return wrong / len(y)


class Trainer:
    """Holds everything a run mutates, so a run can be checkpointed mid-way."""

    def __init__(self, config: TrainConfig, seed=None, data: Dataset | None = None):
        self.config = config
        self.seed = config.seeds[0] if seed is None else seed
        self.data = data or synth_dataset(spec=config.dataset)
        self.model = ConvNet(config.norm, norm_batch=config.norm_batch, channels=config.channels,
                             strides=config.strides, seed=self.seed, dtype=config.dtype)
        self.optimizer = SGD(config.momentum, config.weight_decay)
        self.rng = np.random.default_rng([self.seed, 7])
        self.iteration = 0
        self.perm = self.rng.permutation(len(self.data.y_train))
        self.cursor = 0
        self.report = RunReport(seed=self.seed, known_unstable=config.norm.known_unstable)
        self.model.norms[self._trace_index()].track = True

    def _trace_index(self):
        names = [n.name for n in self.model.norms]
        if self.config.trace_layer not in names:
            raise ValueError(f"unknown trace layer {self.config.trace_layer!r}; have {names}")
        return names.index(self.config.trace_layer)

    def _next_batch(self):
        B = self.config.grad_batch
        n = len(self.data.y_train)
        if self.cursor + B > n:
            self.perm = self.rng.permutation(n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + B]
        self.cursor += B
        return self.data.x_train[idx], self.data.y_train[idx]

    def predict(self, x):
        return self.model.forward(x, training=False)

    def evaluate_now(self):
        cfg = self.config
        k = min(cfg.train_eval_samples, len(self.data.y_train))
        with np.errstate(all="ignore"):
            try:
                tr = evaluate(self.predict, self.data.x_train[:k], self.data.y_train[:k])
                va = evaluate(self.predict, self.data.x_val, self.data.y_val)
            except (ValueError, FloatingPointError, ZeroDivisionError):
                tr = va = 1.0
        self.report.evals.append((self.iteration, tr, va))

    def step(self):
        cfg = self.config
        x, y = self._next_batch()
        model = self.model
        with np.errstate(all="ignore"):
            try:
                logits = model.forward(x, training=True)
                loss, dlogits = softmax_cross_entropy(logits, y)
                loss = float(loss)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                model.backward(dlogits)
            except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
                log.warning("seed %d diverged at iteration %d: %s", self.seed, self.iteration, exc)
                self.report.diverged = True
                self.report.losses.append(float("nan"))
                self.iteration += 1
                return False
        self.report.losses.append(loss)
        if not self.optimizer.step(model.all_params(), model.all_grads(), cfg.lr_at(self.iteration)):
            self.report.diverged = True
        self.report.skipped_steps = self.optimizer.skipped
        if cfg.trace_every and self.iteration % cfg.trace_every == 0:
            norm = model.norms[self._trace_index()]
            self.report.trace.record(self.iteration, norm.name, norm.last_stats)
        self.iteration += 1
        return True

    def run(self, until=None):
        cfg = self.config
        until = cfg.iterations if until is None else until
        if self.iteration == 0 and not self.report.evals:
            self.evaluate_now()
        while self.iteration < until:
            ok = self.step()
            if not ok:
                break
            if cfg.eval_every and self.iteration % cfg.eval_every == 0:
                self.evaluate_now()
        # a partial run (checkpointing) must leave the report as an uninterrupted run would
        if self.report.diverged and (not self.report.evals or self.report.evals[-1][0] != self.iteration):
            self.report.evals.append((self.iteration, 1.0, 1.0))
        elif self.iteration >= cfg.iterations and self.report.evals[-1][0] != self.iteration:
            self.evaluate_now()
        return self.report

    def state_dict(self):
        return {
            "iteration": self.iteration,
            "seed": self.seed,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "perm": self.perm.copy(),
            "cursor": self.cursor,
        }

    def load_state_dict(self, d):
        self.iteration = int(d["iteration"])
        self.seed = int(d["seed"])
        self.model.load_state_dict(d["model"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.rng.bit_generator.state = d["rng"]
        self.perm = np.array(d["perm"], dtype=np.int64)
        self.cursor = int(d["cursor"])


def train(config: TrainConfig, seed=None, data: Dataset | None = None) -> RunReport:
    return Trainer(config, seed=seed, data=data).run()


def with_norm(config: TrainConfig, norm: NormVariantConfig, **kw) -> TrainConfig:
    return replace(config, norm=norm, **kw)
