"""On-disk formats: run configs, traces, run reports and checkpoints.

Every JSON document carries ``format_version``. Writers are deterministic:
keys are sorted, floats use ``repr`` and checkpoint archives carry a fixed
timestamp, so identical runs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .norm import NormVariantConfig, preset
from .stats import STAT_NAMES, StatTrace, TraceRecord
from .theorems import McConfig
from .train import DatasetSpec, RunReport, TrainConfig, Trainer

FORMAT_VERSION = 1
TRACE_HEADER = ("iter", "layer", "stat", "l2norm")
REPORT_HEADER = ("iter", "loss", "train_err", "val_err")
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class ConfigError(ValueError):
    """Schema violation in a run config; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"config error at {key!r}: {message}")
        self.key = key


class ArtifactError(OSError):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path):
    if isinstance(obj, dict) and "format_version" not in obj:
        obj = {"format_version": FORMAT_VERSION, **obj}
    _write_text(path, dumps(obj))


def _write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _num(x):
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"


# -- traces ----------------------------------------------------------------

def write_trace(trace: StatTrace, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in trace.records:
        w.writerow((r.iter, r.layer, r.stat, _num(r.l2norm)))
    _write_text(path, buf.getvalue())


def read_trace(path) -> StatTrace:
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if not rows or tuple(rows[0]) != TRACE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}")
    trace = StatTrace()
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 4 or row[2] not in STAT_NAMES:
            raise ValueError(f"{path}:{n}: malformed trace row {row!r}")
        trace.records.append(TraceRecord(int(row[0]), row[1], row[2], float(row[3])))
    return trace


# -- run reports -----------------------------------------------------------

def write_report_csv(report: RunReport, path):
    """One row per iteration; the loss on row ``k`` is from the step that reached ``k``."""
    evals = {it: (tr, va) for it, tr, va in report.evals}
    n = len(report.losses)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for k in range(n + 1):
        loss = report.losses[k - 1] if k > 0 else None
        tr, va = evals.get(k, (None, None))
        w.writerow((k, _num(loss), _num(tr), _num(va)))
    _write_text(path, buf.getvalue())


def read_report_csv(path):
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError(f"{path}: expected header {','.join(REPORT_HEADER)}")
    conv = lambda s: float(s) if s else None  # noqa: E731
    return [(int(r[0]), conv(r[1]), conv(r[2]), conv(r[3])) for r in rows[1:]]


def run_summary(report: RunReport, config: TrainConfig):
    return {"format_version": FORMAT_VERSION, "config": config_to_dict(config), **report.summary()}


def seeds_summary(reports, config: TrainConfig):
    """Median aggregate over independent seeds."""
    errs = [r.final_val_err for r in reports]
    return {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(config),
        "seeds": [r.seed for r in reports],
        "median_final_val_err": float(np.median(errs)),
        "runs": [r.summary() for r in reports],
    }


# -- configs ---------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    n_layers: int = 6
    in_channels: int = 32
    channels: int = 64
    kernel: int = 1
    fold_kernel: int = 3
    input_shape: tuple = (1, 32, 56, 56)
    groups: int = 32
    warmup: int = 2
    reps: int = 5
    iters_per_run: int = 3
    threads: int = 1
    seed: int = 0


@dataclass(frozen=True)
class TheoremConfig:
    which: str = "ema"
    tight: bool = False
    mc: McConfig = field(default_factory=McConfig)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    theorem: TheoremConfig = field(default_factory=TheoremConfig)


SECTIONS = ("norm", "train", "bench", "theorem")
_TUPLE_FIELDS = {"milestones", "seeds", "channels", "strides", "input_shape"}


def _field_types(cls):
    return {f.name: f for f in fields(cls)}


def _coerce(section, cls, raw: dict, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected a JSON object")
    known = _field_types(cls)
    out = {}
    for key, value in raw.items():
        if key not in known or key in skip:
            raise ConfigError(f"{section}.{key}", "unknown key")
        default = known[key].default
        if key in _TUPLE_FIELDS:
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key}", "expected a list")
            value = tuple(value)
        elif isinstance(default, bool) or key == "centralize_weights":
            nullable = key == "centralize_weights"
            if not isinstance(value, bool) and not (nullable and value is None):
                raise ConfigError(f"{section}.{key}", "expected true or false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key}", "expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}", "expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{section}.{key}", "expected a string")
        out[key] = value
    return out


def _build(section, cls, kwargs, base=None):
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(section, str(exc)) from exc


def parse_norm(raw: dict) -> NormVariantConfig:
    raw = dict(raw)
    name = raw.pop("preset", None)
    kw = _coerce("norm", NormVariantConfig, raw)
    if name is None:
        return _build("norm", NormVariantConfig, kw)
    if not isinstance(name, str):
        raise ConfigError("norm.preset", "expected a string")
    try:
        base = preset(name)
    except ValueError as exc:
        raise ConfigError("norm.preset", str(exc)) from exc
    return _build("norm", NormVariantConfig, kw, base)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; every key is optional."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in doc:
        if key not in SECTIONS and key != "format_version":
            raise ConfigError(key, "unknown section")
    for key in SECTIONS:
        if not isinstance(doc.get(key, {}), dict):
            raise ConfigError(key, "expected a JSON object")
    norm = parse_norm(doc.get("norm", {}))
    traw = dict(doc.get("train", {}))
    ds_raw = traw.pop("dataset", {})
    dataset = _build("train.dataset", DatasetSpec, _coerce("train.dataset", DatasetSpec, ds_raw))
    tkw = _coerce("train", TrainConfig, traw, skip=("norm", "dataset"))
    train = _build("train", TrainConfig, {**tkw, "norm": norm, "dataset": dataset})
    bench = _build("bench", BenchConfig, _coerce("bench", BenchConfig, doc.get("bench", {})))
    th_raw = dict(doc.get("theorem", {}))
    which = th_raw.pop("which", "ema")
    tight = th_raw.pop("tight", False)
    if which not in ("ema", "sma", "gap"):
        raise ConfigError("theorem.which", f"expected ema, sma or gap, got {which!r}")
    if not isinstance(tight, bool):
        raise ConfigError("theorem.tight", "expected true or false")
    mc = _build("theorem", McConfig, _coerce("theorem", McConfig, th_raw))
    return RunConfig(train, bench, TheoremConfig(which, tight, mc))


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config({})
    text = _read_text(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON in {path}: {exc}") from exc
    return parse_config(doc)


def config_to_dict(config: TrainConfig):
    d = config.to_dict()
    return {"norm": d.pop("norm"), "train": d}


def train_config_from_dict(d) -> TrainConfig:
    return parse_config({"norm": d["norm"], "train": d["train"]}).train


# -- checkpoints -----------------------------------------------------------

def _encode(obj, arrays, path):
    if isinstance(obj, np.ndarray):
        arrays[path] = obj
        return {"__array__": path}
    if isinstance(obj, dict):
        return {str(k): _encode(v, arrays, f"{path}/{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays, f"{path}/{i}") for i, v in enumerate(obj)]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _decode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    return obj


def _report_state(report: RunReport):
    tr = report.trace.records
    layers = sorted({r.layer for r in tr})
    return {
        "seed": report.seed,
        "losses": np.array(report.losses, dtype=np.float64),
        "evals": np.array(report.evals, dtype=np.float64).reshape(-1, 3),
        "diverged": report.diverged,
        "skipped_steps": report.skipped_steps,
        "known_unstable": report.known_unstable,
        "trace_iter": np.array([r.iter for r in tr], dtype=np.int64),
        "trace_stat": np.array([STAT_NAMES.index(r.stat) for r in tr], dtype=np.int64),
        "trace_l2norm": np.array([r.l2norm for r in tr], dtype=np.float64),
        "trace_layers": layers,
        "trace_layer_idx": np.array([layers.index(r.layer) for r in tr], dtype=np.int64),
    }


def _report_from_state(d) -> RunReport:
    layers = d["trace_layers"]
    trace = StatTrace([
        TraceRecord(int(i), layers[int(li)], STAT_NAMES[int(s)], float(v))
        for i, li, s, v in zip(d["trace_iter"], d["trace_layer_idx"], d["trace_stat"], d["trace_l2norm"])
    ])
    evals = [(int(r[0]), float(r[1]), float(r[2])) for r in d["evals"]]
    return RunReport(seed=int(d["seed"]), losses=[float(v) for v in d["losses"]], evals=evals,
                     diverged=bool(d["diverged"]), skipped_steps=int(d["skipped_steps"]),
                     known_unstable=bool(d["known_unstable"]), trace=trace)


def save_checkpoint(trainer: Trainer, path):
    """Zip archive of ``.npy`` members plus ``meta.json`` describing the tree."""
    arrays: dict = {}
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(trainer.config),
        "state": _encode(trainer.state_dict(), arrays, "state"),
        "report": _encode(_report_state(trainer.report), arrays, "report"),
    }
    write_arrays(path, arrays, meta)


def write_arrays(path, arrays: dict, meta: dict):
    """Write ``arrays`` as ``.npy`` members plus ``meta.json``; loadable with ``np.load``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", _ZIP_TIME), buf.getvalue())
            zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_TIME), dumps(meta))
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_checkpoint(path):
    """``(meta, arrays)`` as stored."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, zipfile.BadZipFile, KeyError) as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format_version')!r}")
    return meta, arrays


def load_checkpoint(path, data=None) -> Trainer:
    """Rebuild a :class:`Trainer` positioned exactly where the checkpoint was taken."""
    meta, arrays = read_checkpoint(path)
    config = train_config_from_dict(meta["config"])
    state = _decode(meta["state"], arrays)
    trainer = Trainer(config, seed=int(state["seed"]), data=data)
    trainer.load_state_dict(state)
    trainer.report = _report_from_state(_decode(meta["report"], arrays))
    return trainer
