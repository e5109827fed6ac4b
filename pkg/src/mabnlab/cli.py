"""``mabn`` command line: training, evaluation and the verification checks.

Exit status: 0 success, 1 failed check or I/O error, 2 usage or config error.
Artifacts go to ``--out``, else ``$MABN_OUT_DIR``, else ``./mabn_out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import artifacts as art
from .fold import ConvStack, bench
from .norm import bn_backward, bn_forward, modified_backward, modified_forward
from .stats import STAT_NAMES
from .tensor import affine, conv2d, global_avg_pool, gradcheck, softmax_cross_entropy
from .theorems import gap_trend, verify_ema_variance, verify_sma_variance, verify_variance_gap
from .train import Trainer, evaluate, synth_dataset

log = logging.getLogger("mabnlab")

GRADCHECK_TOL = 1e-6
FOLD_TOL = 1e-4
GAP_TRIALS = 200_000


class CheckFailed(Exception):
    pass


# -- gradcheck drivers -------------------------------------------------------
# Each returns the max relative error of one random case; inputs are float64.

def _gc_norm(fwd, bwd, batch, channels, rng):
    x = rng.normal(size=(batch, channels, 3, 3))
    r = rng.normal(size=x.shape)
    _, cache = fwd(x)
    analytic = bwd(r, cache)
    return gradcheck(lambda z: (r * fwd(z)[0]).sum(), x, analytic)


def _gc_conv(batch, channels, rng):
    x = rng.normal(size=(batch, channels, 5, 5))
    w = rng.normal(size=(4, channels, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(x, w, b, stride=2, pad=1)
    r = rng.normal(size=out.output.shape)
    dx, dw, db = out.backward(r)
    return max(
        gradcheck(lambda z: (r * conv2d(z, w, b, stride=2, pad=1).output).sum(), x, dx),
        gradcheck(lambda z: (r * conv2d(x, z, b, stride=2, pad=1).output).sum(), w, dw),
        gradcheck(lambda z: (r * conv2d(x, w, z, stride=2, pad=1).output).sum(), b, db),
    )


def _gc_affine(batch, channels, rng):
    x = rng.normal(size=(batch, channels))
    w = rng.normal(size=(5, channels))
    b = rng.normal(size=5)
    r = rng.normal(size=(batch, 5))
    dx, dw, db = affine(x, w, b).backward(r)
    return max(
        gradcheck(lambda z: (r * affine(z, w, b).output).sum(), x, dx),
        gradcheck(lambda z: (r * affine(x, z, b).output).sum(), w, dw),
        gradcheck(lambda z: (r * affine(x, w, z).output).sum(), b, db),
    )


def _gc_pool(batch, channels, rng):
    x = rng.normal(size=(batch, channels, 3, 4))
    r = rng.normal(size=(batch, channels))
    dx = global_avg_pool(x).backward(r)
    return gradcheck(lambda z: (r * global_avg_pool(z).output).sum(), x, dx)


def _gc_xent(batch, channels, rng):
    n_classes = max(channels, 2)
    logits = rng.normal(size=(batch, n_classes))
    labels = rng.integers(0, n_classes, size=batch)
    _, grad = softmax_cross_entropy(logits, labels)
    return gradcheck(lambda z: softmax_cross_entropy(z, labels)[0], logits, grad)


GRADCHECK_LAYERS = {
    "bn": lambda b, c, rng: _gc_norm(bn_forward, bn_backward, b, c, rng),
    "modified": lambda b, c, rng: _gc_norm(modified_forward, modified_backward, b, c, rng),
    "conv": _gc_conv,
    "affine": _gc_affine,
    "pool": _gc_pool,
    "xent": _gc_xent,
}


def layer_gradcheck(layer, batch=4, channels=3, seed=0):
    if layer not in GRADCHECK_LAYERS:
        raise ValueError(f"unknown layer {layer!r}; choose from {sorted(GRADCHECK_LAYERS)}")
    return GRADCHECK_LAYERS[layer](batch, channels, np.random.default_rng(seed))


# -- helpers -------------------------------------------------------------------

def out_dir(args):
    return Path(args.out or os.environ.get("MABN_OUT_DIR") or "mabn_out")


def _seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _train_config(args):
    cfg = art.load_config(args.config).train
    kw = {}
    if getattr(args, "seeds", None):
        kw["seeds"] = args.seeds
    if getattr(args, "iterations", None) is not None:
        kw["iterations"] = args.iterations
    try:
        return replace(cfg, **kw) if kw else cfg
    except ValueError as exc:
        raise art.ConfigError("train", str(exc)) from exc


def _print(msg):
    print(msg, flush=True)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args):
    out = out_dir(args)
    if args.resume:
        trainer = art.load_checkpoint(args.resume)
        cfg = trainer.config
        if args.iterations is not None:
            cfg = replace(cfg, iterations=args.iterations)
            trainer.config = cfg
        trainers = [trainer]
    else:
        cfg = _train_config(args)
        data = synth_dataset(spec=cfg.dataset)
        trainers = [Trainer(cfg, seed=s, data=data) for s in cfg.seeds]
    reports = []
    for t in trainers:
        s = t.seed
        if args.checkpoint_at is not None and t.iteration < args.checkpoint_at <= cfg.iterations:
            t.run(until=args.checkpoint_at)
            art.save_checkpoint(t, out / f"checkpoint_seed{s}_iter{args.checkpoint_at}.npz")
        report = t.run()
        art.write_report_csv(report, out / f"run_seed{s}.csv")
        art.write_json(art.run_summary(report, cfg), out / f"run_seed{s}.json")
        art.write_trace(report.trace, out / f"trace_seed{s}.csv")
        art.save_checkpoint(t, out / f"checkpoint_seed{s}.npz")
        _print(f"seed {s}: final val err {report.final_val_err:.4f}"
               + (" (diverged)" if report.diverged else ""))
        reports.append(report)
    summary = art.seeds_summary(reports, cfg)
    art.write_json(summary, out / "summary.json")
    _print(f"median final val err {summary['median_final_val_err']:.4f} over seeds {summary['seeds']}")
    return 0


def cmd_evaluate(args):
    trainer = art.load_checkpoint(args.checkpoint)
    model, data = trainer.model, trainer.data
    k = min(trainer.config.train_eval_samples, len(data.y_train))
    result = {
        "checkpoint": Path(args.checkpoint).name,
        "iteration": trainer.iteration,
        "seed": trainer.seed,
        "train_err": evaluate(trainer.predict, data.x_train[:k], data.y_train[:k]),
        "val_err": evaluate(trainer.predict, data.x_val, data.y_val),
    }
    if args.folded:
        folded = model.folded_layers()
        result["folded_val_err"] = evaluate(lambda x: model.forward_folded(x, folded), data.x_val, data.y_val)
    art.write_json(result, out_dir(args) / "evaluate.json")
    _print(f"val err {result['val_err']:.4f}, train err {result['train_err']:.4f}")
    return 0


def cmd_gradcheck(args):
    errs = [layer_gradcheck(args.layer, args.batch, args.channels, args.seed + i)
            for i in range(args.cases)]
    worst = max(errs)
    ok = worst < GRADCHECK_TOL
    art.write_json({"layer": args.layer, "batch": args.batch, "channels": args.channels,
                    "seed": args.seed, "cases": args.cases, "max_rel_err": worst,
                    "tolerance": GRADCHECK_TOL, "pass": ok}, out_dir(args) / f"gradcheck_{args.layer}.json")
    _print(f"{args.layer}: max rel err {worst:.3e} ({'pass' if ok else 'FAIL'})")
    if not ok:
        raise CheckFailed(f"gradcheck {args.layer}: {worst:.3e} >= {GRADCHECK_TOL:g}")
    return 0


def cmd_verify_theorem(args):
    tc = art.load_config(args.config).theorem
    which = args.which or tc.which
    mc = tc.mc
    kw = {k: v for k, v in (("alpha", args.alpha), ("window", args.window), ("drift", args.drift),
                            ("batch", args.batch), ("trials", args.trials), ("horizon", args.horizon),
                            ("seed", args.seed)) if v is not None}
    if which == "gap" and "trials" not in kw and mc.trials == type(mc)().trials:
        kw["trials"] = GAP_TRIALS
    if args.tight or tc.tight:
        kw["trials"] = max(kw.get("trials", mc.trials), 100_000)
        kw["tolerance"] = 0.03
    try:
        mc = replace(mc, **kw)
    except ValueError as exc:
        raise art.ConfigError("theorem", str(exc)) from exc
    if which == "ema":
        report = verify_ema_variance(mc)
    elif which == "sma":
        report = verify_sma_variance(mc)
    else:
        report = verify_variance_gap(mc)
        gaps, monotone = gap_trend((2, 8, 32), mc)
        report.details.update(trend_batches=[2, 8, 32], trend_gaps=gaps, trend_monotone=monotone)
        report.passed = report.passed and monotone
    art.write_json(report.to_dict(), out_dir(args) / f"theorem_{which}.json")
    _print(report.to_json())
    if not report.passed:
        raise CheckFailed(f"theorem {which}: rel_dev {report.rel_dev:.4f}")
    return 0


def _fold_stack_check(bc):
    stack = ConvStack(bc.n_layers, bc.in_channels, bc.channels, kernel=bc.fold_kernel, seed=bc.seed,
                      groups=bc.groups)
    x = np.random.default_rng(bc.seed).uniform(-1, 1, size=bc.input_shape).astype(np.float32)
    return float(np.max(np.abs(stack.unfolded(x) - stack.folded_forward(x))))


def cmd_bench(args):
    bc = art.load_config(args.config).bench
    kw = {k: v for k, v in (("kernel", args.kernel), ("reps", args.reps), ("threads", args.threads))
          if v is not None}
    bc = replace(bc, **kw)
    stack = ConvStack(bc.n_layers, bc.in_channels, bc.channels, kernel=bc.kernel, seed=bc.seed,
                      groups=bc.groups)
    runs = {kind: bench(stack.model(kind), bc.input_shape, warmup=bc.warmup, reps=bc.reps,
                        iters_per_run=bc.iters_per_run, label=kind, seed=bc.seed, threads=bc.threads)
            for kind in ("folded", "unfolded", "instance")}
    fold_err = _fold_stack_check(bc)
    ips = {k: r.iters_per_sec for k, r in runs.items()}
    ratio = ips["folded"] / ips["instance"]
    ok = fold_err < FOLD_TOL and ips["folded"] >= ips["unfolded"] and ratio > 1.2
    out = out_dir(args)
    # measured throughput varies run to run, so it lives apart from the reproducible facts
    art.write_json({"config": bc.__dict__, "fold_max_abs_err": fold_err,
                    "n_params": {k: stack.n_params(k) for k in runs}}, out / "bench.json")
    art.write_json({"iters_per_sec": ips, "folded_over_instance": ratio,
                    "folded_over_unfolded": ips["folded"] / ips["unfolded"], "pass": ok},
                   out / "bench_timing.json")
    for k, v in ips.items():
        _print(f"{k:>9}: {v:8.1f} it/s")
    _print(f"folded/instance {ratio:.2f}, fold max abs err {fold_err:.2e}")
    if not ok:
        raise CheckFailed("bench: throughput ordering or fold equivalence violated")
    return 0


def trace_stability(trace, stats=STAT_NAMES[:5]):
    """Iteration-wise standard deviation of each statistic's L2 norm."""
    out = {}
    for s in stats:
        series = trace.series(s)
        if len(series):
            out[s] = float(np.std(series))
    return out


def cmd_stats_trace(args):
    cfg = _train_config(args)
    if args.norm_batch is not None:
        try:
            cfg = replace(cfg, norm_batch=args.norm_batch, grad_batch=args.norm_batch)
        except ValueError as exc:
            raise art.ConfigError("train.norm_batch", str(exc)) from exc
    if not cfg.trace_every:
        raise art.ConfigError("train.trace_every", "tracing is disabled")
    data = synth_dataset(spec=cfg.dataset)
    out = out_dir(args)
    per_seed = {}
    for s in cfg.seeds:
        report = Trainer(cfg, seed=s, data=data).run()
        art.write_trace(report.trace, out / f"trace_seed{s}.csv")
        per_seed[s] = trace_stability(report.trace)
    stats = sorted({k for v in per_seed.values() for k in v})
    median = {k: float(np.median([v[k] for v in per_seed.values() if k in v])) for k in stats}
    art.write_json({"config": art.config_to_dict(cfg), "layer": cfg.trace_layer,
                    "per_seed_std": {str(k): v for k, v in per_seed.items()}, "median_std": median},
                   out / "stats_summary.json")
    for k in stats:
        _print(f"{k:>7}: iteration std {median[k]:.4g}")
    return 0


def cmd_fold(args):
    out = out_dir(args)
    if args.checkpoint:
        trainer = art.load_checkpoint(args.checkpoint)
        model = trainer.model
        folded = model.folded_layers()
        x = trainer.data.x_val[:args.samples]
        err = float(np.max(np.abs(model.forward(x, training=False) - model.forward_folded(x, folded))))
        arrays = {}
        for i, f in enumerate(folded):
            arrays[f"conv{i + 1}.w"] = f.weight
            arrays[f"conv{i + 1}.b"] = f.bias
        arrays["fc.w"] = model.params["fc.w"]
        arrays["fc.b"] = model.params["fc.b"]
        art.write_arrays(out / "folded.npz", arrays,
                         {"format_version": art.FORMAT_VERSION, "strides": list(model.strides)})
        source = Path(args.checkpoint).name
    else:
        bc = art.load_config(args.config).bench
        err = _fold_stack_check(bc)
        source = "conv-stack"
    ok = err < FOLD_TOL
    art.write_json({"source": source, "max_abs_err": err, "tolerance": FOLD_TOL, "pass": ok},
                   out / "fold.json")
    _print(f"fold max abs err {err:.3e} ({'pass' if ok else 'FAIL'})")
    if not ok:
        raise CheckFailed(f"fold: {err:.3e} >= {FOLD_TOL:g}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections norm, train, bench, theorem)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mabn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    t = sub.add_parser("train", parents=[common], help="train one or more seeds")
    t.add_argument("--seeds", type=_seeds)
    t.add_argument("--iterations", type=int)
    t.add_argument("--checkpoint-at", type=int, help="also checkpoint at this iteration")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--folded", action="store_true", help="also evaluate the folded network")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", parents=[common], help="central-difference gradient check")
    g.add_argument("--layer", choices=sorted(GRADCHECK_LAYERS), default="bn")
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("verify-theorem", parents=[common], help="Monte Carlo variance checks")
    v.add_argument("--which", choices=("ema", "sma", "gap"))
    v.add_argument("--alpha", type=float)
    v.add_argument("--window", type=int)
    v.add_argument("--drift", type=float)
    v.add_argument("--batch", type=int)
    v.add_argument("--trials", type=int)
    v.add_argument("--horizon", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--tight", action="store_true", help="1e5 trials at 3%% tolerance")
    v.set_defaults(func=cmd_verify_theorem)

    b = sub.add_parser("bench", parents=[common], help="folded vs unfolded vs instance-norm throughput")
    b.add_argument("--kernel", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--threads", type=int)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("stats-trace", parents=[common], help="record batch-statistic norms")
    s.add_argument("--seeds", type=_seeds)
    s.add_argument("--iterations", type=int)
    s.add_argument("--norm-batch", type=int)
    s.set_defaults(func=cmd_stats_trace)

    f = sub.add_parser("fold", parents=[common], help="fold normalizers into convolutions")
    f.add_argument("--checkpoint")
    f.add_argument("--samples", type=int, default=256)
    f.set_defaults(func=cmd_fold)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except art.ConfigError as exc:
        print(f"mabn {args.command}: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"mabn {args.command}: check failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mabn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
