import json

import numpy as np
import pytest

from mabnlab.fold import BenchReport, ConvStack, FoldedConv, bench, fold, instance_norm_inference
from mabnlab.norm import FinalizedNorm, NormLayer, bn_forward, preset
from mabnlab.tensor import conv2d


class TestFold:
    def test_identity_normalizer(self):
        rng = np.random.default_rng(0)
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        f = fold(w, b, FinalizedNorm(np.ones(3), np.zeros(3)), pad=1)
        x = rng.normal(size=(2, 2, 5, 5))
        np.testing.assert_allclose(f(x), conv2d(x, w, b, pad=1).output, atol=1e-12)

    def test_scale_two_doubles_weights(self):
        w = np.random.default_rng(1).normal(size=(2, 2, 1, 1))
        f = fold(w, None, FinalizedNorm(np.full(2, 2.0), np.zeros(2)))
        np.testing.assert_array_equal(f.weight, 2 * w)
        np.testing.assert_array_equal(f.bias, 0.0)

    def test_random_bn_single_precision(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        layer = NormLayer(4, preset("bn"))
        layer.gamma, layer.beta = rng.uniform(0.5, 2, 4), rng.normal(size=4)
        layer.ema["mu"].value, layer.ema["sigma2"].value = rng.normal(size=4), rng.uniform(0.5, 3, 4)
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        unfolded = layer.forward(conv2d(x, w, b, pad=1).output, training=False)
        folded = fold(w, b, layer.finalize(), pad=1)(x)
        assert folded.dtype == np.float32
        assert np.max(np.abs(folded - unfolded)) < 1e-5

    def test_requires_finalized(self):
        with pytest.raises(TypeError, match="finalized"):
            fold(np.zeros((2, 1, 1, 1)), None, NormLayer(2))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            fold(np.zeros((3, 1, 1, 1)), None, FinalizedNorm(np.ones(2), np.zeros(2)))

    def test_param_count(self):
        f = FoldedConv(np.zeros((4, 2, 3, 3)), np.zeros(4))
        assert f.n_params == 76


class TestInstanceNorm:
    def test_constant_group_gives_beta(self):
        x = np.ones((2, 3, 4, 4)) * np.array([1.0, -2.0, 5.0]).reshape(1, 3, 1, 1)
        beta = np.array([0.1, 0.2, 0.3])
        out = instance_norm_inference(x, groups=3, gamma=np.full(3, 7.0), beta=beta)
        np.testing.assert_allclose(out, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape), atol=1e-12)

    def test_single_group_example(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
        out = instance_norm_inference(x, groups=1, eps=0.0)
        np.testing.assert_allclose(out.ravel(), bn_forward(np.array([[1.0], [2.0], [3.0]]))[0].ravel())

    def test_affine_invariance_per_group(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 3, 3))
        a = rng.uniform(0.5, 2, size=(2, 2, 1, 1, 1))
        c = rng.normal(size=(2, 2, 1, 1, 1))
        xt = (x.reshape(2, 2, 2, 3, 3) * a + c).reshape(x.shape)
        np.testing.assert_allclose(instance_norm_inference(xt, 2, eps=0.0),
                                   instance_norm_inference(x, 2, eps=0.0), atol=1e-12)

    def test_bad_groups(self):
        with pytest.raises(ValueError):
            instance_norm_inference(np.zeros((1, 6, 2, 2)), 4)


class TestBench:
    def test_report_json(self):
        r = BenchReport("folded", 12.5, 1.0, [1, 2, 3, 3], 5)
        d = json.loads(r.to_json())
        assert d["format_version"] == 1 and d["iters_per_sec"] == 12.5
        assert "iters_per_sec" not in json.loads(r.to_json(timing=False))

    def test_bench_counts_calls(self):
        calls = []
        r = bench(lambda x: calls.append(x.shape), (1, 2, 3, 3), warmup=1, reps=3, iters_per_run=2)
        assert len(calls) == 7
        assert r.iters_per_sec > 0 and len(r.runs) == 3

    def test_bench_validation(self):
        with pytest.raises(ValueError):
            bench(lambda x: x, (1,), reps=0)

    def test_stack_fold_equivalence(self):
        stack = ConvStack(n_layers=3, in_channels=4, channels=8, kernel=3, groups=4)
        x = np.random.default_rng(4).uniform(-1, 1, size=(2, 4, 8, 8)).astype(np.float32)
        assert np.max(np.abs(stack.unfolded(x) - stack.folded_forward(x))) < 1e-5
        assert stack.n_params("folded") == stack.n_params("unfolded") - 3 * 8
        assert stack.instance(x).shape == stack.unfolded(x).shape

    def test_repeat_runs_are_stable(self):
        stack = ConvStack(n_layers=6, in_channels=32, channels=64, kernel=1)
        shape = (1, 32, 56, 56)
        a = bench(stack.folded_forward, shape, reps=5).iters_per_sec
        b = bench(stack.folded_forward, shape, reps=5).iters_per_sec
        assert abs(a - b) / max(a, b) < 0.15
