import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mabnlab import artifacts as art
from mabnlab.norm import preset
from mabnlab.stats import STAT_NAMES, StatTrace, TraceRecord
from mabnlab.train import DatasetSpec, TrainConfig, Trainer

TINY = {"iterations": 12, "grad_batch": 4, "norm_batch": 2, "milestones": [6, 9], "eval_every": 6,
        "channels": [4, 4, 4, 4], "dataset": {"n_train": 64, "n_val": 32}}


class TestTrace:
    def test_empty_is_header_only(self, tmp_path):
        p = tmp_path / "t.csv"
        art.write_trace(StatTrace(), p)
        assert p.read_text() == "iter,layer,stat,l2norm\n"

    def test_single_record(self, tmp_path):
        p = tmp_path / "t.csv"
        art.write_trace(StatTrace([TraceRecord(10, "conv2", "g", 5.0)]), p)
        assert p.read_text().splitlines() == ["iter,layer,stat,l2norm", "10,conv2,g,5.0"]

    @settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.lists(st.tuples(st.integers(0, 10 ** 6), st.sampled_from(["norm1", "norm2", "conv2"]),
                              st.sampled_from(STAT_NAMES),
                              st.floats(0, 1e12, allow_nan=False, allow_infinity=False)), max_size=30))
    def test_roundtrip(self, tmp_path, rows):
        trace = StatTrace([TraceRecord(*r) for r in sorted(rows)])
        p = tmp_path / "rt.csv"
        art.write_trace(trace, p)
        assert art.read_trace(p).records == trace.records

    def test_bad_header(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("a,b\n")
        with pytest.raises(ValueError, match="header"):
            art.read_trace(p)

    def test_write_failure_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="file"):
            art.write_trace(StatTrace(), blocker / "sub" / "t.csv")


class TestConfig:
    def test_empty_is_bn32_baseline(self):
        cfg = art.parse_config({})
        t = cfg.train
        assert (t.norm.form, t.norm.fp_source, t.norm.bp_source) == ("vanilla", "batch", "batch")
        assert t.grad_batch == 32 and t.norm_batch == 32
        assert t == TrainConfig()

    def test_preset_with_override(self):
        cfg = art.parse_config({"norm": {"preset": "mabn", "sma_capacity": 8}, "train": {"norm_batch": 2}})
        assert cfg.train.norm == preset("mabn", sma_capacity=8)
        assert cfg.train.norm_batch == 2

    def test_nested_dataset_and_lists(self):
        cfg = art.parse_config({"train": TINY})
        assert cfg.train.dataset == DatasetSpec(n_train=64, n_val=32)
        assert cfg.train.milestones == (6, 9)

    @pytest.mark.parametrize("doc,key", [
        ({"nrom": {}}, "nrom"),
        ({"norm": {"foo": 1}}, "norm.foo"),
        ({"train": {"dataset": {"n_test": 3}}}, "train.dataset.n_test"),
        ({"train": {"norm": {}}}, "train.norm"),
        ({"train": {"iterations": "many"}}, "train.iterations"),
        ({"train": {"iterations": 1.5}}, "train.iterations"),
        ({"norm": {"affine": 1}}, "norm.affine"),
        ({"norm": {"momentum": True}}, "norm.momentum"),
        ({"norm": {"preset": "gn"}}, "norm.preset"),
        ({"norm": {"momentum": 2.0}}, "norm"),
        ({"theorem": {"which": "clt"}}, "theorem.which"),
        ({"bench": []}, "bench"),
        ({"train": {"milestones": 5}}, "train.milestones"),
    ])
    def test_schema_errors_name_key(self, doc, key):
        with pytest.raises(art.ConfigError) as exc:
            art.parse_config(doc)
        assert exc.value.key == key

    def test_null_centralization_allowed(self):
        assert art.parse_config({"norm": {"centralize_weights": None}}).train.norm.centralize_weights is None

    def test_config_dict_roundtrip(self):
        cfg = art.parse_config({"norm": {"preset": "brn"}, "train": TINY}).train
        assert art.train_config_from_dict(json.loads(json.dumps(art.config_to_dict(cfg)))) == cfg

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(art.ConfigError):
            art.load_config(p)


class TestReportsAndCheckpoints:
    @pytest.fixture
    def trainer(self):
        cfg = art.parse_config({"norm": {"preset": "mabn", "warmup_iters": 2}, "train": TINY}).train
        t = Trainer(cfg, seed=3)
        t.run(until=5)
        return t

    def test_report_csv(self, tmp_path, trainer):
        trainer.run()
        p = tmp_path / "r.csv"
        art.write_report_csv(trainer.report, p)
        rows = art.read_report_csv(p)
        assert p.read_text().startswith("iter,loss,train_err,val_err\n")
        assert len(rows) == 13
        assert rows[0][1] is None and rows[0][3] is not None
        assert rows[12][1] == trainer.report.losses[-1]
        assert [r[0] for r in rows if r[3] is not None] == [0, 6, 12]

    def test_summary_json_is_strict(self, tmp_path, trainer):
        trainer.report.losses.append(float("nan"))
        p = tmp_path / "s.json"
        art.write_json(art.run_summary(trainer.report, trainer.config), p)
        d = json.loads(p.read_text())
        assert d["format_version"] == 1 and d["final_loss"] is None

    def test_checkpoint_resume(self, tmp_path, trainer):
        p = tmp_path / "ck.npz"
        art.save_checkpoint(trainer, p)
        resumed = art.load_checkpoint(p)
        assert resumed.iteration == 5
        a = trainer.run()
        b = resumed.run()
        assert a.losses == b.losses and a.evals == b.evals and a.trace.records == b.trace.records
        for k, v in trainer.model.all_params().items():
            np.testing.assert_array_equal(v, resumed.model.all_params()[k])

    def test_checkpoint_bytes_deterministic(self, tmp_path, trainer):
        art.save_checkpoint(trainer, tmp_path / "a.npz")
        art.save_checkpoint(trainer, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_checkpoint_readable_by_numpy(self, tmp_path, trainer):
        art.save_checkpoint(trainer, tmp_path / "a.npz")
        with np.load(tmp_path / "a.npz") as z:
            assert "state/model/params/conv1.w" in z.files

    def test_bad_checkpoint(self, tmp_path):
        p = tmp_path / "x.npz"
        p.write_bytes(b"nope")
        with pytest.raises(OSError, match="x.npz"):
            art.load_checkpoint(p)

    def test_median_summary(self, trainer):
        other = Trainer(trainer.config, seed=4)
        reports = [trainer.run(), other.run()]
        s = art.seeds_summary(reports, trainer.config)
        assert s["seeds"] == [3, 4]
        assert s["median_final_val_err"] == pytest.approx(np.median([r.final_val_err for r in reports]))
