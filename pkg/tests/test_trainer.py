import csv
import os

import numpy as np
import pytest

from kwslab import autodiff as ad
from kwslab.data import CorpusConfig, Example, generate
from kwslab.errors import ConfigError, NumericError
from kwslab.losses import Bernoulli, LossConfig
from kwslab.model import PRESETS, ModelParams, init_params, load_checkpoint
from kwslab.trainer import (
    METRICS_COLUMNS,
    AdamHyper,
    AdamState,
    TrainConfig,
    adam_step,
    substream,
    train,
)


@pytest.fixture(scope="module")
def corpus():
    examples = list(generate(CorpusConfig(n_pos=12, n_neg=12, seed=5)))
    return [e for e in examples if e.split == "train"], [e for e in examples if e.split != "train"]


def tiny_cfg(**kw):
    base = dict(arch="tiny", epochs=2, batch_size=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def single(value):
    with ad.precision("float64"):
        return ModelParams(PRESETS["tiny"], [("w", ad.Tensor(np.asarray(value, dtype=float), requires_grad=True))])


def adam_reference(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


class TestAdam:
    def test_first_step_is_sign_times_lr(self):
        p = single([1.0, -2.0, 3.0])
        adam_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, AdamState(p), AdamHyper(lr=0.1))
        np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 3.0 - 0.1 * 1e-3 / (1e-3 + 1e-8)])

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(7)]
        p = single(w0)
        state = AdamState(p)
        for g in grads:
            adam_step(p, {"w": g}, state, AdamHyper(lr=0.01))
        np.testing.assert_allclose(p["w"].data, adam_reference(w0, grads, lr=0.01), rtol=1e-12)
        assert state.step == 7

    def test_minimizes_quadratic(self):
        p = single([3.0, -2.0])
        state = AdamState(p)
        for _ in range(2000):
            adam_step(p, {"w": 2 * p["w"].data}, state, AdamHyper(lr=0.05))
        np.testing.assert_allclose(p["w"].data, 0.0, atol=1e-2)

    def test_non_finite_gradient_aborts_before_update(self):
        p = single([1.0, 2.0])
        state = AdamState(p)
        with pytest.raises(NumericError, match="'w'"):
            adam_step(p, {"w": np.array([np.nan, 0.0])}, state, AdamHyper())
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
        assert state.step == 0

    def test_zero_lr_is_identity(self):
        p = single([1.0, 2.0])
        adam_step(p, {"w": np.array([1.0, 1.0])}, AdamState(p), AdamHyper(lr=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    @pytest.mark.parametrize("kw", [{"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}])
    def test_hyper_validation(self, kw):
        with pytest.raises(ConfigError):
            AdamHyper(**kw)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = TrainConfig(loss=LossConfig("latency_mp", Bernoulli(0.5)), epochs=3, arch="desk")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            TrainConfig(arch="huge")

    def test_bad_batch(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)


class TestTrain:
    def test_zero_lr_keeps_initialization(self, corpus, tmp_path):
        train_set, _ = corpus
        cfg = tiny_cfg(epochs=1, batch_size=len(train_set), adam=AdamHyper(lr=0.0))
        res = train(cfg, train_set, out_dir=tmp_path)
        loaded, meta = load_checkpoint(res.checkpoint)
        init = init_params(cfg.arch_config(), seed=cfg.seed)
        np.testing.assert_array_equal(loaded.flat(), init.flat())
        assert meta["epoch"] == 1

    def test_outputs(self, corpus, tmp_path):
        train_set, dev = corpus
        res = train(tiny_cfg(), train_set, dev, out_dir=tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == METRICS_COLUMNS
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert sorted(os.listdir(tmp_path / "checkpoints")) == ["epoch_001.ckpt", "epoch_002.ckpt"]
        assert (tmp_path / "timing.csv").exists()
        assert len(res.consumed_ids) == 2 * len(train_set)
        assert 0.0 <= res.metrics[-1].dev_acc <= 1.0

    def test_deterministic(self, corpus, tmp_path):
        train_set, dev = corpus
        cfg = tiny_cfg(loss=LossConfig("latency_mp", Bernoulli(0.5)))
        train(cfg, train_set, dev, out_dir=tmp_path / "a")
        train(cfg, train_set, dev, out_dir=tmp_path / "b")
        for name in ("metrics.csv", "checkpoint.ckpt", "checkpoints/epoch_001.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_input_order_does_not_matter(self, corpus):
        train_set, _ = corpus
        a = train(tiny_cfg(epochs=1), train_set)
        b = train(tiny_cfg(epochs=1), list(reversed(train_set)))
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_shuffle_visits_every_example(self, corpus):
        train_set, _ = corpus
        res = train(tiny_cfg(epochs=1), train_set)
        assert sorted(res.consumed_ids) == sorted(e.id for e in train_set)

    def test_bernoulli_zero_equals_max_pool(self, corpus):
        train_set, _ = corpus
        a = train(tiny_cfg(loss=LossConfig("max_pool")), train_set)
        b = train(tiny_cfg(loss=LossConfig("latency_mp", Bernoulli(0.0))), train_set)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    @pytest.mark.parametrize(
        "loss", [LossConfig("xe_aligned"), LossConfig("max_latency", f=30), LossConfig("latency_mp", Bernoulli(1.0))]
    )
    def test_every_loss_trains(self, corpus, loss):
        train_set, dev = corpus
        res = train(tiny_cfg(loss=loss), train_set, dev)
        assert all(np.isfinite(m.train_loss) for m in res.metrics)

    def test_max_latency_masking_everything(self):
        feats = np.zeros((120, 64), dtype=np.float32)
        exs = [Example("p", feats, 1, endpoint_frame=30, keyword_start=10, rough_start=0, rough_end=119, align_frame=30)]
        with pytest.raises(ConfigError, match="increase f"):
            train(tiny_cfg(epochs=1, loss=LossConfig("max_latency", f=0)), exs)

    def test_empty_training_set(self):
        with pytest.raises(ConfigError):
            train(tiny_cfg(), [])

    def test_substreams_are_independent_of_schedule(self):
        a = substream(0, "pos-00001", 3, 1).random(4)
        b = substream(0, "pos-00001", 3, 1).random(4)
        c = substream(0, "pos-00001", 3, 0).random(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
