import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kwslab.data import CorpusConfig, generate
from kwslab.errors import ConfigError, DimensionError, UtteranceTooShortError
from kwslab.estimator import KeywordSpotter, as_examples
from kwslab.losses import Bernoulli, LossConfig


@pytest.fixture(scope="module")
def corpus():
    examples = list(generate(CorpusConfig(n_pos=12, n_neg=12, seed=3)))
    return [e for e in examples if e.split == "train"], [e for e in examples if e.split != "train"]


def small(**kw):
    base = dict(arch="tiny", epochs=1, batch_size=4)
    base.update(kw)
    return KeywordSpotter(**base)


class TestParams:
    def test_get_params_defaults(self):
        params = KeywordSpotter().get_params()
        assert params["loss"] == "max_pool" and params["epochs"] == 15 and params["batch_size"] == 32

    def test_set_params_and_clone(self):
        est = KeywordSpotter().set_params(loss="latency_mp", dist="bernoulli(0.5)")
        copy = clone(est)
        assert copy.get_params() == est.get_params()
        assert copy.train_config().loss == LossConfig("latency_mp", Bernoulli(0.5))

    def test_bad_loss_rejected_at_fit(self, corpus):
        with pytest.raises(ConfigError):
            small(loss="hinge").fit(corpus[0])


class TestAsExamples:
    def test_raw_matrices(self):
        X = [np.zeros((80, 64)), np.ones((90, 64))]
        exs = as_examples(X, [0, 1])
        assert [e.label for e in exs] == [0, 1]
        assert exs[1].rough_end == 89 and exs[1].endpoint_frame is None

    def test_label_length_mismatch(self):
        with pytest.raises(ConfigError):
            as_examples([np.zeros((80, 64))], [0, 1])

    def test_label_disagrees_with_example(self, corpus):
        ex = corpus[0][0]
        with pytest.raises(ConfigError):
            as_examples([ex], [1 - ex.label])

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            as_examples([np.zeros((80, 40))], [0])

    def test_too_short(self):
        with pytest.raises(UtteranceTooShortError):
            as_examples([np.zeros((40, 64))], [0])


class TestFitPredict:
    def test_not_fitted(self, corpus):
        with pytest.raises(NotFittedError):
            small().predict(corpus[1])

    def test_fit_predict_shapes(self, corpus):
        train_set, held_out = corpus
        est = small().fit(train_set, dev=held_out)
        assert len(est.metrics_) == 1
        proba = est.predict_proba(held_out)
        assert proba.shape == (len(held_out), 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert set(est.predict(held_out)) <= {0, 1}
        np.testing.assert_array_equal(est.classes_, [0, 1])

    def test_raw_matrices_train(self, corpus):
        train_set, _ = corpus
        X = [e.features for e in train_set]
        y = [e.label for e in train_set]
        est = small().fit(X, y)
        assert est.decision_function(X).shape == (len(X),)

    def test_fit_is_deterministic(self, corpus):
        train_set, held_out = corpus
        a = small(seed=5).fit(train_set).decision_function(held_out)
        b = small(seed=5).fit(train_set).decision_function(held_out)
        np.testing.assert_array_equal(a, b)

    def test_endpoint_losses_need_examples(self, corpus):
        train_set, _ = corpus
        X = [e.features for e in train_set]
        y = [e.label for e in train_set]
        with pytest.raises(ConfigError, match="endpoints"):
            small(loss="max_latency", f=10).fit(X, y)

    def test_calibrate_meets_target(self, corpus):
        train_set, held_out = corpus
        est = small().fit(train_set)
        op = est.calibrate(held_out, target_frr=0.5)
        assert est.threshold == op.threshold
        assert op.achieved_frr <= 0.5
        positives = [e for e in held_out if e.label == 1]
        assert np.mean(est.predict(positives) == 0) <= 0.5

    def test_detect(self, corpus):
        train_set, held_out = corpus
        est = small(threshold=1e-12).fit(train_set)
        dets = est.detect(held_out[:2])
        assert len(dets) == 2
        assert all(len(d) >= 1 and d[0].utterance_id == e.id for d, e in zip(dets, held_out[:2]))
