"""Scikit-learn style estimator around the trainer and detector.

``X`` is a sequence of utterances: either :class:`~kwslab.data.Example`
objects (which carry labels, rough segments and keyword endpoints) or raw
``(frames, 64)`` feature matrices paired with labels ``y``. Raw matrices are
treated as whole-utterance segments with no endpoint, so the aligned and
max-latency losses need Examples.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Example
from .errors import ConfigError
from .evaluate import DEFAULT_DEBOUNCE_MS, compute_det, operating_point, scan_track
from .losses import LossConfig, parse_distribution
from .model import N_MELS, WINDOW_FRAMES, posterior_track
from .trainer import AdamHyper, TrainConfig, train
from .validation import check_features, check_label


def as_examples(X, y=None):
    """Normalize ``X`` (and optional ``y``) into a list of Examples."""
    X = list(X)
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ConfigError(f"y has shape {y.shape}, expected ({len(X)},)")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Example):
            if y is not None and int(y[i]) != item.label:
                raise ConfigError(f"label mismatch for {item.id}: y says {int(y[i])}, example says {item.label}")
            out.append(item)
            continue
        feats = check_features(item, min_frames=WINDOW_FRAMES, n_mels=N_MELS)
        label = check_label(int(y[i])) if y is not None else 0
        out.append(Example(f"x{i:06d}", feats, label, rough_start=0, rough_end=feats.shape[0] - 1))
    return out


class KeywordSpotter(ClassifierMixin, BaseEstimator):
    """Binary keyword detector trained with a configurable loss.

    Args:
        loss: one of ``max_pool``, ``latency_mp``, ``max_latency`` or
            ``xe_aligned``.
        dist: shift distribution for ``latency_mp``, e.g. ``"bernoulli(0.5)"``.
        f: frames allowed past the endpoint for ``max_latency``.
        arch: architecture preset name (``default``, ``desk`` or ``tiny``).
        epochs, batch_size, lr, dropout_rate, posterior_stride, seed,
            precision: training settings passed to :class:`TrainConfig`.
        threshold: decision threshold on the utterance peak score used by
            :meth:`predict`. :meth:`calibrate` can replace it.

    Attributes:
        params_: trained :class:`~kwslab.model.ModelParams`.
        metrics_: list of per-epoch metrics.
        classes_: ``array([0, 1])``.
    """

    def __init__(
        self,
        loss="max_pool",
        dist=None,
        f=None,
        arch="default",
        epochs=15,
        batch_size=32,
        lr=1e-3,
        dropout_rate=0.3,
        posterior_stride=10,
        seed=0,
        precision="float32",
        threshold=0.5,
    ):
        self.loss = loss
        self.dist = dist
        self.f = f
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dropout_rate = dropout_rate
        self.posterior_stride = posterior_stride
        self.seed = seed
        self.precision = precision
        self.threshold = threshold

    def train_config(self):
        dist = parse_distribution(self.dist) if isinstance(self.dist, str) else self.dist
        return TrainConfig(
            loss=LossConfig(self.loss, dist, self.f),
            adam=AdamHyper(lr=self.lr),
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            posterior_stride=self.posterior_stride,
            dropout_rate=self.dropout_rate,
            arch=self.arch,
            precision=self.precision,
        )

    def fit(self, X, y=None, dev=None):
        """Train on ``X``; ``dev`` is an optional held-out sequence of Examples."""
        examples = as_examples(X, y)
        needs_endpoint = self.loss in ("max_latency", "xe_aligned")
        if needs_endpoint and any(e.label == 1 and e.endpoint_frame is None for e in examples):
            raise ConfigError(f"loss {self.loss!r} needs Examples with keyword endpoints")
        result = train(self.train_config(), examples, as_examples(dev) if dev is not None else ())
        self.params_ = result.params
        self.metrics_ = result.metrics
        self.classes_ = np.array([0, 1])
        return self

    def posterior_tracks(self, X):
        """Eval-mode posterior track of every utterance in ``X``."""
        check_is_fitted(self, "params_")
        return [posterior_track(self.params_, e.features, self.posterior_stride) for e in as_examples(X)]

    def decision_function(self, X):
        """Peak keyword posterior of each utterance."""
        return np.array([t.p1.max() for t in self.posterior_tracks(X)])

    def predict_proba(self, X):
        peak = self.decision_function(X)
        return np.column_stack([1.0 - peak, peak])

    def predict(self, X):
        return (self.decision_function(X) >= self.threshold).astype(np.int64)

    def calibrate(self, X, y=None, target_frr=0.05):
        """Set ``threshold`` to the fixed-FRR operating point on ``X``."""
        examples = as_examples(X, y)
        scores = self.decision_function(examples)
        labels = np.array([e.label for e in examples])
        op = operating_point(compute_det(scores[labels == 1], scores[labels == 0]), target_frr)
        self.threshold = op.threshold
        return op

    def detect(self, X, debounce_ms=DEFAULT_DEBOUNCE_MS):
        """Streaming detections at the current threshold, one list per utterance."""
        examples = as_examples(X)
        tracks = self.posterior_tracks(examples)
        return [
            scan_track(t.p1, t.frame_times_ms, self.threshold, debounce_ms, e.id) for e, t in zip(examples, tracks)
        ]
