"""Mini-batch training with Adam, dropout and loss-family dispatch.

Only the row a loss selects carries gradient, so each step first scores every
window of every example without a graph (train-mode dropout included), picks
the rows, then rebuilds one batched graph over the selected windows with the
same dropout masks.
"""

import csv
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateMaskError, NumericError
from .losses import LossConfig, choose_row, cross_entropy, parse_distribution
from .model import PRESETS, draw_masks, forward_logits, init_params, posterior_track, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "dev_loss", "dev_acc", "log_floor_hits")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    adam: AdamHyper = AdamHyper()
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    posterior_stride: int = 10
    dropout_rate: float = 0.3
    arch: str = "default"
    precision: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.posterior_stride < 1:
            raise ConfigError("posterior_stride must be >= 1")
        if self.arch not in PRESETS:
            raise ConfigError(f"unknown arch preset {self.arch!r}; choose from {', '.join(PRESETS)}")

    @property
    def lr(self):
        return self.adam.lr

    def arch_config(self):
        return replace(PRESETS[self.arch], dropout_rate=self.dropout_rate)

    def to_dict(self):
        d = asdict(self)
        d["loss"] = {"kind": self.loss.kind, "dist": self.loss.dist.spec() if self.loss.dist else None, "f": self.loss.f}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        loss = d.pop("loss", None) or {}
        dist = loss.get("dist")
        loss_cfg = LossConfig(loss.get("kind", "max_pool"), parse_distribution(dist) if dist else None, loss.get("f"))
        adam = AdamHyper(**d.pop("adam", {}))
        return cls(loss=loss_cfg, adam=adam, **d)


class AdamState:
    """First/second moments per parameter name and the step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def adam_step(params, grads, state, hyper):
    """Apply one bias-corrected Adam update in place.

    ``grads`` maps parameter names to arrays. A non-finite gradient aborts
    the whole step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        t.data = (t.data - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(t.data.dtype)
    return params, state


def substream(seed, example_id, epoch, stream):
    """Per-example generator keyed by (seed, id, epoch, stream); schedule independent."""
    return np.random.default_rng([seed, zlib.crc32(example_id.encode()), epoch, stream])


_DROPOUT, _SHIFT = 0, 1


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_acc: float
    log_floor_hits: int
    wall_ms: float = 0.0
    skipped: int = 0

    def row(self):
        return [
            self.epoch,
            f"{self.train_loss:.9g}",
            f"{self.dev_loss:.9g}",
            f"{self.dev_acc:.6f}",
            self.log_floor_hits,
        ]


@dataclass
class TrainResult:
    params: object
    metrics: list = field(default_factory=list)
    consumed_ids: list = field(default_factory=list)
    checkpoint: str = None


def _pick(cfg, params, ex, epoch, mode):
    """Score ``ex`` and return (row index, window, masks for that row) or None if masked out."""
    seg, offset = ex.segment()
    stride = cfg.posterior_stride
    arch = params.arch
    n_rows = (len(seg) - arch.input_frames) // stride + 1
    masks = draw_masks(arch, n_rows, substream(cfg.seed, ex.id, epoch, _DROPOUT)) if mode == "train" else None
    track = posterior_track(params, seg, stride, masks=masks, start_frame=offset)
    try:
        row = choose_row(
            cfg.loss,
            ex.label,
            track,
            substream(cfg.seed, ex.id, epoch, _SHIFT),
            endpoint_frame=ex.endpoint_frame,
            align_frame=ex.align_frame,
        )
    except DegenerateMaskError:
        return None, track
    window = seg[row * stride : row * stride + arch.input_frames]
    row_masks = None if masks is None else [m[row : row + 1] for m in masks]
    return (row, window, row_masks), track


def batch_loss(params, picks, labels):
    """Mean cross-entropy over the selected windows, as a differentiable scalar."""
    windows = np.stack([p[1] for p in picks])
    masks = None
    if picks[0][2] is not None:
        masks = [np.concatenate([p[2][k] for p in picks]) for k in range(len(picks[0][2]))]
    probs = ad.softmax(forward_logits(params, windows, masks))
    losses = [cross_entropy(y, probs[i]) for i, y in enumerate(labels)]
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses)), [float(l.data) for l in losses]


def evaluate_dev(cfg, params, examples, epoch):
    """(mean configured loss, utterance accuracy at 0.5) in eval mode."""
    if not examples:
        return float("nan"), float("nan")
    losses, correct = [], 0
    for ex in examples:
        picked, track = _pick(cfg, params, ex, epoch, "eval")
        correct += int((track.p1.max() >= 0.5) == bool(ex.label))
        if picked is not None:
            p = track.probs[picked[0], ex.label]
            losses.append(-np.log(max(p, ad.LOG_FLOOR)))
    return (float(np.mean(losses)) if losses else float("nan")), correct / len(examples)


def train(cfg, train_examples, dev_examples=(), out_dir=None, params=None):
    """Train a detector; returns a :class:`TrainResult`.

    When ``out_dir`` is given, writes ``metrics.csv``, ``timing.csv``, one
    checkpoint per epoch under ``checkpoints/`` and the final
    ``checkpoint.ckpt``.
    """
    train_examples = sorted(train_examples, key=lambda e: e.id)
    dev_examples = sorted(dev_examples, key=lambda e: e.id)
    if not train_examples:
        raise ConfigError("training set is empty")
    with ad.precision(cfg.precision):
        if params is None:
            params = init_params(cfg.arch_config(), seed=cfg.seed)
        else:
            params = params.astype(cfg.precision)
        state = AdamState(params)
        result = TrainResult(params)
        writer = _RunWriter(out_dir, cfg) if out_dir else None
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            ad.log_floor_hits.reset()
            order = np.random.default_rng([cfg.seed, epoch, 2]).permutation(len(train_examples))
            epoch_losses, skipped, pos_used = [], 0, 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_examples[i] for i in order[lo : lo + cfg.batch_size]]
                picks, labels = [], []
                for ex in batch:
                    result.consumed_ids.append(ex.id)
                    picked, _ = _pick(cfg, params, ex, epoch, "train")
                    if picked is None:
                        skipped += 1
                        continue
                    pos_used += ex.label == 1
                    picks.append(picked)
                    labels.append(ex.label)
                if not picks:
                    continue
                params.zero_grad()
                loss, values = batch_loss(params, picks, labels)
                epoch_losses.extend(values)
                names = params.names()
                grads = dict(zip(names, ad.backward(loss, wrt=list(params))))
                adam_step(params, grads, state, cfg.adam)
            if cfg.loss.kind == "max_latency" and pos_used == 0:
                raise ConfigError("max-latency masking removed every positive example; increase f")
            floor_hits = ad.log_floor_hits.reset()
            dev_loss, dev_acc = evaluate_dev(cfg, params, dev_examples, epoch)
            m = EpochMetrics(
                epoch,
                float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                dev_loss,
                dev_acc,
                floor_hits,
                wall_ms=(time.perf_counter() - started) * 1000.0,
                skipped=skipped,
            )
            result.metrics.append(m)
            logger.info(
                "epoch %d train_loss=%.4f dev_loss=%.4f dev_acc=%.3f skipped=%d (%.1fs)",
                epoch, m.train_loss, m.dev_loss, m.dev_acc, skipped, m.wall_ms / 1000,
            )
            if writer:
                writer.epoch(m, params)
        if writer:
            result.checkpoint = writer.final(params, cfg.epochs)
    return result


class _RunWriter:
    def __init__(self, out_dir, cfg):
        self.out_dir = out_dir
        self.cfg = cfg
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self.timing_path = os.path.join(out_dir, "timing.csv")
        with open(self.metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_COLUMNS)
        with open(self.timing_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(("epoch", "wall_ms"))

    def _meta(self, epoch):
        return {"epoch": epoch, "train_config": self.cfg.to_dict(), "loss": self.cfg.loss.describe()}

    def epoch(self, m, params):
        with open(self.metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(m.row())
        with open(self.timing_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow((m.epoch, f"{m.wall_ms:.1f}"))
        save_checkpoint(os.path.join(self.out_dir, "checkpoints", f"epoch_{m.epoch:03d}.ckpt"), params, self._meta(m.epoch))

    def final(self, params, epochs):
        path = os.path.join(self.out_dir, "checkpoint.ckpt")
        save_checkpoint(path, params, self._meta(epochs))
        return path
