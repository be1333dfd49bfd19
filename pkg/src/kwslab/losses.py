"""Max-pooling loss family with latency control.

Every loss here evaluates a per-frame loss ``L(y, P_t)`` at one row ``t`` of a
posterior track ``[P_0, ..., P_T]``. Rows are chosen as follows:

* negatives (``y == 0``): ``argmin_i p0[i]``
* positives: ``max(argmax_i py[i] - beta, 0)`` with ``beta`` drawn from a
  :class:`ShiftDistribution` (``beta == 0`` gives the plain max-pooling loss)

All ties go to the earliest row. Tracks may be given as a differentiable
:class:`~kwslab.autodiff.Tensor`, a :class:`~kwslab.model.PosteriorTrack`, or
a plain array of shape ``[T+1, K]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DegenerateMaskError
from .model import FRAME_SHIFT_MS, PosteriorTrack
from .validation import check_label


# ----------------------------------------------------------------------------
# shift distributions
# ----------------------------------------------------------------------------


class ShiftDistribution:
    """Distribution of the non-negative integer shift ``beta``."""

    def sample(self, rng):
        raise NotImplementedError

    def spec(self):
        """Short string form, e.g. ``bernoulli(0.5)``."""
        raise NotImplementedError


@dataclass(frozen=True)
class Bernoulli(ShiftDistribution):
    b: float

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError(f"Bernoulli parameter must be in [0, 1], got {self.b}")

    def sample(self, rng):
        return int(rng.random() < self.b)

    def spec(self):
        return f"bernoulli({self.b:g})"


@dataclass(frozen=True)
class Constant(ShiftDistribution):
    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise ConfigError(f"Constant shift must be a non-negative integer, got {self.k}")

    def sample(self, rng):
        rng.random()  # keep stream consumption identical across distributions
        return int(self.k)

    def spec(self):
        return f"constant({int(self.k)})"


@dataclass(frozen=True)
class Poisson(ShiftDistribution):
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"Poisson rate must be positive, got {self.lam}")

    def sample(self, rng):
        # inversion with a single uniform
        u = rng.random()
        k = 0
        p = math.exp(-self.lam)
        cdf = p
        while u > cdf and p > 0.0:
            k += 1
            p *= self.lam / k
            cdf += p
        return k

    def spec(self):
        return f"poisson({self.lam:g})"


def parse_distribution(text):
    """Parse ``bernoulli(0.5)``, ``constant(2)`` or ``poisson(1.5)``."""
    text = text.strip().lower()
    try:
        name, arg = text.rstrip(")").split("(")
        value = float(arg)
    except ValueError:
        raise ConfigError(f"cannot parse shift distribution {text!r}") from None
    if name == "bernoulli":
        return Bernoulli(value)
    if name == "constant":
        return Constant(int(value))
    if name == "poisson":
        return Poisson(value)
    raise ConfigError(f"unknown shift distribution {name!r}")


# ----------------------------------------------------------------------------
# selection
# ----------------------------------------------------------------------------


def _values(track):
    if isinstance(track, ad.Tensor):
        return np.asarray(track.data)
    if isinstance(track, PosteriorTrack):
        return track.probs
    return np.asarray(track)


def _as_tensor(track):
    if isinstance(track, ad.Tensor):
        return track
    return ad.Tensor(_values(track))


def select_frame(track, label, beta=0):
    """Row of ``track`` that the loss is evaluated on.

    ``label == 0`` returns ``argmin p0`` and ignores ``beta``; otherwise the
    row is ``max(argmax p_label - beta, 0)``.
    """
    probs = _values(track)
    if probs.ndim != 2 or len(probs) == 0:
        raise ContractError(f"track must be a non-empty [T+1, K] matrix, got shape {probs.shape}")
    if beta < 0:
        raise ContractError(f"beta must be non-negative, got {beta}")
    if label == 0:
        return int(np.argmin(probs[:, 0]))
    if not 0 < label < probs.shape[1]:
        raise ContractError(f"label {label} out of range for {probs.shape[1]} classes")
    return max(int(np.argmax(probs[:, label])) - int(beta), 0)


# ----------------------------------------------------------------------------
# per-frame losses
# ----------------------------------------------------------------------------


def cross_entropy(label, posteriors):
    """``-log P[label]`` (floored at 1e-12) for one posterior vector."""
    return -ad.log(posteriors[label])


def squared_error(label, posteriors):
    onehot = np.zeros(posteriors.shape)
    onehot[label] = 1.0
    diff = posteriors - onehot
    return (diff * diff).sum()


def focal(label, posteriors, gamma=2.0):
    p = posteriors[label]
    return ((1.0 - p) ** gamma) * (-ad.log(p))


# ----------------------------------------------------------------------------
# sequence losses
# ----------------------------------------------------------------------------


def max_pooling_xe_loss(label, track):
    """Max-pooling cross-entropy: ``-log p_{y,t}`` at the max (min for negatives) row."""
    label = check_label(label)
    probs = _as_tensor(track)
    return cross_entropy(label, probs[select_frame(probs, label, 0)])


def latency_controlled_loss(label, track, dist, rng):
    """Max-pooling cross-entropy with the positive row shifted earlier by ``beta ~ dist``.

    One ``beta`` is drawn per call. Negatives ignore it, so their loss is the
    plain max-pooling loss.
    """
    return generalized_latency_loss(label, track, cross_entropy, dist, rng)


def generalized_latency_loss(label, track, base_loss, dist, rng):
    """Apply any per-frame loss ``base_loss(y, P_t)`` at the latency-shifted row."""
    label = check_label(label)
    probs = _as_tensor(track)
    beta = dist.sample(rng)
    return base_loss(label, probs[select_frame(probs, label, beta)])


def aligned_xe_loss(label, track, align_index):
    """Cross-entropy at a fixed, externally supplied row."""
    label = check_label(label)
    probs = _as_tensor(track)
    n = probs.shape[0]
    if not 0 <= align_index < n:
        raise ContractError(f"align_index {align_index} outside [0, {n - 1}]")
    return cross_entropy(label, probs[int(align_index)])


def max_latency_rows(frame_times_ms, endpoint_frame, f):
    """Indices of rows stamped no later than ``f`` frames past the endpoint."""
    if f < 0:
        raise ConfigError(f"max-latency f must be >= 0, got {f}")
    limit = (endpoint_frame + f) * FRAME_SHIFT_MS
    rows = np.flatnonzero(np.asarray(frame_times_ms) <= limit)
    if rows.size == 0:
        raise DegenerateMaskError(
            f"no track row ends at or before {limit} ms (endpoint frame {endpoint_frame}, f={f})"
        )
    return rows


def max_latency_mask(track, endpoint_index, f):
    """Restrict a positive example's track to rows at most ``f`` frames after the endpoint."""
    return track.subset(max_latency_rows(track.frame_times_ms, endpoint_index, f))


# ----------------------------------------------------------------------------
# loss configuration used by the trainer
# ----------------------------------------------------------------------------

LOSS_KINDS = ("xe_aligned", "max_pool", "latency_mp", "max_latency")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "max_pool"
    dist: ShiftDistribution = None
    f: int = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.kind!r}; choose from {', '.join(LOSS_KINDS)}")
        if self.kind == "latency_mp" and self.dist is None:
            raise ConfigError("latency_mp loss needs a shift distribution")
        if self.kind == "max_latency" and (self.f is None or self.f < 0):
            raise ConfigError("max_latency loss needs f >= 0")

    def describe(self):
        if self.kind == "latency_mp":
            return f"latency_mp{{{self.dist.spec()}}}"
        if self.kind == "max_latency":
            return f"max_latency{{f={self.f}}}"
        return self.kind


def choose_row(cfg, label, track, rng, endpoint_frame=None, align_frame=None):
    """Row index the configured loss evaluates, computed from track values only.

    ``rng`` supplies ``beta`` (latency_mp) and the random row used for
    negatives under the aligned loss. Raises :class:`DegenerateMaskError` when
    max-latency masking leaves no row.
    """
    probs = _values(track)
    if cfg.kind == "max_pool":
        return select_frame(probs, label, 0)
    if cfg.kind == "latency_mp":
        return select_frame(probs, label, cfg.dist.sample(rng))
    if cfg.kind == "max_latency":
        if label == 0:
            return select_frame(probs, 0, 0)
        rows = max_latency_rows(track.frame_times_ms, endpoint_frame, cfg.f)
        return int(rows[select_frame(probs[rows], label, 0)])
    # xe_aligned
    if label == 0:
        return int(rng.integers(len(probs)))
    return aligned_row(track.frame_times_ms, align_frame)


def aligned_row(frame_times_ms, align_frame):
    """Row whose window ends closest to ``align_frame`` (earliest on ties)."""
    ends = np.asarray(frame_times_ms) // FRAME_SHIFT_MS
    return int(np.argmin(np.abs(ends - align_frame)))
