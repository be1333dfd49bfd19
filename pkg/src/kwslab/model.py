"""Keyword CNN: five convolutions and three fully connected layers over 76x64 windows.

The first convolution is followed by 2x2 max pooling and the second one
strides by 3 along time. Channel widths are not fixed by the architecture
description, so they live in :class:`ArchConfig`.
"""

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, DimensionError, ParseError
from .validation import check_features, check_windows

WINDOW_FRAMES = 76
N_MELS = 64
FRAME_SHIFT_MS = 10


@dataclass(frozen=True)
class ArchConfig:
    conv_channels: tuple = (32, 32, 64, 64, 64)
    conv_kernels: tuple = ((5, 5), (3, 3), (3, 3), (3, 3), (3, 3))
    conv_strides: tuple = ((1, 1), (3, 1), (1, 1), (1, 1), (1, 1))
    pool: tuple = (2, 2)
    fc_widths: tuple = (128, 64, 2)
    dropout_rate: float = 0.3
    input_frames: int = WINDOW_FRAMES
    n_mels: int = N_MELS

    def __post_init__(self):
        # normalize lists coming from JSON / config files into hashable tuples
        for name in ("conv_kernels", "conv_strides"):
            object.__setattr__(self, name, tuple(tuple(int(v) for v in kv) for kv in getattr(self, name)))
        for name in ("conv_channels", "pool", "fc_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ConfigError("conv_channels, conv_kernels and conv_strides must have equal length")
        if self.fc_widths[-1] != 2:
            raise ConfigError(f"final layer must have 2 outputs, got {self.fc_widths[-1]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        self.feature_shapes()

    def feature_shapes(self):
        """Shapes ``(C, H, W)`` after each conv block, validating the chain."""
        c, h, w = 1, self.input_frames, self.n_mels
        shapes = []
        for i, (c_out, (kh, kw), (sh, sw)) in enumerate(zip(self.conv_channels, self.conv_kernels, self.conv_strides)):
            if kh > h or kw > w:
                raise ConfigError(f"conv{i + 1}: kernel {(kh, kw)} exceeds input {(h, w)}")
            c, h, w = c_out, (h - kh) // sh + 1, (w - kw) // sw + 1
            if i == 0:
                ph, pw = self.pool
                if h % ph or w % pw:
                    raise ConfigError(f"pool {self.pool} does not divide conv1 output {(h, w)}")
                h, w = h // ph, w // pw
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self):
        c, h, w = self.feature_shapes()[-1]
        return c * h * w

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "default": ArchConfig(),
    # same topology at a quarter of the width; used for single-core sweeps
    "desk": ArchConfig(conv_channels=(8, 8, 16, 16, 16), fc_widths=(64, 32, 2)),
    "tiny": ArchConfig(conv_channels=(2, 2, 3, 3, 3), fc_widths=(6, 4, 2)),
}


class ModelParams:
    """Named parameter tensors plus the architecture that shapes them."""

    def __init__(self, arch, tensors):
        self.arch = arch
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        """Deep copy that keeps each tensor's dtype."""
        tensors = []
        for k, v in self.tensors.items():
            t = ad.Tensor(v.data, requires_grad=True)
            t.data = v.data.copy()
            tensors.append((k, t))
        return ModelParams(self.arch, tensors)

    def astype(self, precision):
        with ad.precision(precision):
            return ModelParams(self.arch, [(k, ad.Tensor(v.data, requires_grad=True)) for k, v in self.items()])

    def flat(self):
        return np.concatenate([t.data.ravel().astype(np.float64) for t in self.tensors.values()])

    def n_params(self):
        return sum(t.data.size for t in self.tensors.values())


def param_shapes(arch):
    shapes = []
    c_in = 1
    for i, (c_out, (kh, kw)) in enumerate(zip(arch.conv_channels, arch.conv_kernels), start=1):
        shapes.append((f"conv{i}.kernels", (c_out, c_in, kh, kw)))
        shapes.append((f"conv{i}.bias", (c_out,)))
        c_in = c_out
    n_in = arch.flat_dim
    for i, width in enumerate(arch.fc_widths, start=1):
        shapes.append((f"fc{i}.weights", (width, n_in)))
        shapes.append((f"fc{i}.bias", (width,)))
        n_in = width
    return shapes


def init_params(arch=None, seed=0):
    """Uniform fan-in scaled weights (He-uniform limit), zero biases."""
    arch = arch or ArchConfig()
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in param_shapes(arch):
        if name.endswith("bias"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-limit, limit, size=shape)
        tensors.append((name, ad.Tensor(value, requires_grad=True)))
    return ModelParams(arch, tensors)


def dropout_shapes(arch):
    return [arch.flat_dim] + list(arch.fc_widths[:-1])


def draw_masks(arch, n, rng):
    """Keep-masks for the dropout sites of ``n`` windows (flattened conv output and hidden FC layers)."""
    keep = 1.0 - arch.dropout_rate
    return [(rng.random((n, d)) < keep) for d in dropout_shapes(arch)]


def forward_logits(params, windows, masks=None):
    """Logits ``[N, 2]`` for windows ``[N, 76, 64]``; ``masks`` switches dropout on."""
    arch = params.arch
    if not isinstance(windows, ad.Tensor):
        windows = ad.Tensor(check_windows(windows, arch.input_frames, arch.n_mels))
    x = windows
    n = x.shape[0]
    h = x.reshape(n, 1, arch.input_frames, arch.n_mels)
    for i, stride in enumerate(arch.conv_strides, start=1):
        h = ad.relu(ad.conv2d(h, params[f"conv{i}.kernels"], params[f"conv{i}.bias"], stride))
        if i == 1:
            h = ad.max_pool2d(h, arch.pool)
    h = h.reshape(n, arch.flat_dim)
    n_fc = len(arch.fc_widths)
    for i in range(1, n_fc + 1):
        if masks is not None:
            h = ad.dropout(h, masks[i - 1], arch.dropout_rate)
        h = ad.affine(h, params[f"fc{i}.weights"], params[f"fc{i}.bias"])
        if i < n_fc:
            h = ad.relu(h)
    return h


def model_forward(params, window, mode="eval", rng=None):
    """Posterior pair ``(p0, p1)`` for one 76x64 window."""
    window = np.asarray(window.data if isinstance(window, ad.Tensor) else window)
    arch = params.arch
    if window.shape != (arch.input_frames, arch.n_mels):
        raise DimensionError(f"window must be {(arch.input_frames, arch.n_mels)}, got {window.shape}")
    masks = _mode_masks(arch, 1, mode, rng)
    with ad.no_grad():
        logits = forward_logits(params, window[None], masks)
    p = _posteriors(logits.data)[0]
    return float(p[0]), float(p[1])


def _mode_masks(arch, n, mode, rng):
    if mode == "eval":
        return None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("train mode needs an rng for dropout")
    return draw_masks(arch, n, rng)


def _posteriors(logits):
    # float64 softmax keeps separable scores from saturating at exactly 1.0
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PosteriorTrack:
    """Per-row class posteriors; column 0 is non-keyword, column 1 keyword."""

    probs: np.ndarray
    frame_times_ms: np.ndarray
    start_frame: int = 0
    stride_frames: int = 10

    def __len__(self):
        return len(self.probs)

    @property
    def p0(self):
        return self.probs[:, 0]

    @property
    def p1(self):
        return self.probs[:, 1]

    @property
    def window_end_frames(self):
        return self.frame_times_ms // FRAME_SHIFT_MS

    def subset(self, rows):
        rows = np.asarray(rows)
        return PosteriorTrack(self.probs[rows], self.frame_times_ms[rows], self.start_frame, self.stride_frames)


def n_track_rows(n_frames, stride_frames=10, window=WINDOW_FRAMES):
    return (n_frames - window) // stride_frames + 1


def windows_of(features, stride_frames=10, window=WINDOW_FRAMES):
    """View ``[T+1, window, n_mels]`` of the sliding windows over ``features``."""
    features = check_features(features, min_frames=window)
    view = np.lib.stride_tricks.sliding_window_view(features, (window, features.shape[1]))[:, 0]
    return view[::stride_frames]


def track_times(n_rows, stride_frames=10, start_frame=0, window=WINDOW_FRAMES):
    return (start_frame + np.arange(n_rows) * stride_frames + window - 1) * FRAME_SHIFT_MS


def posterior_track(params, features, stride_frames=10, mode="eval", rng=None, start_frame=0, masks=None, chunk=64):
    """Slide the detector over ``features`` ``[T', 64]`` and collect posteriors.

    Row ``i`` is computed from frames ``[i * stride, i * stride + 76)`` and is
    stamped with the time of that window's last frame. ``start_frame`` offsets
    the timestamps when ``features`` is a crop of a longer utterance.
    """
    if stride_frames < 1:
        raise ConfigError(f"stride_frames must be >= 1, got {stride_frames}")
    arch = params.arch
    wins = windows_of(features, stride_frames, arch.input_frames)
    if wins.shape[2] != arch.n_mels:
        raise DimensionError(f"features must have {arch.n_mels} columns, got {wins.shape[2]}")
    n = len(wins)
    if masks is None:
        masks = _mode_masks(arch, n, mode, rng)
    logits = []
    with ad.no_grad():
        for lo in range(0, n, chunk):
            m = None if masks is None else [mk[lo : lo + chunk] for mk in masks]
            logits.append(forward_logits(params, np.ascontiguousarray(wins[lo : lo + chunk]), m).data)
    probs = _posteriors(np.concatenate(logits))
    times = track_times(n, stride_frames, start_frame, arch.input_frames)
    return PosteriorTrack(probs, times, start_frame, stride_frames)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"KWSCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params, metadata=None):
    """Write ``params`` in the versioned little-endian checkpoint container.

    Layout: magic (8 bytes) | u32 version | u32 header length | UTF-8 JSON
    header {arch, params: [[name, shape]...], metadata} | u64 value count |
    float64 blob | u32 CRC-32 of all preceding bytes.
    """
    header = {
        "arch": params.arch.to_dict(),
        "params": [[name, list(t.shape)] for name, t in params.items()],
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = params.flat().astype("<f8").tobytes()
    body = (
        CKPT_MAGIC
        + struct.pack("<II", CKPT_VERSION, len(hbytes))
        + hbytes
        + struct.pack("<Q", params.n_params())
        + blob
    )
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(ModelParams, metadata)`` in the current precision."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise ParseError("not a kwslab checkpoint", 0)
    if len(raw) < 24:
        raise ParseError("truncated checkpoint", len(raw))
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ParseError(f"checkpoint CRC mismatch in {path}", len(raw) - 4)
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", raw, 16 + hlen)
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=24 + hlen)
    arch = ArchConfig.from_dict(header["arch"])
    tensors, pos = [], 0
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        tensors.append((name, ad.Tensor(values[pos : pos + size].reshape(shape).copy(), requires_grad=True)))
        pos += size
    if pos != count:
        raise ParseError("parameter table does not match blob size", 24 + hlen)
    return ModelParams(arch, tensors), header["metadata"]
