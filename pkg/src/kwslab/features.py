"""Log mel-filterbank energy (LFBE) frontend and a minimal WAV reader/writer."""

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import (
    ContractError,
    EmptyInputError,
    ParseError,
    ResampleRequiredError,
    UnsupportedFormatError,
)

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
FRAME_SHIFT_MS = 10
FRAME_LEN_MS = 25


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ContractError("audio must be a non-empty 1-d array")


@dataclass(frozen=True)
class LfbeConfig:
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = None  # defaults to sample_rate / 2
    energy_floor: float = 1e-10


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=64, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=60.0, fmax=None):
    """Triangular HTK-mel filters over rfft bins, each normalized to unit sum.

    Returns:
        (weights [n_mels, n_fft // 2 + 1], center frequencies in Hz [n_mels])
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights, edges[1:-1]


def _hann(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples, frame_len=FRAME_LEN, hop=HOP):
    return (n_samples - frame_len) // hop + 1


def compute_lfbe(audio, config=LfbeConfig()):
    """Compute a ``[T', n_mels]`` LFBE matrix from 16 kHz mono audio.

    Frames are 25 ms long with a 10 ms hop; each frame is Hann-windowed,
    zero-padded to a 512-point DFT, and its power spectrum is pooled by the
    mel filterbank before taking ``log(max(energy, energy_floor))``.
    """
    if not isinstance(audio, AudioBuffer):
        audio = AudioBuffer(audio)
    if audio.sample_rate != SAMPLE_RATE:
        raise ResampleRequiredError(
            f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz; resample before calling"
        )
    x = audio.samples
    if x.size < FRAME_LEN:
        raise EmptyInputError(f"audio has {x.size} samples; need at least {FRAME_LEN} for one frame")
    n_frames = frame_count(x.size)
    idx = np.arange(FRAME_LEN)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = x[idx] * _hann(FRAME_LEN)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    weights, _ = mel_filterbank(config.n_mels, N_FFT, audio.sample_rate, config.fmin, config.fmax)
    energy = power @ weights.T
    return np.log(np.maximum(energy, config.energy_floor))


class LFBETransformer(TransformerMixin, BaseEstimator):
    """Stateless sklearn transformer turning audio into LFBE matrices."""

    def __init__(self, n_mels=64, fmin=60.0, fmax=None, energy_floor=1e-10):
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax
        self.energy_floor = energy_floor

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = LfbeConfig(self.n_mels, self.fmin, self.fmax, self.energy_floor)
        return [compute_lfbe(a, cfg) for a in X]


# ----------------------------------------------------------------------------
# WAV
# ----------------------------------------------------------------------------

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path):
    """Read a mono RIFF/WAVE file (16-bit PCM or 32-bit float)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ParseError("file too short for RIFF header", 0)
    if blob[0:4] != b"RIFF":
        raise ParseError("missing RIFF tag", 0)
    if blob[8:12] != b"WAVE":
        raise ParseError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        tag = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise ParseError(f"chunk {tag!r} overruns file", pos)
        if tag == b"fmt ":
            if size < 16:
                raise ParseError("fmt chunk shorter than 16 bytes", pos)
            fmt = struct.unpack_from("<HHIIHH", blob, body) + (pos,)
        elif tag == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise ParseError("no fmt chunk", pos)
    if data is None:
        raise ParseError("no data chunk", pos)
    code, channels, rate, _, _, bits, fmt_pos = fmt
    if code == _EXTENSIBLE:
        (code,) = struct.unpack_from("<H", blob, fmt_pos + 8 + 24)
    if channels != 1:
        raise UnsupportedFormatError(f"{channels}-channel audio is not supported; expected mono")
    start, size = data
    raw = blob[start : start + size]
    if code == _PCM and bits == 16:
        samples = np.frombuffer(raw[: size - size % 2], dtype="<i2").astype(np.float64) / 32768.0
    elif code == _FLOAT and bits == 32:
        samples = np.frombuffer(raw[: size - size % 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(f"unsupported sample format code={code} bits={bits}")
    return AudioBuffer(samples, rate)


def write_wav(path, audio, sample_format="float32"):
    """Write mono audio as 16-bit PCM ("pcm16") or 32-bit float ("float32")."""
    if sample_format == "pcm16":
        q = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
        code, bits, payload = _PCM, 16, q.tobytes()
    elif sample_format == "float32":
        code, bits, payload = _FLOAT, 32, audio.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown sample_format {sample_format!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", code, 1, audio.sample_rate, audio.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
