"""Synthetic keyword corpus with exact endpoints, and its on-disk container.

Utterances are synthesized directly as LFBE maps: a colored-noise background
with random energy blobs, plus (for positives) one keyword glyph made of
three chirp segments. Negatives carry distractors, including keyword
prefixes whose last segment is wrong or missing, so that firing before the
keyword is complete costs false accepts.

Container layout (``<root>/``)::

    manifest.txt           human-readable key = value records
    examples/<split>/<id>.bin

Each ``.bin`` block is: ``b"KWSX"`` | u32 version | u32 rows | u32 cols |
float32 little-endian data | u32 CRC-32 of the data bytes.
"""

import hashlib
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, ParseError
from .features import SAMPLE_RATE, frame_count
from .model import WINDOW_FRAMES

FORMAT_VERSION = 1
SPLITS = ("train", "dev", "eval")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
_SPLIT_SALT = {"train": 11, "dev": 22, "eval": 33}

# keyword glyph: three chirps given as (start bin, end bin, share of duration)
KEYWORD_SEGMENTS = ((12.0, 28.0, 0.30), (40.0, 22.0, 0.35), (18.0, 46.0, 0.35))
# share of negatives carrying keyword-prefix distractors
PREFIX_RATE = 0.2
# wrong endings used by prefix distractors
WRONG_ENDINGS = ((46.0, 18.0), (30.0, 31.0), (52.0, 40.0))
HARMONIC_OFFSET = 12.0
RIDGE_WIDTH = 1.5


@dataclass(frozen=True)
class CorpusConfig:
    n_pos: int = 1250
    n_neg: int = 1250
    utterance_len_range_ms: tuple = (1500, 3000)
    keyword_len_range_ms: tuple = (400, 700)
    snr_range_db: tuple = (5.0, 20.0)
    jitter_range_ms: tuple = (-100, 100)
    padding_ms: int = 200
    seed: int = 1234
    n_mels: int = 64
    min_segment_frames: int = WINDOW_FRAMES

    def __post_init__(self):
        for name in ("utterance_len_range_ms", "keyword_len_range_ms", "snr_range_db", "jitter_range_ms"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        if self.n_pos < 0 or self.n_neg < 0:
            raise ConfigError("example counts must be non-negative")
        if self.padding_ms <= max(abs(v) for v in self.jitter_range_ms):
            raise ConfigError("padding_ms must exceed the largest jitter so segments are never clipped")
        min_frames = frame_count(self.utterance_len_range_ms[0] * SAMPLE_RATE // 1000)
        need = _ms_to_frames(self.keyword_len_range_ms[1]) + WINDOW_FRAMES
        if min_frames < need:
            raise ConfigError(
                f"keyword up to {self.keyword_len_range_ms[1]} ms does not fit in a "
                f"{self.utterance_len_range_ms[0]} ms utterance with a 760 ms margin"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Example:
    id: str
    features: np.ndarray
    label: int
    endpoint_frame: int = None
    keyword_start: int = None
    rough_start: int = 0
    rough_end: int = 0
    align_frame: int = None
    split: str = "train"

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def endpoint_ms(self):
        return None if self.endpoint_frame is None else self.endpoint_frame * 10

    def segment(self):
        """Feature rows the trainer uses: the rough crop for positives, all rows otherwise."""
        if self.label == 1:
            return self.features[self.rough_start : self.rough_end + 1], self.rough_start
        return self.features, 0

    def check(self):
        if self.n_frames < WINDOW_FRAMES:
            raise DataError(f"{self.id}: {self.n_frames} frames < {WINDOW_FRAMES}")
        if self.label == 1:
            if not self.rough_start < self.keyword_start <= self.endpoint_frame < self.rough_end:
                raise DataError(f"{self.id}: keyword not strictly inside its rough segment")
            if self.rough_end - self.rough_start + 1 < WINDOW_FRAMES:
                raise DataError(f"{self.id}: rough segment shorter than one window")
            if self.rough_end >= self.n_frames:
                raise DataError(f"{self.id}: rough segment past end of utterance")


def _ms_to_frames(ms):
    return int(round(ms / 10.0))


# ----------------------------------------------------------------------------
# synthesis
# ----------------------------------------------------------------------------


def _background(rng, n_frames, n_mels):
    m = np.arange(n_mels) / (n_mels - 1)
    shape = 1.5 - 3.0 * m
    for k in (1, 2, 3):
        shape = shape + rng.normal(0, 0.3) * np.cos(np.pi * k * m + rng.uniform(0, np.pi))
    level = rng.uniform(-1.0, 1.0)
    white = rng.normal(size=(n_frames, n_mels))
    noise = np.empty_like(white)
    noise[0] = white[0]
    rho = 0.6
    for t in range(1, n_frames):
        noise[t] = rho * noise[t - 1] + np.sqrt(1 - rho**2) * white[t]
    noise = 0.25 * np.roll(noise, 1, axis=1) + 0.5 * noise + 0.25 * np.roll(noise, -1, axis=1)
    noise *= 0.7 / noise.std()
    base = shape + level
    return base[None, :] + noise, base


def _chirp(n_mels, length, f_start, f_end):
    """Energy profile ``[length, n_mels]`` of a linear chirp with one harmonic."""
    t = np.arange(length) / max(length - 1, 1)
    track = f_start + (f_end - f_start) * t
    bins = np.arange(n_mels)[None, :]
    ridge = np.exp(-0.5 * ((bins - track[:, None]) / RIDGE_WIDTH) ** 2)
    ridge += 0.5 * np.exp(-0.5 * ((bins - track[:, None] - HARMONIC_OFFSET) / RIDGE_WIDTH) ** 2)
    taper = np.minimum(1.0, np.minimum(np.arange(1, length + 1), np.arange(length, 0, -1)) / 3.0)
    return ridge * taper[:, None]


def _segment_lengths(total, shares):
    cuts = np.round(np.cumsum(shares) * total).astype(int)
    cuts[-1] = total
    return np.diff(np.concatenate([[0], cuts]))


def keyword_glyph(rng, length, n_mels=64):
    """One instance of the keyword family, ``[length, n_mels]`` in energy units."""
    shares = np.array([s for _, _, s in KEYWORD_SEGMENTS])
    shares = shares * rng.uniform(0.9, 1.1, size=3)
    shares /= shares.sum()
    parts = []
    for (f0, f1, _), n in zip(KEYWORD_SEGMENTS, _segment_lengths(length, shares)):
        parts.append(_chirp(n_mels, n, f0 + rng.uniform(-2, 2), f1 + rng.uniform(-2, 2)))
    return np.concatenate(parts)


def _prefix_distractor(rng, length, n_mels):
    shares = np.array([s for _, _, s in KEYWORD_SEGMENTS])
    lens = _segment_lengths(length, shares / shares.sum())
    parts = [
        _chirp(n_mels, n, f0 + rng.uniform(-2, 2), f1 + rng.uniform(-2, 2))
        for (f0, f1, _), n in zip(KEYWORD_SEGMENTS[:2], lens[:2])
    ]
    if rng.random() < 0.7:
        f0, f1 = WRONG_ENDINGS[rng.integers(len(WRONG_ENDINGS))]
        parts.append(_chirp(n_mels, lens[2], f0 + rng.uniform(-2, 2), f1 + rng.uniform(-2, 2)))
    return np.concatenate(parts)


def _random_chirps(rng, length, n_mels):
    n_seg = int(rng.integers(1, 4))
    lens = _segment_lengths(length, np.full(n_seg, 1.0 / n_seg))
    return np.concatenate(
        [_chirp(n_mels, n, rng.uniform(5, 52), rng.uniform(5, 52)) for n in lens]
    )


def _blobs(rng, n_frames, n_mels):
    out = np.zeros((n_frames, n_mels))
    t = np.arange(n_frames)[:, None]
    m = np.arange(n_mels)[None, :]
    for _ in range(rng.poisson(3)):
        tc, mc = rng.uniform(0, n_frames), rng.uniform(0, n_mels)
        st, sm = rng.uniform(2, 12), rng.uniform(2, 10)
        out += rng.uniform(0.5, 4.0) * np.exp(-0.5 * (((t - tc) / st) ** 2 + ((m - mc) / sm) ** 2))
    return out


def _add(energy, glyph, start, base, snr_db):
    gain = np.exp(base) * 10.0 ** (snr_db / 10.0)
    energy[start : start + len(glyph)] += glyph * gain[None, :]


def gen_utterance(rng, label, cfg, example_id="", split="train"):
    """Synthesize one labelled utterance as an :class:`Example`."""
    n_mels = cfg.n_mels
    utt_ms = rng.uniform(*cfg.utterance_len_range_ms)
    n_frames = frame_count(int(utt_ms * SAMPLE_RATE / 1000))
    logbg, base = _background(rng, n_frames, n_mels)
    energy = np.exp(logbg) + np.exp(base)[None, :] * _blobs(rng, n_frames, n_mels)
    pad = _ms_to_frames(cfg.padding_ms)
    jit_lo, jit_hi = (_ms_to_frames(v) for v in cfg.jitter_range_ms)
    kw_lo, kw_hi = (_ms_to_frames(v) for v in cfg.keyword_len_range_ms)

    if label == 1:
        length = int(rng.integers(kw_lo, kw_hi + 1))
        guard = pad + max(abs(jit_lo), abs(jit_hi))
        hi = n_frames - length - guard
        if hi < guard:
            raise ConfigError(f"keyword of {length} frames does not fit in {n_frames}-frame utterance")
        start = int(rng.integers(guard, hi + 1))
        _add(energy, keyword_glyph(rng, length, n_mels), start, base, rng.uniform(*cfg.snr_range_db))
        if rng.random() < 0.3:
            _place_distractor(rng, energy, base, cfg, exclude=(start, start + length))
        endpoint = start + length - 1
        rough_start = start - pad + int(rng.integers(jit_lo, jit_hi + 1))
        rough_end = endpoint + pad + int(rng.integers(jit_lo, jit_hi + 1))
        short = cfg.min_segment_frames - (rough_end - rough_start + 1)
        if short > 0:
            grow = min(short, rough_start)
            rough_start -= grow
            rough_end = min(n_frames - 1, rough_end + short - grow)
        align = endpoint + int(rng.integers(jit_lo, jit_hi + 1))
        features = np.log(energy).astype(np.float32)
        return Example(example_id, features, 1, endpoint, start, rough_start, rough_end, align, split)

    kind = rng.random()
    if kind < 0.8:
        n_events = int(rng.integers(1, 3))
        for _ in range(n_events):
            _place_distractor(rng, energy, base, cfg, prefix=kind < PREFIX_RATE)
    features = np.log(energy).astype(np.float32)
    return Example(example_id, features, 0, None, None, 0, n_frames - 1, None, split)


def _place_distractor(rng, energy, base, cfg, prefix=False, exclude=None):
    n_frames, n_mels = energy.shape
    kw_lo, kw_hi = (_ms_to_frames(v) for v in cfg.keyword_len_range_ms)
    length = int(rng.integers(kw_lo, kw_hi + 1))
    if prefix:
        glyph = _prefix_distractor(rng, length, n_mels)
    else:
        glyph = _random_chirps(rng, int(rng.integers(15, kw_hi + 1)), n_mels)
    room = n_frames - len(glyph)
    for _ in range(10):
        start = int(rng.integers(0, room + 1))
        if exclude is None or start + len(glyph) <= exclude[0] - 5 or start >= exclude[1] + 5:
            _add(energy, glyph, start, base, rng.uniform(*cfg.snr_range_db))
            return


# ----------------------------------------------------------------------------
# splits and container
# ----------------------------------------------------------------------------


def _id_hash(example_id):
    return int.from_bytes(hashlib.sha256(example_id.encode()).digest()[:8], "little")


def assign_splits(ids):
    """Deterministic 80/10/10 split of ``ids`` ordered by id hash."""
    ordered = sorted(ids, key=lambda i: (_id_hash(i), i))
    n = len(ordered)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_dev = int(round(SPLIT_FRACTIONS[1] * n))
    out = {}
    for k, i in enumerate(ordered):
        out[i] = "train" if k < n_train else ("dev" if k < n_train + n_dev else "eval")
    return out


def corpus_plan(cfg):
    """``[(id, label, split)]`` in manifest order; splits are stratified by label."""
    pos = [f"pos-{k:05d}" for k in range(cfg.n_pos)]
    neg = [f"neg-{k:05d}" for k in range(cfg.n_neg)]
    split = {**assign_splits(pos), **assign_splits(neg)}
    return [(i, 1 if i.startswith("pos") else 0, split[i]) for i in sorted(pos + neg)]


def example_rng(cfg, example_id, split):
    return np.random.default_rng([cfg.seed, _SPLIT_SALT[split], zlib.crc32(example_id.encode())])


def generate(cfg):
    """Yield every example of the corpus in manifest order."""
    for example_id, label, split in corpus_plan(cfg):
        yield gen_utterance(example_rng(cfg, example_id, split), label, cfg, example_id, split)


_BLOCK_MAGIC = b"KWSX"


def encode_block(features):
    data = np.ascontiguousarray(features, dtype="<f4")
    payload = data.tobytes()
    head = _BLOCK_MAGIC + struct.pack("<III", FORMAT_VERSION, *data.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload)), zlib.crc32(payload)


def decode_block(raw, example_id):
    if raw[:4] != _BLOCK_MAGIC:
        raise ParseError(f"bad block magic for {example_id}", 0)
    version, rows, cols = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported block version {version} for {example_id}", 4)
    n = rows * cols * 4
    payload = raw[16 : 16 + n]
    if len(payload) != n or len(raw) != 16 + n + 4:
        raise CorruptionError(example_id, f"truncated feature block for example {example_id!r}")
    (crc,) = struct.unpack_from("<I", raw, 16 + n)
    if zlib.crc32(payload) != crc:
        raise CorruptionError(example_id)
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy(), crc


_RECORD_FIELDS = (
    "id",
    "split",
    "label",
    "file",
    "n_frames",
    "n_mels",
    "keyword_start",
    "endpoint_frame",
    "rough_start",
    "rough_end",
    "align_frame",
    "checksum",
)


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def build_corpus(cfg, out_dir):
    """Generate the corpus and write container files plus ``manifest.txt``.

    Returns the manifest path.
    """
    lines = ["# kwslab dataset manifest", f"format_version = {FORMAT_VERSION}"]
    for key, value in cfg.to_dict().items():
        lines.append(f"config.{key} = {_fmt(value)}")
    try:
        for split in SPLITS:
            os.makedirs(os.path.join(out_dir, "examples", split), exist_ok=True)
        for ex in generate(cfg):
            ex.check()
            block, crc = encode_block(ex.features)
            rel = f"examples/{ex.split}/{ex.id}.bin"
            with open(os.path.join(out_dir, rel), "wb") as fh:
                fh.write(block)
            record = {
                "id": ex.id,
                "split": ex.split,
                "label": ex.label,
                "file": rel,
                "n_frames": ex.n_frames,
                "n_mels": ex.features.shape[1],
                "keyword_start": ex.keyword_start,
                "endpoint_frame": ex.endpoint_frame,
                "rough_start": ex.rough_start,
                "rough_end": ex.rough_end,
                "align_frame": ex.align_frame,
                "checksum": f"{crc:08x}",
            }
            lines.append("")
            lines.append("[example]")
            lines.extend(f"{k} = {_fmt(record[k])}" for k in _RECORD_FIELDS)
        path = os.path.join(out_dir, "manifest.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write corpus under {out_dir}: {exc}") from exc
    return path


def read_manifest(root):
    """Parse ``manifest.txt``; returns ``(header dict, [record dict])``."""
    path = os.path.join(root, "manifest.txt")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    header, records, current = {}, [], None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[example]":
            current = {}
            records.append(current)
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        (header if current is None else current)[key] = value
    version = int(header.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset format_version {version}")
    return header, records


def _opt_int(v):
    return None if v == "-" else int(v)


def load_dataset(root, split=None):
    """Yield :class:`Example` objects of ``split`` (all splits if None) in manifest order."""
    _, records = read_manifest(root)
    for rec in records:
        if split is not None and rec["split"] != split:
            continue
        path = os.path.join(root, rec["file"])
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read example file {path}: {exc}") from exc
        features, crc = decode_block(raw, rec["id"])
        if f"{crc:08x}" != rec["checksum"]:
            raise CorruptionError(rec["id"])
        yield Example(
            id=rec["id"],
            features=features,
            label=int(rec["label"]),
            endpoint_frame=_opt_int(rec["endpoint_frame"]),
            keyword_start=_opt_int(rec["keyword_start"]),
            rough_start=int(rec["rough_start"]),
            rough_end=int(rec["rough_end"]),
            align_frame=_opt_int(rec["align_frame"]),
            split=rec["split"],
        )


def dataset_checksum(root):
    """SHA-256 of the manifest, which pins every example's checksum."""
    with open(os.path.join(root, "manifest.txt"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def corpus_config_from_manifest(root):
    header, _ = read_manifest(root)
    d = {}
    for f in fields(CorpusConfig):
        raw = header.get(f"config.{f.name}")
        if raw is None:
            continue
        if isinstance(f.default, tuple):
            conv = type(f.default[0])
            d[f.name] = tuple(conv(float(v)) if conv is int else conv(v) for v in raw.split(","))
        else:
            d[f.name] = type(f.default)(raw)
    return CorpusConfig(**d)
