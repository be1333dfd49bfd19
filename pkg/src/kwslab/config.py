"""INI-style configuration files for corpora, training and evaluation.

A config file has up to three sections::

    [corpus]
    n_pos = 1250
    utterance_len_range_ms = 1500, 3000

    [train]
    loss = latency_mp
    dist = bernoulli(0.5)
    epochs = 15

    [eval]
    target_frr = 0.05

Keys are the field names of :class:`~kwslab.data.CorpusConfig`,
:class:`~kwslab.trainer.TrainConfig` (with ``loss``, ``dist``, ``f`` and the
Adam fields flattened) and :class:`EvalConfig`. Command-line overrides use
``section.key=value`` and win over the file.
"""

import configparser
import difflib
import os
from dataclasses import dataclass, fields

from .data import CorpusConfig
from .errors import ConfigError, DataError
from .losses import LossConfig, parse_distribution
from .trainer import AdamHyper, TrainConfig

SECTIONS = ("corpus", "train", "eval")


@dataclass(frozen=True)
class EvalConfig:
    target_frr: float = 0.05
    stride_frames: int = 10
    debounce_ms: int = 1000

    def __post_init__(self):
        if not 0 < self.target_frr < 1:
            raise ConfigError(f"target_frr must lie in (0, 1), got {self.target_frr}")
        if self.stride_frames < 1:
            raise ConfigError("stride_frames must be >= 1")
        if self.debounce_ms < 0:
            raise ConfigError("debounce_ms must be >= 0")


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "adam"}
_ADAM_KEYS = {f.name for f in fields(AdamHyper)}
_LOSS_KEYS = {"loss", "dist", "f"}


def read_config(path):
    """Parse ``path`` into a :class:`configparser.ConfigParser`.

    Raises:
        DataError: the file does not exist or cannot be parsed.
        ConfigError: a section name is not recognised.
    """
    if not os.path.isfile(path):
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise DataError(f"cannot parse config {path}: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]{_suggest(name, SECTIONS)}")
    return parser


def apply_overrides(parser, overrides):
    """Apply ``section.key=value`` strings on top of ``parser`` in place."""
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}{_suggest(section, SECTIONS)}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name.strip(), value.strip())
    return parser


def _suggest(word, choices):
    close = difflib.get_close_matches(word, list(choices), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _coerce(raw, default, key):
    try:
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(default):
                raise ValueError
            return tuple(type(d)(float(p)) if isinstance(d, int) else type(d)(p) for d, p in zip(default, parts))
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def _section(parser, name):
    return dict(parser.items(name)) if parser.has_section(name) else {}


def _check_keys(items, known, section):
    for key in items:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]{_suggest(key, known)}")


def corpus_config(parser):
    items = _section(parser, "corpus")
    defaults = CorpusConfig()
    _check_keys(items, {f.name for f in fields(CorpusConfig)}, "corpus")
    values = {k: _coerce(v, getattr(defaults, k), f"corpus.{k}") for k, v in items.items()}
    return CorpusConfig(**values)


def train_config(parser):
    items = _section(parser, "train")
    _check_keys(items, _TRAIN_KEYS | _ADAM_KEYS | _LOSS_KEYS, "train")
    defaults = TrainConfig()
    plain = {k: _coerce(v, getattr(defaults, k), f"train.{k}") for k, v in items.items() if k in _TRAIN_KEYS}
    adam = {k: _coerce(v, getattr(defaults.adam, k), f"train.{k}") for k, v in items.items() if k in _ADAM_KEYS}
    kind = items.get("loss", defaults.loss.kind).strip()
    dist = items.get("dist")
    f = items.get("f")
    loss = LossConfig(
        kind,
        parse_distribution(dist) if dist else None,
        _coerce(f, 0, "train.f") if f not in (None, "") else None,
    )
    return TrainConfig(loss=loss, adam=AdamHyper(**adam), **plain)


def eval_config(parser):
    items = _section(parser, "eval")
    defaults = EvalConfig()
    _check_keys(items, {f.name for f in fields(EvalConfig)}, "eval")
    return EvalConfig(**{k: _coerce(v, getattr(defaults, k), f"eval.{k}") for k, v in items.items()})


def empty_config():
    return configparser.ConfigParser(interpolation=None)


def write_config(path, corpus=None, train=None, evaluation=None):
    """Write configs back out in the same INI layout ``read_config`` accepts."""
    parser = empty_config()
    if corpus is not None:
        parser["corpus"] = {k: _fmt(v) for k, v in corpus.to_dict().items()}
    if train is not None:
        d = train.to_dict()
        loss, adam = d.pop("loss"), d.pop("adam")
        section = {"loss": loss["kind"]}
        if loss["dist"]:
            section["dist"] = loss["dist"]
        if loss["f"] is not None:
            section["f"] = str(loss["f"])
        section.update({k: _fmt(v) for k, v in adam.items()})
        section.update({k: _fmt(v) for k, v in d.items()})
        parser["train"] = section
    if evaluation is not None:
        parser["eval"] = {f.name: _fmt(getattr(evaluation, f.name)) for f in fields(EvalConfig)}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _fmt(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
