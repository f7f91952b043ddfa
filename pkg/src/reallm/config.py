"""Flat ``key = value`` run configuration shared by every CLI command.

One namespace covers the model, training, synthetic-data and path keys.
Keys present in several sections (``seed``, ``raw_frame_dim``,
``raw_frame_ms``) set all of them, so the sections cannot disagree.
Precedence, lowest first: defaults, config file, ``REALM_SEED``, ``--key value``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .synthdata import SynthSpec
from .training import TrainConfig
from .vocab import FIRST_WORD

SEED_ENV = "REALM_SEED"
RESOLVED_NAME = "resolved.cfg"


class ConfigFileError(ValueError):
    pass


@dataclass
class RunSettings:
    corpus_dir: str = "corpus"
    out_dir: str = "runs/default"
    train_utts: int = 2000
    dev_utts: int = 200
    test_utts: int = 200
    long_utts: int = 50
    long_factor: int = 3
    split: str = "dev"
    checkpoint: str = ""
    longest: int = 100
    bench_utts: int = 50


_SECTIONS = (ModelConfig, TrainConfig, SynthSpec, RunSettings)


def _defaults() -> dict[str, tuple[type, object]]:
    out: dict[str, tuple[type, object]] = {}
    for cls in _SECTIONS:
        inst = cls()
        for f in fields(cls):
            out.setdefault(f.name, (type(getattr(inst, f.name)), getattr(inst, f.name)))
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw) -> object:
    kind, _ = DEFAULTS[key]
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigFileError(f"{origin}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


class RunConfig:
    """Resolved flat view; ``model``, ``train``, ``synth`` and ``run`` build the typed sections."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = {k: v for k, (_, v) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigFileError(f"unknown key {k!r}")
            self.values[k] = _coerce(k, v)
        self.model.validate()
        self.train  # section constructors validate
        synth = self.synth
        if self.values["vocab_size"] < synth.vocab_words + FIRST_WORD:
            raise ConfigFileError(
                f"vocab_size {self.values['vocab_size']} cannot hold {synth.vocab_words} words plus specials")

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None, env=None) -> "RunConfig":
        env = os.environ if env is None else env
        values: dict[str, object] = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
            values.update(parse_config_text(text, str(path)))
        if env.get(SEED_ENV):
            values["seed"] = _coerce("seed", env[SEED_ENV])
        for k, v in (overrides or {}).items():
            if k not in DEFAULTS:
                raise ConfigFileError(f"unknown key {k!r}")
            values[k] = _coerce(k, v)
        try:
            return cls(values)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigFileError):
                raise
            raise ConfigFileError(str(exc)) from exc

    def __getitem__(self, key: str):
        return self.values[key]

    def _section(self, cls):
        return cls(**{f.name: self.values[f.name] for f in fields(cls)})

    @property
    def model(self) -> ModelConfig:
        return self._section(ModelConfig)

    @property
    def train(self) -> TrainConfig:
        return self._section(TrainConfig)

    @property
    def synth(self) -> SynthSpec:
        return self._section(SynthSpec)

    @property
    def run(self) -> RunSettings:
        return self._section(RunSettings)

    def render(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())

    def write(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_NAME
        path.write_text(self.render())
        return path
