"""Run configuration: a flat ``section.key = value`` text format.

Sections are ``model``, ``train``, ``data``, ``synth`` and ``run``. A key with no
section belongs to ``run``; ``run.seed`` overrides both ``model.seed`` and
``train.seed`` when set. Blank lines and ``#`` comments are ignored. Example::

    # small smoke run
    model.embed_dim = 16
    model.backbone = graphconv
    model.hidden_dims = 64,64
    train.max_epochs = 5
    data.path = pems04/flow.bin
    data.graph = pems04/edges.csv
    run.out = runs/pems04

With ``data.path`` empty the dataset is generated from the ``synth`` section.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneSpec
from .data import SynthConfig
from .errors import ConfigError
from .model import StumConfig
from .trainer import TrainConfig

SECTIONS = ("model", "train", "data", "synth", "run")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class DataConfig:
    path: str = ""  # empty: synthesize from the synth section
    graph: str = ""
    format: str = "flatbin"  # flatbin | csv
    expected_nodes: int = 0  # 0: not checked
    expected_frames: int = 0

    @property
    def synthetic(self) -> bool:
        return not self.path

    def validate(self) -> None:
        if self.format not in ("flatbin", "csv"):
            raise ConfigError(f"data.format must be flatbin or csv, got {self.format!r}")
        if (self.expected_nodes > 0) != (self.expected_frames > 0):
            raise ConfigError("set both data.expected_nodes and data.expected_frames, or neither")


@dataclass
class RunOptions:
    out: str = "runs/stum"
    seed: int = -1  # >= 0 overrides model.seed and train.seed
    horizons: list[int] = field(default_factory=lambda: [3, 6, 12])
    threads: int = 0  # 0: library default


@dataclass
class RunConfig:
    model: StumConfig = field(default_factory=StumConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def section(self, name: str):
        if name not in SECTIONS:
            raise ConfigError(f"unknown section {name!r}; expected one of {SECTIONS}")
        return getattr(self, name)

    def validate(self) -> None:
        """Check every section; ``model.num_nodes = 0`` (filled from the data later) is allowed."""
        model = copy.deepcopy(self.model)
        model.num_nodes = model.num_nodes or 1
        model.validate()
        self.train.validate()
        self.data.validate()
        self.synth.validate()
        bad = [k for k in self.run.horizons if not 1 <= k <= self.model.horizon]
        if bad:
            raise ConfigError(f"run.horizons {bad} outside 1..{self.model.horizon}")

    def resolved(self) -> "RunConfig":
        """Copy with the shared seed pushed into the model and train sections."""
        out = copy.deepcopy(self)
        if out.run.seed >= 0:
            out.model.seed = out.run.seed
            out.train.seed = out.run.seed
        return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> list[int]:
    return [int(part) for part in text.replace(" ", "").split(",") if part]


def _coerce(current, text: str):
    if isinstance(current, bool):
        return _parse_bool(text)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, list):
        return _parse_ints(text)
    return text.strip()


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    """Assign one ``section.key`` from its text form, coerced to the field's type."""
    section, _, name = key.strip().rpartition(".")
    target = cfg.section(section or "run")
    if isinstance(target, StumConfig) and name == "backbone":
        target.backbone.kind = text.strip()
        return
    if isinstance(target, StumConfig) and name == "hidden_dims":
        target.backbone.hidden_dims = _parse_ints(text)
        return
    known = {f.name for f in fields(target)} - {"backbone"}
    if name not in known:
        raise ConfigError(f"unknown key {section or 'run'}.{name}")
    try:
        setattr(target, name, _coerce(getattr(target, name), text))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(lines, cfg: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        try:
            set_value(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load_config(path: str | Path | None = None, overrides=(), env=None) -> RunConfig:
    """Read ``path`` (optional), apply ``key=value`` overrides, then ``STUM_SEED``/``STUM_THREADS``."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = parse_lines(path.read_text().splitlines(), cfg, str(path))
    cfg = parse_lines(overrides, cfg, "--set")
    env = os.environ if env is None else env
    for var, key in (("STUM_SEED", "run.seed"), ("STUM_THREADS", "run.threads")):
        if env.get(var, "").strip():
            try:
                set_value(cfg, key, env[var])
            except ConfigError as exc:
                raise ConfigError(f"{var}: {exc}") from None
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_lines(cfg: RunConfig) -> list[str]:
    """Every key, one per line, in a form ``parse_lines`` reads back to an equal config."""
    lines = []
    for name in SECTIONS:
        target = cfg.section(name)
        lines.append(f"# {name}")
        for f in fields(target):
            value = getattr(target, f.name)
            if isinstance(value, BackboneSpec):
                lines.append(f"{name}.backbone = {value.kind}")
                lines.append(f"{name}.hidden_dims = {_fmt(value.hidden_dims)}")
            else:
                lines.append(f"{name}.{f.name} = {_fmt(value)}")
    return lines


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved.cfg"
    path.write_text("\n".join(dump_lines(cfg)) + "\n")
    return path
