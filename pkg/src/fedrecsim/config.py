"""Flat ``section.key=value`` experiment configuration.

Example::

    data.source=synth
    synth.n_users=1000
    attack.name=ua_fedrec
    attack.lambda1=3.0
    defense.name=norm_bounding
    run.seeds=0,1,2,3,4

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ATTACK_NAMES, AttackConfig
from .data import SynthSpec
from .defenses import DEFENSE_NAMES
from .fedcore import ConfigError, FedConfig

# desk preset: full-scale hyper-parameters where feasible, shrunk population
DESK_SERVER_LR = 0.01


@dataclass
class DataConfig:
    source: str = "synth"
    news_path: str = ""
    behaviors_path: str = ""
    split: str = "last"
    unknown: str = "skip"
    max_title_len: int = 20
    synth_seed: int = 0


@dataclass
class ModelSection:
    embed_dim: int = 32
    attn_hidden: int | None = None
    max_history_len: int = 50
    negatives: int = 4
    dropout: float = 0.0


@dataclass
class DefenseSection:
    name: str = "none"
    f: int | None = None
    c: int | None = None
    beta: float = 0.1
    rho: float | None = None


@dataclass
class RunSection:
    eval_every: int = 50
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/desk"
    checkpoint_rounds: list[int] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelSection = field(default_factory=ModelSection)
    fed: FedConfig = field(default_factory=lambda: FedConfig(server_lr=DESK_SERVER_LR))
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(name="none"))
    defense: DefenseSection = field(default_factory=DefenseSection)
    run: RunSection = field(default_factory=RunSection)
    # malicious share of all clients; overrides attack.malicious_count when set
    malicious_ratio: float | None = None

    def set(self, key: str, raw: str) -> None:
        if key == "attack.malicious_ratio":
            self.malicious_ratio = _coerce(key, raw, float)
            return
        section, _, name = key.partition(".")
        target = getattr(self, section, None) if name else None
        if target is None or not dataclasses.is_dataclass(target):
            raise ConfigError(f"{key}: unknown section {section!r}")
        hints = typing.get_type_hints(type(target))
        if name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"{key}: unknown key")
        setattr(target, name, _coerce(key, raw, hints[name]))

    def validate(self, n_clients: int | None = None) -> None:
        if self.data.source not in ("synth", "mind"):
            raise ConfigError("data.source: must be synth or mind")
        if self.data.source == "mind" and not (self.data.news_path and self.data.behaviors_path):
            raise ConfigError("data.news_path/data.behaviors_path: required for source=mind")
        if self.attack.name not in ATTACK_NAMES:
            raise ConfigError(f"attack.name: unknown attack {self.attack.name!r}; valid: {', '.join(ATTACK_NAMES)}")
        if self.defense.name not in DEFENSE_NAMES:
            raise ConfigError(f"defense.name: unknown defense {self.defense.name!r}; valid: {', '.join(DEFENSE_NAMES)}")
        if self.malicious_ratio is not None and not 0 <= self.malicious_ratio < 1:
            raise ConfigError("attack.malicious_ratio: must lie in [0, 1)")
        if not self.run.seeds:
            raise ConfigError("run.seeds: at least one seed required")
        if self.run.eval_every < 0:
            raise ConfigError("run.eval_every: must be >= 0")
        for section in ("fed", "attack"):
            try:
                cfg = getattr(self, section)
                if section == "attack":
                    if cfg.name != "none":
                        dataclasses.replace(cfg, malicious_count=max(1, cfg.malicious_count)).validate()
                else:
                    cfg.validate(n_clients)
            except ConfigError as exc:
                raise ConfigError(f"{section}: {exc}") from None
        if self.data.source == "synth":
            try:
                self.synth.validate()
            except ValueError as exc:
                raise ConfigError(f"synth: {exc}") from None

    def malicious_count(self, n_clients: int) -> int:
        if self.attack.name == "none":
            return 0
        if self.malicious_ratio is not None:
            return int(round(self.malicious_ratio * n_clients))
        return self.attack.malicious_count

    def to_text(self) -> str:
        lines = []
        for section in ("data", "synth", "model", "fed", "attack", "defense", "run"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name}={_render(getattr(obj, f.name))}")
            if section == "attack" and self.malicious_ratio is not None:
                lines.append(f"attack.malicious_ratio={_render(self.malicious_ratio)}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key, raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            inner = [a for a in args if a is not type(None)][0]
            return None if raw in ("", "none", "None") else _coerce(key, raw, inner)
        if origin in (list, tuple):
            parts = [p for p in raw.split(",") if p.strip()] if raw else []
            values = [_coerce(key, p, args[0]) for p in parts]
            if origin is tuple:
                if len(values) != len(args):
                    raise ValueError(f"expected {len(args)} comma-separated values")
                return tuple(values)
            return values
        if hint is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true or false")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        name = getattr(hint, "__name__", str(hint))
        raise ConfigError(f"{key}: cannot parse {raw!r} as {name} ({exc})") from None


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
