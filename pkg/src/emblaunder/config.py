"""Flat ``section.key = value`` experiment configuration.

Values are numbers, ``true``/``false``, bare words or double-quoted strings, and
bracketed comma-separated lists of those.  ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

from .attack import REFERENCE_STEPS, AttackConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.column = column


class UnknownKeyError(ConfigError):
    pass


class InvalidValueError(ConfigError):
    pass


@dataclass
class DataConfig:
    train_per_class: int = 40
    test_per_class: int = 10
    gallery_per_class: int = 10
    pool_per_class: int = 6


@dataclass
class TrainSection:
    dim: int = 64
    temperature: float = 0.07
    momentum: float = 0.9
    lr_vit: float = 0.03
    lr_cnn: float = 0.05
    epochs_vit: int = 50
    epochs_cnn: int = 80
    augment: bool = True
    max_shift: int = 0


@dataclass
class ScenarioSection:
    families: tuple[str, ...] = ("identity",)
    pairs: int = 50
    trials: int = 5
    compliance_sources: int = 20
    compliance_targets: int = 5
    prompt_label: str = "who is shown in this image?"
    jitter: bool = True


@dataclass
class AblationSection:
    epsilon: tuple[float, ...] = (4 / 255, 8 / 255, 16 / 255)
    steps: tuple[int, ...] = (100, 500)


@dataclass
class OutputSection:
    dir: str = "runs/desk"
    cache_dir: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    reference_steps: int = REFERENCE_STEPS
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self):
        from .scenarios import FAMILIES
        from .zoo import STANDARD_ZOO

        self.attack.validate()
        for fam in self.scenario.families:
            if fam not in FAMILIES:
                raise InvalidValueError(f"unknown scenario family {fam!r}")
        for eid in self.attack.ensemble:
            if eid not in STANDARD_ZOO:
                raise InvalidValueError(f"attack.ensemble references undefined encoder {eid!r}")
            if STANDARD_ZOO[eid].held_out:
                raise InvalidValueError(f"held-out encoder {eid!r} cannot be part of the attack ensemble")
        for name in ("train_per_class", "test_per_class", "gallery_per_class", "pool_per_class"):
            if getattr(self.data, name) < 1:
                raise InvalidValueError(f"data.{name} must be >= 1")
        if self.scenario.pairs < 1 or self.scenario.trials < 1:
            raise InvalidValueError("scenario.pairs and scenario.trials must be >= 1")
        if any(e < 0 for e in self.ablation.epsilon) or any(s < 0 for s in self.ablation.steps):
            raise InvalidValueError("ablation values must be non-negative")
        if self.reference_steps < 1:
            raise InvalidValueError("reference_steps must be >= 1")


_SECTIONS = ("data", "train", "attack", "scenario", "ablation", "output")
_TOKEN = re.compile(r'\s*("(?:[^"\\]|\\.)*"|[^,\[\]\s"]+)\s*')


def _field_types(obj) -> dict[str, object]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if not f.name.startswith("_")}


def _parse_scalar(tok: str):
    if tok.startswith('"'):
        return re.sub(r"\\(.)", r"\1", tok[1:-1])
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "auto"):
        return None
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        return tok


def _parse_value(text: str, lineno: int, col: int):
    text = text.strip()
    if not text:
        raise ConfigError("missing value", lineno, col)
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError("unterminated list", lineno, col)
        inner = text[1:-1].strip()
        if not inner:
            return []
        parts = [p.strip() for p in inner.split(",")]
        if any(not p for p in parts):
            raise ConfigError("empty list element", lineno, col)
        return [_parse_scalar(p) for p in parts]
    m = _TOKEN.fullmatch(text)
    if m is None:
        raise ConfigError(f"cannot parse value {text!r}", lineno, col)
    return _parse_scalar(m.group(1))


def _coerce(value, default, key: str, lineno: int):
    def bad(why):
        return InvalidValueError(f"{key}: {why}", lineno, 1)

    if key == "attack.step_size":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("expected a real or 'auto'")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("expected a real number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise bad("expected a string")
        return str(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise bad("expected a [list]")
        proto = default[0] if default else ""
        return tuple(_coerce(v, proto, key, lineno) for v in value)
    raise bad("unsupported key type")


def parse_config(text: str | bytes) -> ExperimentConfig:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config is not UTF-8: {exc}") from exc
    raw: dict[str, tuple[object, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(line)
        if not stripped.strip():
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", lineno, len(line) - len(line.lstrip()) + 1)
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)?", key):
            raise ConfigError(f"malformed key {key!r}", lineno, 1)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", lineno, 1)
        raw[key] = (_parse_value(value, lineno, stripped.index("=") + 2), lineno)

    cfg = ExperimentConfig()
    attack_kwargs = _field_types(cfg.attack)
    for key, (value, lineno) in raw.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise UnknownKeyError(f"unknown section {section!r}", lineno, 1)
            target = attack_kwargs if section == "attack" else _field_types(getattr(cfg, section))
            if name not in target:
                raise UnknownKeyError(f"unknown key {key!r}", lineno, 1)
            coerced = _coerce(value, target[name], key, lineno)
            if section == "attack":
                attack_kwargs[name] = coerced
            else:
                setattr(getattr(cfg, section), name, coerced)
        else:
            if key not in ("seed", "reference_steps"):
                raise UnknownKeyError(f"unknown key {key!r}", lineno, 1)
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key, lineno))
    try:
        cfg.attack = AttackConfig(**attack_kwargs)
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise InvalidValueError(str(exc)) from exc
    return cfg


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def load_config(source: str | bytes) -> ExperimentConfig:
    """Parse config text (bytes or str). Empty text gives the pinned defaults."""
    return parse_config(source)


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    s = str(v)
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"reference_steps = {cfg.reference_steps}"]
    for section in _SECTIONS:
        for name, value in _field_types(getattr(cfg, section)).items():
            lines.append(f"{section}.{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, text: str) -> ExperimentConfig:
    """Re-parse ``cfg`` with extra ``key = value`` lines taking precedence."""
    base = {}
    for line in dump_config(cfg).splitlines():
        k, _, v = line.partition("=")
        base[k.strip()] = v.strip()
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            base[k.strip()] = v.strip()
    return parse_config("\n".join(f"{k} = {v}" for k, v in base.items()))

