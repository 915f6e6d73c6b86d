"""Run configuration: typed settings records and the flat key=value file format."""

from __future__ import annotations

import hashlib
import json
import types
import typing
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ehr import SyntheticConfig
from errors import ConfigError
from models import AblationFlags, Hyperparams
from numerics import SEED_LIMIT
from stratify import StratParams

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunSettings:
    """Global seed, output directory, and study worker count."""

    seed: int = 0
    out_dir: Path = Path("out")
    workers: int = 1


@dataclass(frozen=True)
class DataSettings:
    """Paths of an existing dataset and DDI file; unset means synthetic data."""

    dataset_path: Path | None = None
    ddi_path: Path | None = None


@dataclass(frozen=True)
class BootstrapSettings:
    """Test-set resampling for the final report."""

    rounds: int = 10
    fraction: float = 0.8
    replace: bool = True


@dataclass(frozen=True)
class StudySettings:
    """Grids and seeds of the experiment protocols."""

    levels: tuple[int, ...] = (100, 110, 120, 130, 140)
    mus: tuple[int, ...] = (5, 10, 15, 20)
    seeds: tuple[int, ...] = (0, 1, 2)
    q_mm_grid: tuple[int, ...] = (50, 60, 70)
    q_map_grid: tuple[int, ...] = (100, 150, 200)
    ablation_level: int = 130


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on; field names are the key namespaces."""

    run: RunSettings = field(default_factory=RunSettings)
    data: DataSettings = field(default_factory=DataSettings)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    strat: StratParams = field(default_factory=StratParams)
    model: Hyperparams = field(default_factory=Hyperparams)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    eval: BootstrapSettings = field(default_factory=BootstrapSettings)
    study: StudySettings = field(default_factory=StudySettings)

    @property
    def uses_synthetic(self) -> bool:
        """True when no dataset path is configured."""
        return self.data.dataset_path is None

    def validate(self) -> None:
        """Check every section and the cross-section rules."""
        if not 0 <= self.run.seed < SEED_LIMIT:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        if self.run.workers < 1:
            raise ConfigError(f"run.workers must be at least 1, got {self.run.workers}")
        if (self.data.dataset_path is None) != (self.data.ddi_path is None):
            raise ConfigError("data.dataset_path and data.ddi_path must be set together")
        if self.eval.rounds < 1 or not 0 < self.eval.fraction <= 1:
            raise ConfigError("eval.rounds must be >= 1 and eval.fraction in (0, 1]")
        if not self.study.seeds:
            raise ConfigError("study.seeds must list at least one seed")
        self.synth.validate()
        self.strat.validate()
        self.model.validate()


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment and blank lines are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}: line {lineno}: expected key=value, got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _coerce(key: str, raw: str, hint: object) -> object:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (types.UnionType, typing.Union):
            inner = next(a for a in args if a is not type(None))
            return None if raw.lower() in ("", "none") else _coerce(key, raw, inner)
        if origin is tuple:
            return tuple(_coerce(key, part.strip(), args[0]) for part in raw.split(",") if part.strip())
        if hint is bool:
            word = raw.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is Path:
            return Path(raw).expanduser()
        if hint is str:
            return raw
    except ValueError as e:
        raise ConfigError(f"Invalid value for {key}: {e}") from e
    raise ConfigError(f"{key} has an unsupported type {hint!r}")


def apply_values(record: object, values: Mapping[str, str], prefix: str = "") -> object:
    """Return a copy of a settings dataclass with ``values`` parsed by field type."""
    hints = typing.get_type_hints(type(record))
    names = {f.name for f in fields(record)}  # type: ignore[arg-type]
    changes = {}
    for name, raw in values.items():
        if name not in names:
            raise ConfigError(f"Unknown config key {prefix}{name}")
        changes[name] = _coerce(prefix + name, raw, hints[name])
    return replace(record, **changes)  # type: ignore[type-var]


def build_config(values: Mapping[str, str]) -> RunConfig:
    """Build and validate a ``RunConfig`` from namespaced keys.

    ``run.seed`` also seeds the generator and the model unless ``synth.seed``
    or ``model.seed`` are given.
    """
    sections: dict[str, dict[str, str]] = {f.name: {} for f in fields(RunConfig)}
    for key, raw in values.items():
        namespace, dot, name = key.partition(".")
        if not dot or namespace not in sections:
            raise ConfigError(f"Unknown config key {key}")
        sections[namespace][name] = raw
    if values.get("data.dataset_path") and sections["synth"]:
        raise ConfigError("data.dataset_path and synth.* keys are mutually exclusive; pick one data source")

    config = RunConfig()
    changes = {
        name: apply_values(getattr(config, name), section, f"{name}.")
        for name, section in sections.items()
        if section
    }
    config = replace(config, **changes)  # type: ignore[arg-type]
    seed = config.run.seed
    if "seed" not in sections["synth"]:
        config = replace(config, synth=replace(config.synth, seed=seed))
    if "seed" not in sections["model"]:
        config = replace(config, model=replace(config.model, seed=seed))
    config = replace(config, ablation=config.ablation.normalized())
    config.validate()
    return config


def load_config(path: Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply command-line overrides on top."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Failed to read config {path}. Check that the file exists.") from e
        values = parse_key_values(text, str(path))
    values.update(overrides or {})
    return build_config(values)


def load_synthetic_config(path: Path) -> SyntheticConfig:
    """Read a generator config from its own un-namespaced key=value file."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Failed to read synthetic config {path}.") from e
    config = apply_values(SyntheticConfig(), parse_key_values(text, str(path)))
    assert isinstance(config, SyntheticConfig)
    config.validate()
    return config


def config_hash(config: object) -> str:
    """SHA-256 of the canonical JSON form of a settings dataclass."""
    payload = json.dumps(asdict(config), sort_keys=True, default=str, separators=(",", ":"))  # type: ignore[call-overload]
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
