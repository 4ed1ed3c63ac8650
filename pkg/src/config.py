"""
Run configuration: a TOML or JSON file, then DCLP_* environment variables, then --set flags.
"""

import dataclasses
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .augment import DEFAULT_RATIO_CHOICES, AugmentationSpec
from .curriculum import CurriculumConfig
from .errors import ConfigError
from .neuralcore import EncoderConfig
from .predictor import FinetuneConfig
from .pretrain import ContrastiveConfig
from .search import SearchConfig
from .spaces import PRESETS, SearchSpaceSpec, get_space


ENV_PREFIX = "DCLP_"
PACKAGE_DIR = Path(__file__).resolve().parent


def _path(default=None):
    """Field whose relative value is resolved against the config file's directory."""
    return field(default=default, metadata={"path": True})


@dataclass
class SpaceSection:
    name: Optional[str] = None
    ground_truth: str = "oracle"
    table: Optional[str] = _path()
    oracle_seed: int = 0
    oracle_noise: float = 0.01
    table_size: int = 4096
    max_nodes: Optional[int] = None
    max_edges: Optional[int] = None


@dataclass
class PretrainSection:
    temperature: float = 0.2
    rbf_sigma: float = 1.0
    bank_capacity: int = 4096
    batch_size: int = 4096
    epochs: int = 50
    lr: float = 0.015
    momentum: float = 0.9
    candidates: int = 8
    difficulty_measure: str = "edit"
    checkpoint_every: int = 10
    hidden: int = 128
    layers: int = 3
    unlabeled_count: int = 1000
    unlabeled_source: Optional[str] = _path()


@dataclass
class CurriculumSection:
    tau_start: float = -1.0
    tau_end: float = 1.0
    sigma: float = 0.9
    frequency: float = 2.0
    amplitude: float = 4.0
    selection_mode: str = "argmax"


@dataclass
class AugmentSection:
    method: str = "mixed"
    ratio: Optional[float] = None
    ratio_choices: Tuple[float, ...] = DEFAULT_RATIO_CHOICES


@dataclass
class FinetuneSection:
    loss: str = "listmle"
    lr: float = 0.005
    max_epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-5
    freeze_encoder: bool = False
    holdout_fraction: float = 0.0
    head_hidden: int = 128
    pretrained: bool = True
    label_count: int = 100
    labels: Optional[str] = _path()
    encoder_checkpoint: Optional[str] = _path()


@dataclass
class SearchSection:
    strategy: str = "random"
    iterations: int = 10
    samples_per_iteration: int = 100
    top_k: int = 5
    population: int = 20
    max_population: int = 50
    policy_lr: float = 0.1
    baseline_decay: float = 0.9
    predictor: Optional[str] = _path()


@dataclass
class EvalSection:
    sample_count: int = 3000
    predictor: Optional[str] = _path()


SECTIONS = {
    "space": SpaceSection,
    "pretrain": PretrainSection,
    "curriculum": CurriculumSection,
    "augment": AugmentSection,
    "finetune": FinetuneSection,
    "search": SearchSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    """Resolved configuration of one pipeline run."""

    seed: Optional[int] = None
    output_dir: Optional[str] = _path()
    workers: int = 1
    space: SpaceSection = field(default_factory=SpaceSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    search: SearchSection = field(default_factory=SearchSection)
    eval: EvalSection = field(default_factory=EvalSection)
    source: Optional[str] = None

    def space_spec(self) -> SearchSpaceSpec:
        return get_space(self.space.name, max_nodes=self.space.max_nodes, max_edges=self.space.max_edges)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(vocabulary=self.space_spec().encoder_vocabulary,
                             hidden=self.pretrain.hidden, layers=self.pretrain.layers)

    def contrastive(self) -> ContrastiveConfig:
        p = self.pretrain
        return ContrastiveConfig(
            temperature=p.temperature, rbf_sigma=p.rbf_sigma, bank_capacity=p.bank_capacity,
            batch_size=p.batch_size, epochs=p.epochs, lr=p.lr, momentum=p.momentum,
            candidates=p.candidates, difficulty_measure=p.difficulty_measure,
            checkpoint_every=p.checkpoint_every,
        )

    def curriculum_config(self) -> CurriculumConfig:
        return CurriculumConfig(**dataclasses.asdict(self.curriculum))

    def augmentation(self) -> AugmentationSpec:
        a = self.augment
        return AugmentationSpec(method=a.method, ratio=a.ratio, candidates=self.pretrain.candidates,
                                ratio_choices=tuple(a.ratio_choices))

    def finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(loss=f.loss, lr=f.lr, max_epochs=f.max_epochs, patience=f.patience,
                              min_delta=f.min_delta, freeze_encoder=f.freeze_encoder,
                              holdout_fraction=f.holdout_fraction, head_hidden=f.head_hidden)

    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(strategy=s.strategy, iterations=s.iterations,
                            samples_per_iteration=s.samples_per_iteration, top_k=s.top_k,
                            population=s.population, max_population=s.max_population,
                            policy_lr=s.policy_lr, baseline_decay=s.baseline_decay, seed=self.seed)

    def output_path(self, name: str) -> Path:
        return Path(self.output_dir) / name

    def to_json(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("source", None)
        return data


def _coerce(value: Any, hint, name: str) -> Any:
    """Convert a file, environment or flag value to the field's declared type."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, name)
    if origin is tuple:
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(_coerce(item, args[0], name) for item in items if str(item).strip() != "")
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"'{value}' is not a boolean")
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"'{value}' is not an integer")
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"cannot read {value!r} as {getattr(hint, '__name__', hint)} ({e})", field=name) from e
    return value


def _assign(target, key: str, value: Any, name: str) -> None:
    hints = typing.get_type_hints(type(target))
    if key not in hints or key == "source":
        raise ConfigError("unknown field", field=name)
    setattr(target, key, _coerce(value, hints[key], name))


def _apply_mapping(config: RunConfig, data: Mapping[str, Any]) -> None:
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError("must be a table of fields", field=key)
            section = getattr(config, key)
            for sub_key, sub_value in value.items():
                _assign(section, sub_key, sub_value, f"{key}.{sub_key}")
        else:
            _assign(config, key, value, key)


def _apply_environment(config: RunConfig, environ: Mapping[str, str]) -> None:
    for f in dataclasses.fields(RunConfig):
        if f.name in SECTIONS:
            section = getattr(config, f.name)
            for sub in dataclasses.fields(section):
                var = f"{ENV_PREFIX}{f.name}_{sub.name}".upper()
                if var in environ:
                    _assign(section, sub.name, environ[var], f"{f.name}.{sub.name}")
        elif f.name != "source":
            var = f"{ENV_PREFIX}{f.name}".upper()
            if var in environ:
                _assign(config, f.name, environ[var], f.name)


def _apply_overrides(config: RunConfig, overrides: Sequence[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form section.field=value", field="--set")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError("unknown section", field=section)
            _assign(getattr(config, section), sub, value, key)
        else:
            _assign(config, key, value, key)


def _resolve_paths(target, base: Path) -> None:
    for f in dataclasses.fields(target):
        value = getattr(target, f.name)
        if f.metadata.get("path") and value:
            path = Path(os.path.expanduser(value))
            setattr(target, f.name, str(path if path.is_absolute() else (base / path)))


def _read_file(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", field="--config")
    try:
        if path.suffix.lower() == ".json":
            with open(path, "r", encoding="utf-8") as handle:
                return json.load(handle)
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}", field="--config") from e


def validate_config(config: RunConfig) -> None:
    """Required fields and cross-section consistency."""
    for name in ("seed", "output_dir"):
        if getattr(config, name) is None:
            raise ConfigError("is required", field=name)
    if not config.space.name:
        raise ConfigError("is required", field="space.name")
    if config.space.name not in PRESETS:
        raise ConfigError(f"unknown search space '{config.space.name}' (known: {', '.join(sorted(PRESETS))})",
                          field="space.name")
    if config.space.ground_truth not in ("oracle", "table"):
        raise ConfigError("must be 'oracle' or 'table'", field="space.ground_truth")
    if config.space.ground_truth == "table":
        if not config.space.table:
            raise ConfigError("is required when space.ground_truth = 'table'", field="space.table")
        if not Path(config.space.table).exists():
            raise ConfigError(f"file {config.space.table} does not exist", field="space.table")
    for name, value in (("pretrain.unlabeled_source", config.pretrain.unlabeled_source),
                        ("finetune.labels", config.finetune.labels)):
        if value and not Path(value).exists():
            raise ConfigError(f"file {value} does not exist", field=name)
    if config.workers < 1:
        raise ConfigError("must be >= 1", field="workers")
    if config.search.top_k > config.search.samples_per_iteration:
        raise ConfigError("must not exceed search.samples_per_iteration", field="search.top_k")

    builders = (("space", config.space_spec), ("pretrain", config.contrastive),
                ("curriculum", config.curriculum_config), ("augment", config.augmentation),
                ("finetune", config.finetune_config), ("search", config.search_config),
                ("pretrain", config.encoder_config))
    for section, build in builders:
        try:
            build()
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e).strip("'\""), field=section) from e


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """File values, then environment, then overrides; relative paths follow the file."""
    config = RunConfig()
    base = Path.cwd()
    if path:
        file_path = Path(path).resolve()
        data = _read_file(file_path)
        if not isinstance(data, Mapping):
            raise ConfigError("top level must be a table of fields", field="--config")
        _apply_mapping(config, data)
        config.source = str(file_path)
        base = file_path.parent
    _apply_environment(config, os.environ if environ is None else environ)
    _apply_overrides(config, overrides)
    _resolve_paths(config, base)
    for name in SECTIONS:
        _resolve_paths(getattr(config, name), base)
    validate_config(config)
    return config


def code_digest() -> str:
    """sha256 over the package sources, in file-name order."""
    digest = hashlib.sha256()
    for source in sorted(PACKAGE_DIR.glob("*.py")):
        digest.update(source.name.encode("utf-8"))
        digest.update(source.read_bytes())
    return digest.hexdigest()


def config_digest(config: RunConfig) -> str:
    payload = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def config_echo(config: RunConfig, stage: str) -> dict:
    """Everything needed to reproduce a run."""
    return {
        "stage": stage,
        "seed": config.seed,
        "config": config.to_json(),
        "config_digest": config_digest(config),
        "code_digest": code_digest(),
    }


def write_config_echo(config: RunConfig, stage: str) -> Path:
    path = config.output_path("config_echo.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config_echo(config, stage), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path
