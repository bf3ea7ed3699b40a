"""
Experiment configuration.

Experiment files are YAML documents whose schema is the dataclass tree below.
Every field has a default, so a config file only lists what it changes.
Validation errors carry the dotted path of the offending field.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml
from dotenv import load_dotenv

from artifact_store import config_hash
from errors import ConfigurationError

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "SIGNATTACK_CACHE_DIR"

DATASET_FORMATS = ("lisa_csv", "gtsrb_dir", "folder_per_class")
CLASSIFIER_VARIANTS = ("cnn", "cnn2", "cnn3", "cnn4")
ATTACK_METHODS = ("taa", "rp2")
CHANNEL_MODES = ("grayscale-broadcast", "full-rgb")
MAP_SOURCES = ("combined", "mask")
BASELINE_METHODS = ("salt_pepper", "contrast_reduction", "gaussian_blur", "fgsm", "pointwise")


def _require(condition, path, message):
    if not condition:
        raise ConfigurationError(message, field_path=path)


@dataclass
class TrainBlock:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self, path):
        _require(self.epochs > 0, f"{path}.epochs", "must be positive")
        _require(self.batch_size > 0, f"{path}.batch_size", "must be positive")
        _require(self.learning_rate > 0, f"{path}.learning_rate", "must be positive")
        _require(self.seed >= 0, f"{path}.seed", "must be non-negative")


@dataclass
class DatasetBlock:
    format: str = "folder_per_class"
    root: str = "data/desk_signs"
    min_count: int = 40
    side: int = 32
    train_fraction: float = 0.8
    seed: int = 0
    max_classes: Optional[int] = None
    workers: int = 4

    def validate(self, path):
        _require(self.format in DATASET_FORMATS, f"{path}.format", f"must be one of {DATASET_FORMATS}")
        _require(self.min_count >= 1, f"{path}.min_count", "must be at least 1")
        _require(self.side >= 8, f"{path}.side", "must be at least 8")
        _require(0 < self.train_fraction < 1, f"{path}.train_fraction", "must lie in (0, 1)")
        _require(self.max_classes is None or self.max_classes >= 2, f"{path}.max_classes", "must be at least 2")
        _require(self.workers >= 1, f"{path}.workers", "must be at least 1")


@dataclass
class ClassifierBlock:
    variant: str = "cnn"
    train: TrainBlock = field(default_factory=TrainBlock)
    transfer_variants: List[str] = field(default_factory=lambda: ["cnn2", "cnn3", "cnn4"])

    def validate(self, path):
        _require(self.variant in CLASSIFIER_VARIANTS, f"{path}.variant", f"must be one of {CLASSIFIER_VARIANTS}")
        for index, variant in enumerate(self.transfer_variants):
            _require(variant in CLASSIFIER_VARIANTS, f"{path}.transfer_variants[{index}]",
                     f"must be one of {CLASSIFIER_VARIANTS}")


@dataclass
class AttentionBlock:
    stage_module_counts: List[int] = field(default_factory=lambda: [1, 2, 3])
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    last_stage_channels: int = 1
    map_source: str = "combined"
    train: TrainBlock = field(default_factory=TrainBlock)

    def validate(self, path):
        _require(len(self.stage_module_counts) > 0, f"{path}.stage_module_counts", "must not be empty")
        _require(all(count >= 1 for count in self.stage_module_counts), f"{path}.stage_module_counts",
                 "every stage needs at least one module")
        _require(len(self.stage_channels) == len(self.stage_module_counts), f"{path}.stage_channels",
                 "needs one width per stage")
        _require(self.last_stage_channels == 1, f"{path}.last_stage_channels",
                 "must be 1 so attention maps can be extracted")
        _require(self.map_source in MAP_SOURCES, f"{path}.map_source", f"must be one of {MAP_SOURCES}")


@dataclass
class ObjectiveBlock:
    lambda_: float = field(default=0.02, metadata={"key": "lambda"})
    p_norm: int = 2
    epochs: int = 300
    seed: int = 0

    def validate(self, path):
        _require(self.lambda_ >= 0, f"{path}.lambda", "must be non-negative")
        _require(self.p_norm in (1, 2), f"{path}.p_norm", "must be 1 or 2")
        _require(self.epochs >= 1, f"{path}.epochs", "must be at least 1")


@dataclass
class OptimizerBlock:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_size: float = 0.01

    def validate(self, path):
        _require(0 < self.beta1 < 1, f"{path}.beta1", "must lie in (0, 1)")
        _require(0 < self.beta2 < 1, f"{path}.beta2", "must lie in (0, 1)")
        _require(self.epsilon > 0, f"{path}.epsilon", "must be positive")
        _require(self.step_size > 0, f"{path}.step_size", "must be positive")


@dataclass
class Rp2Block:
    keep_fraction: float = 0.3
    rectangularize: bool = True
    l1_lambda: Optional[float] = None
    stage1_epochs: Optional[int] = None

    def validate(self, path):
        _require(0 < self.keep_fraction <= 1, f"{path}.keep_fraction", "must lie in (0, 1]")
        _require(self.l1_lambda is None or self.l1_lambda >= 0, f"{path}.l1_lambda", "must be non-negative")
        _require(self.stage1_epochs is None or self.stage1_epochs >= 1, f"{path}.stage1_epochs",
                 "must be at least 1")


@dataclass
class BaselineBlock:
    methods: List[str] = field(default_factory=lambda: list(BASELINE_METHODS))
    max_images: Optional[int] = None
    steps: int = 100
    fgsm_epsilon_max: float = 0.3
    blur_sigma_max: float = 5.0
    pointwise_seed_trials: int = 200
    seed: int = 0

    def validate(self, path):
        for index, method in enumerate(self.methods):
            _require(method in BASELINE_METHODS, f"{path}.methods[{index}]", f"must be one of {BASELINE_METHODS}")
        _require(self.steps >= 1, f"{path}.steps", "must be at least 1")
        _require(self.fgsm_epsilon_max >= 0, f"{path}.fgsm_epsilon_max", "must be non-negative")
        _require(self.blur_sigma_max > 0, f"{path}.blur_sigma_max", "must be positive")
        _require(self.max_images is None or self.max_images >= 1, f"{path}.max_images", "must be at least 1")


@dataclass
class AttackBlock:
    method: str = "taa"
    source: str = "stop"
    target: str = "speedLimit45"
    channel_mode: str = "grayscale-broadcast"
    objective: ObjectiveBlock = field(default_factory=ObjectiveBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    rp2: Rp2Block = field(default_factory=Rp2Block)
    baselines: BaselineBlock = field(default_factory=BaselineBlock)

    def validate(self, path):
        _require(self.method in ATTACK_METHODS, f"{path}.method", f"must be one of {ATTACK_METHODS}")
        _require(self.channel_mode in CHANNEL_MODES, f"{path}.channel_mode", f"must be one of {CHANNEL_MODES}")
        _require(self.source != self.target, f"{path}.target", "must differ from the source class")


@dataclass
class TransferDatasetBlock:
    name: str = "gtsrb"
    format: str = "gtsrb_dir"
    root: str = "data/gtsrb"
    aliases: Dict[str, str] = field(default_factory=dict)

    def validate(self, path):
        _require(self.format in DATASET_FORMATS, f"{path}.format", f"must be one of {DATASET_FORMATS}")
        _require(bool(self.aliases), f"{path}.aliases", "needs at least one class alias")


@dataclass
class EvaluationBlock:
    output_dir: str = "results"
    transfer_datasets: List[TransferDatasetBlock] = field(default_factory=list)
    generalization_pairs: List[List[str]] = field(default_factory=list)
    comparison_pairs: List[List[str]] = field(default_factory=lambda: [
        ["stop", "speedLimit45"],
        ["pedestrianCrossing", "speedLimit65"],
    ])
    export_images: bool = True

    def validate(self, path):
        for name in ("generalization_pairs", "comparison_pairs"):
            for index, pair in enumerate(getattr(self, name)):
                _require(len(pair) == 2, f"{path}.{name}[{index}]", "must be a [source, target] pair")
                _require(pair[0] != pair[1], f"{path}.{name}[{index}]", "source and target must differ")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    cache_dir: str = "cache"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    classifier: ClassifierBlock = field(default_factory=ClassifierBlock)
    attention: AttentionBlock = field(default_factory=AttentionBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    evaluation: EvaluationBlock = field(default_factory=EvaluationBlock)

    def validate(self, path):
        pass

    def to_dict(self):
        return _to_plain(self)

    def section_hash(self, *names):
        """Hash of the named top-level sections, e.g. ``("dataset", "classifier")``."""
        plain = self.to_dict()
        return config_hash({name: plain[name] for name in names})

    def full_hash(self):
        plain = self.to_dict()
        plain.pop("cache_dir", None)
        plain["evaluation"].pop("output_dir", None)
        return config_hash(plain)

    def referenced_classes(self):
        """Every class name the attack and evaluation blocks refer to."""
        names = [self.attack.source, self.attack.target]
        for pair in self.evaluation.comparison_pairs + self.evaluation.generalization_pairs:
            names.extend(pair)
        for block in self.evaluation.transfer_datasets:
            names.extend(block.aliases.values())
        return list(dict.fromkeys(names))


def _key(f):
    return f.metadata.get("key", f.name)


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {_key(f): _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, list):
        return [_to_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _to_plain(item) for key, item in value.items()}
    return value


def _coerce(hint, value, path):
    """Convert a YAML value to the annotated type or fail with ``path``."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [arg for arg in args if arg is not type(None)][0]
        return _coerce(inner, value, path)
    if dataclasses.is_dataclass(hint):
        return build_block(hint, value, path)
    if origin in (list, List):
        _require(isinstance(value, list), path, f"expected a list, got {type(value).__name__}")
        return [_coerce(args[0], item, f"{path}[{index}]") for index, item in enumerate(value)]
    if origin in (dict, Dict):
        _require(isinstance(value, dict), path, f"expected a mapping, got {type(value).__name__}")
        return {str(key): _coerce(args[1], item, f"{path}.{key}") for key, item in value.items()}
    if hint is bool:
        _require(isinstance(value, bool), path, "expected true or false")
        return value
    if hint is int:
        _require(isinstance(value, int) and not isinstance(value, bool), path, "expected an integer")
        return value
    if hint is float:
        _require(isinstance(value, (int, float)) and not isinstance(value, bool), path, "expected a number")
        return float(value)
    if hint is str:
        _require(isinstance(value, str), path, "expected a string")
        return value
    return value


def build_block(cls, data, path=""):
    """Build dataclass ``cls`` from a mapping, validating every field."""
    data = {} if data is None else data
    _require(isinstance(data, dict), path or "<root>", f"expected a mapping, got {type(data).__name__}")

    hints = typing.get_type_hints(cls)
    fields_by_key = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields_by_key))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigurationError("unknown key", field_path=f"{prefix}{unknown[0]}")

    kwargs = {}
    for key, value in data.items():
        f = fields_by_key[key]
        field_path = f"{path}.{key}" if path else key
        kwargs[f.name] = _coerce(hints[f.name], value, field_path)

    block = cls(**kwargs)
    block.validate(path or cls.__name__)
    return block


def load_config(path=None, text=None):
    """Load an ExperimentConfig from a YAML file (or YAML text)."""
    load_dotenv()
    if text is None:
        if path is None:
            return _apply_environment(ExperimentConfig())
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")

    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"invalid YAML: {e}")

    config = build_block(ExperimentConfig, data)
    logger.debug("Loaded config '%s' (hash %s)", config.name, config.full_hash()[:12])
    return _apply_environment(config)


def _apply_environment(config):
    cache_dir = os.getenv(CACHE_DIR_ENV)
    if cache_dir:
        config.cache_dir = cache_dir
    return config


def apply_overrides(config, cache_dir=None, output_dir=None, dataset_root=None, seed=None):
    """Apply command-line overrides in place and return the config."""
    if cache_dir:
        config.cache_dir = str(cache_dir)
    if output_dir:
        config.evaluation.output_dir = str(output_dir)
    if dataset_root:
        config.dataset.root = str(dataset_root)
    if seed is not None:
        config.dataset.seed = seed
        config.classifier.train.seed = seed
        config.attention.train.seed = seed
        config.attack.objective.seed = seed
        config.attack.baselines.seed = seed
    return config
