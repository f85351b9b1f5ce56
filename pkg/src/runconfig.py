"""
Run Configuration
Strict TOML run files validated into one RunConfig, with CLI overrides
"""
import copy
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from src.attack import AttackConfig, AttackKind, ExpLoss
from src.config import ABLATION_BATCH_SIZES, ACCURACY_DROP_THRESHOLD, EVAL_BATCH_SIZE, OUTPUT_DIR, SRC_P_THRESHOLD
from src.data import DatasetSpec
from src.defense import DefenseConfig
from src.errors import ConfigError
from src.explain import ExplainerId, parse_explainer
from src.forensics import MetricsSpec
from src.nn import ArchSpec, TrainConfig
from src.utils.seeds import derived_seeds

logger = logging.getLogger(__name__)

SEED_CONSUMERS = ['init', 'data/train', 'data/test', 'defense/order']


class RunSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    seed: int = 0
    out_dir: str = OUTPUT_DIR
    name: Optional[str] = None


class ExplainerSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: ExplainerId = ExplainerId.GRADCAM
    target_layer: Optional[str] = None
    batch_size: int = EVAL_BATCH_SIZE
    inspect_samples: int = 4

    @field_validator('name', mode='before')
    @classmethod
    def _name(cls, value):
        return parse_explainer(value)


class MetricsSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    loss_kind: Optional[ExpLoss] = None
    src_method: str = 't'
    p_threshold: float = SRC_P_THRESHOLD

    @field_validator('loss_kind', mode='before')
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value

    @field_validator('src_method')
    @classmethod
    def _method(cls, value: str) -> str:
        if value not in ('t', 'permutation'):
            raise ValueError("must be 't' or 'permutation'")
        return value


class AblationSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    sizes: List[int] = Field(default_factory=lambda: list(ABLATION_BATCH_SIZES))

    @field_validator('sizes')
    @classmethod
    def _sizes(cls, value: List[int]) -> List[int]:
        if not value or any(s < 1 for s in value):
            raise ValueError('must be a non-empty list of sizes >= 1')
        return value


class ScenarioSection(BaseModel):
    """Snapshot paths of the attacked variants; absent variants are attacked from the clean model"""
    model_config = ConfigDict(extra='forbid')

    threshold: float = ACCURACY_DROP_THRESHOLD
    c1: Optional[str] = None
    c3: Optional[str] = None
    c5: Optional[str] = None
    attack_missing: bool = True


class GridSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kinds: List[AttackKind] = Field(default_factory=lambda: list(AttackKind))
    losses: List[ExpLoss] = Field(default_factory=lambda: list(ExpLoss))
    explainers: List[ExplainerId] = Field(default_factory=lambda: [ExplainerId.GRAD, ExplainerId.GRADCAM])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    target_class: int = 0

    @field_validator('kinds', 'losses', mode='before')
    @classmethod
    def _upper(cls, value):
        return [v.upper() if isinstance(v, str) else v for v in value]

    @field_validator('explainers', mode='before')
    @classmethod
    def _explainers(cls, value):
        return [parse_explainer(v) for v in value]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    run: RunSection = Field(default_factory=RunSection)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    arch: ArchSpec = Field(default_factory=ArchSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    explainer: ExplainerSection = Field(default_factory=ExplainerSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    grid: GridSection = Field(default_factory=GridSection)

    _source: dict = PrivateAttr(default_factory=dict)

    @model_validator(mode='before')
    @classmethod
    def _fill_defaults(cls, values: Any) -> Any:
        """Derive defaults that depend on other sections"""
        if not isinstance(values, dict):
            return values
        values = copy.deepcopy(values)
        dataset = values.get('dataset') or {}
        arch = values.setdefault('arch', {})
        if isinstance(arch, dict):
            if dataset.get('kind') == 'cifar10':
                arch.setdefault('num_classes', 10)
            else:
                arch.setdefault('num_classes', dataset.get('class_count', DatasetSpec().class_count))
                arch.setdefault('image_side', dataset.get('image_side', DatasetSpec().image_side))

        attack = values.setdefault('attack', {})
        if isinstance(attack, dict):
            run = values.get('run') or {}
            explainer = values.get('explainer') or {}
            attack.setdefault('seed', run.get('seed', 0))
            if 'name' in explainer:
                attack.setdefault('explainer', explainer['name'])
            if explainer.get('target_layer') is not None:
                attack.setdefault('target_layer', explainer['target_layer'])
            kind = str(attack.get('kind', AttackKind.RH.value)).upper()
            attack['kind'] = kind
            if kind in (AttackKind.SF.value, AttackKind.RH.value):
                attack.setdefault('target_expl', {})
            if kind in (AttackKind.RH.value, AttackKind.FD.value):
                attack.setdefault('target_class', 0)
        return values

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def source(self) -> dict:
        return self._source

    def metrics_spec(self) -> MetricsSpec:
        overrides = {'src_method': self.metrics.src_method, 'p_threshold': self.metrics.p_threshold}
        if self.metrics.loss_kind is not None:
            overrides['loss_kind'] = self.metrics.loss_kind
        return MetricsSpec.from_attack(self.attack, **overrides)

    def seed_table(self) -> Dict[str, int]:
        seeds = derived_seeds(self.run.seed, SEED_CONSUMERS)
        seeds["attack"] = self.attack.seed
        return seeds

    def echo(self) -> dict:
        return self.model_dump(mode='json', by_alias=True)


def format_validation_error(error: ValidationError) -> str:
    """One 'dotted.path: message' line per failing field"""
    lines = []
    for item in error.errors():
        path = '.'.join(str(part) for part in item['loc']) or '<root>'
        lines.append(f"{path}: {item['msg']}")
    return '; '.join(lines)


def validate_run_config(raw: dict) -> RunConfig:
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {format_validation_error(e)}") from e
    config._source = copy.deepcopy(raw)
    return config


def _set_dotted(raw: dict, dotted: str, value):
    section, _, key = dotted.partition('.')
    if not key:
        raise ConfigError(f"Override '{dotted}' must name a section and a key")
    target = raw.setdefault(section, {})
    if not isinstance(target, dict):
        raise ConfigError(f"Override '{dotted}': [{section}] is not a section")
    target[key] = value


def apply_overrides(raw: dict, overrides: Dict[str, Any]) -> dict:
    """
    Merge dotted-key overrides ('attack.kind', 'run.seed', ...) into a raw config

    Switching the attack kind drops file-level fields the new kind forbids
    unless the same overrides set them again.
    """
    merged = copy.deepcopy(raw)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    for dotted, value in overrides.items():
        _set_dotted(merged, dotted, value)
    kind = overrides.get('attack.kind')
    if kind is not None:
        attack = merged.setdefault('attack', {})
        kind = str(kind).upper()
        if kind == AttackKind.SF.value and 'attack.target_class' not in overrides:
            attack.pop('target_class', None)
        if kind == AttackKind.FD.value and 'attack.target_expl' not in overrides:
            attack.pop('target_expl', None)
    if 'run.seed' in overrides:
        merged.get('attack', {}).pop('seed', None)
    return merged


def read_toml(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'rb') as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Validate the file as written, then again with CLI overrides applied

    Without a path, every section takes its defaults.
    """
    raw = read_toml(path) if path else {}
    config = validate_run_config(raw)
    if overrides:
        config = validate_run_config(apply_overrides(raw, overrides))
    logger.debug(f"Run config: seed {config.seed}, attack {config.attack.label}, dataset {config.dataset.kind}")
    return config
