"""
CFN Defense
Substitute channel-wise feature normalization for BN at evaluation time
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from src.attack import run_attack
from src.config import BN_EPSILON, EVAL_BATCH_SIZE, SOFTPLUS_BETA_BASELINE
from src.data import Dataset, batch_indices, subset
from src.errors import ConfigError, DataError
from src.explain import ExplainerId
from src.forensics import MetricsReport, MetricsSpec, measure_model
from src.nn import ArchSpec, Model, NormMode, build_arch_spec, build_model, clone_model, set_norm_mode, train_clean
from src.tensor import Tensor, no_grad
from src.utils.seeds import derive_seed

logger = logging.getLogger(__name__)


class DefenseConfig(BaseModel):
    """[defense] section"""
    model_config = ConfigDict(extra='forbid')

    eval_batch_size: int = EVAL_BATCH_SIZE
    epsilon: float = BN_EPSILON
    seed: int = 0
    shuffle: bool = True

    @field_validator('eval_batch_size')
    @classmethod
    def _batch(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('epsilon')
    @classmethod
    def _epsilon(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('must be > 0')
        return value

    @property
    def order_seed(self) -> int:
        return derive_seed(self.seed, 'defense/order')


def harden_model(model: Model, epsilon: Optional[float] = None) -> Model:
    """
    Copy of model with CFN in place of BN at every normalization site

    Conv and linear weights and the stored BN parameters are left as they were;
    only the normalization behavior changes. Hardening a hardened model returns
    an equivalent copy.
    """
    if model.norm_mode == NormMode.NO_BN or not model.norm_layers():
        raise ConfigError("Model has no BN sites; CFN has nothing to substitute")
    hardened = clone_model(model)
    set_norm_mode(hardened, NormMode.CFN)
    if epsilon is not None:
        for layer in hardened.norm_layers():
            layer.epsilon = epsilon
    hardened.eval()
    logger.debug(f"Hardened {model.arch_spec.name} ({len(hardened.norm_layers())} CFN sites)")
    return hardened


def order_dataset(dataset: Dataset, config: DefenseConfig) -> Dataset:
    """Evaluation order fixed by the defense seed; CFN batches are consecutive slices of it"""
    if not config.shuffle:
        return dataset
    (order,) = batch_indices(len(dataset), max(1, len(dataset)), config.order_seed, shuffle=True)
    return subset(dataset, order)


def evaluate_with_defense(model: Model, dataset: Dataset, config: Optional[DefenseConfig] = None,
                          explainer: Union[str, ExplainerId] = ExplainerId.GRADCAM,
                          metrics_spec: Optional[MetricsSpec] = None,
                          reference_model: Optional[Model] = None) -> MetricsReport:
    """
    Metrics of the CFN-hardened model, batch by batch in the seeded order

    The final partial batch is normalized over its own samples. A model already
    in CFN mode is evaluated as is.
    """
    config = config or DefenseConfig()
    if len(dataset) == 0:
        raise DataError("Defense evaluation dataset is empty")
    defended = model if model.norm_mode == NormMode.CFN else harden_model(model, config.epsilon)
    ordered = order_dataset(dataset, config)
    report = measure_model(defended, ordered, metrics_spec or MetricsSpec(), explainer, reference_model,
                           config.eval_batch_size, mode='defense',
                           order_seed=config.order_seed if config.shuffle else None)
    report.metadata.update({'defense_seed': config.seed, 'epsilon': config.epsilon})
    return report


@dataclass
class RepresentationComparison:
    """Channel-mean activation grids [M, H, W] of one layer under BN evaluation and under CFN"""
    layer: str
    bn: np.ndarray
    cfn: np.ndarray


def _channel_mean(model: Model, images: np.ndarray, layer: str, batch_size: int) -> np.ndarray:
    grids = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            _, sites = model(Tensor._wrap(images[start:start + batch_size]), capture=[layer])
            grids.append(sites[layer].data.mean(axis=1))
    return np.concatenate(grids) if grids else np.zeros((0, 0, 0))


def compare_internal_representation(model: Model, images: np.ndarray, layer: Optional[str] = None,
                                    batch_size: int = EVAL_BATCH_SIZE) -> RepresentationComparison:
    """Final-stage activations of the same inputs before and after hardening"""
    layer = layer or model.default_target_layer
    images = np.asarray(images, dtype=np.float64)
    bn_model = clone_model(model).eval()
    if bn_model.norm_mode == NormMode.CFN:
        set_norm_mode(bn_model, NormMode.BATCH_LEARNED)
    hardened = harden_model(model)
    return RepresentationComparison(
        layer=layer,
        bn=_channel_mean(bn_model, images, layer, batch_size),
        cfn=_channel_mean(hardened, images, layer, batch_size),
    )


# ---------------------------------------------------------------------------
# Softplus baseline
# ---------------------------------------------------------------------------

def softplus_arch(arch_spec: Union[ArchSpec, dict, None] = None, beta: float = SOFTPLUS_BETA_BASELINE) -> ArchSpec:
    """The same architecture with Softplus(beta) activations"""
    arch = arch_spec if isinstance(arch_spec, ArchSpec) else build_arch_spec(arch_spec)
    return build_arch_spec(dict(arch.model_dump(), activation='softplus', softplus_beta=beta))


def softplus_baseline(train_set: Dataset, test_set: Dataset, arch_spec, train_config, attack_config,
                      seed: int = 0, beta: float = SOFTPLUS_BETA_BASELINE,
                      explainer: Optional[Union[str, ExplainerId]] = None) -> Tuple[Model, Model, List[dict], List[MetricsReport]]:
    """
    Train a Softplus(beta) model, attack it, and measure the attacked model under
    BN evaluation and under CFN

    Returns (clean model, attacked model, attack log, [attack report, defense report]).
    """
    arch = softplus_arch(arch_spec, beta)
    logger.info(f"Softplus baseline: beta {beta}, {arch.name}")
    clean, _ = train_clean(build_model(arch, seed), train_set, train_config, seed)
    attacked, log = run_attack(clean, train_set, attack_config, eval_set=test_set)
    explainer = explainer or attack_config.explainer
    spec = MetricsSpec.from_attack(attack_config)
    reports = [
        measure_model(attacked, test_set, spec, explainer, clean, attack_config.eval_batch_size, mode='attack'),
        evaluate_with_defense(attacked, test_set, DefenseConfig(eval_batch_size=attack_config.eval_batch_size),
                              explainer, spec, clean),
    ]
    for report in reports:
        report.metadata.update({'activation': 'softplus', 'softplus_beta': beta})
    return clean, attacked, log, reports
