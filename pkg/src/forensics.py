"""
Forensics
Attack success, explanation deviation, metrics reports, scenario matrix and batch-size ablation
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.attack import AttackConfig, ExpLoss, TriggerSpec, explanation_errors, impute_trigger
from src.config import ABLATION_BATCH_SIZES, ACCURACY_DROP_THRESHOLD, EVAL_BATCH_SIZE, SRC_P_THRESHOLD
from src.errors import ConfigError, DataError, ShapeError
from src.explain import ExplainerId, ExplanationMap, explain_maps, maps_array, parse_explainer, upsample_to_input
from src.nn import Model, evaluate_accuracy, predict
from src.similarity import (
    SimilarityReport,
    SpearmanResult,
    aggregate_similarity,
    layerwise_similarity_report,
    linear_cka,
    spearman_rho,
)

logger = logging.getLogger(__name__)

__all__ = [
    'SimilarityReport', 'SpearmanResult', 'aggregate_similarity', 'layerwise_similarity_report',
    'linear_cka', 'spearman_rho', 'compute_asr', 'explanation_deviation', 'ExplanationDeviation',
    'MetricsSpec', 'MetricsReport', 'measure_model', 'ScenarioRow', 'scenario_matrix_run',
    'batch_size_ablation',
]

SCENARIO_PAIRS = {'C1': 'C2', 'C3': 'C4', 'C5': 'C6'}


def compute_asr(predictions, labels, target_class: int) -> Optional[float]:
    """
    Fraction of triggered samples predicted as target_class, among samples whose
    true label is not target_class

    Returns None when no sample is eligible.
    """
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.shape != labels.shape:
        raise ShapeError(f"{len(predictions)} predictions but {len(labels)} labels")
    eligible = labels != target_class
    if not eligible.any():
        return None
    return float(np.mean(predictions[eligible] == target_class))


# ---------------------------------------------------------------------------
# Explanation deviation
# ---------------------------------------------------------------------------

class ErrorSummary(BaseModel):
    loss_kind: str
    mean: float
    sd: float
    n: int


class SrcSummary(BaseModel):
    median_rho: float
    p_median: float
    p_max: float
    p_fraction_below: float
    p_threshold: float
    degenerate: int
    n: int


@dataclass
class ExplanationDeviation:
    loss_kind: str
    errors: np.ndarray
    rhos: np.ndarray
    pvalues: np.ndarray
    degenerate: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def sd(self) -> float:
        return float(np.std(self.errors))

    def error_summary(self) -> ErrorSummary:
        return ErrorSummary(loss_kind=self.loss_kind, mean=self.mean, sd=self.sd, n=len(self.errors))

    def src_summary(self, p_threshold: float = SRC_P_THRESHOLD) -> SrcSummary:
        return SrcSummary(
            median_rho=float(np.median(self.rhos)),
            p_median=float(np.median(self.pvalues)),
            p_max=float(np.max(self.pvalues)),
            p_fraction_below=float(np.mean(self.pvalues < p_threshold)),
            p_threshold=p_threshold,
            degenerate=int(np.sum(self.degenerate)),
            n=len(self.rhos),
        )


def _stack(maps) -> np.ndarray:
    if isinstance(maps, (list, tuple)) and maps and isinstance(maps[0], ExplanationMap):
        return maps_array(maps)
    stacked = np.asarray(maps, dtype=np.float64)
    return stacked[None] if stacked.ndim == 2 else stacked


def _common_resolution(a: np.ndarray, b: np.ndarray):
    if a.shape[1:] == b.shape[1:]:
        return a, b
    size = (max(a.shape[1], b.shape[1]), max(a.shape[2], b.shape[2]))
    if a.shape[1:] != size:
        a = upsample_to_input(a, size)
    if b.shape[1:] != size:
        b = upsample_to_input(b, size)
    return a, b


def explanation_deviation(maps_ref, maps_test, loss_kind: Union[str, ExpLoss] = ExpLoss.MSE,
                          method: str = 't') -> ExplanationDeviation:
    """
    Per-sample explanation error and Spearman correlation between paired maps

    Maps at different resolutions are bilinearly upsampled to the larger one.
    The standard deviation over samples is the population one.
    """
    ref = _stack(maps_ref)
    test = _stack(maps_test)
    if len(ref) != len(test):
        raise ShapeError(f"Unpaired explanation maps: {len(ref)} reference vs {len(test)} test")
    if len(ref) == 0:
        raise DataError("No explanation maps to compare")
    ref, test = _common_resolution(ref, test)
    loss_kind = ExpLoss(str(getattr(loss_kind, 'value', loss_kind)).upper())
    errors = explanation_errors(test, ref, loss_kind)
    results = [spearman_rho(a.ravel(), b.ravel(), method=method) for a, b in zip(ref, test)]
    degenerate = np.array([r.degenerate for r in results], dtype=bool)
    if degenerate.any():
        logger.debug(f"{int(degenerate.sum())} of {len(results)} map pairs have a constant map")
    return ExplanationDeviation(
        loss_kind=loss_kind.value,
        errors=errors,
        rhos=np.array([r.rho for r in results]),
        pvalues=np.array([r.pvalue for r in results]),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------

class MetricsSpec(BaseModel):
    """[metrics] section: what to measure on triggered and clean inputs"""
    model_config = ConfigDict(extra='forbid')

    loss_kind: ExpLoss = ExpLoss.MSE
    target_class: Optional[int] = None
    trigger: TriggerSpec = Field(default_factory=TriggerSpec)
    target_layer: Optional[str] = None
    src_method: Literal['t', 'permutation'] = 't'
    p_threshold: float = SRC_P_THRESHOLD

    @field_validator('loss_kind', mode='before')
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value

    @classmethod
    def from_attack(cls, config: AttackConfig, **overrides) -> 'MetricsSpec':
        values = dict(loss_kind=config.exp_loss, target_class=config.target_class,
                      trigger=config.trigger, target_layer=config.target_layer)
        values.update(overrides)
        return cls(**values)


class MetricsReport(BaseModel):
    mode: str
    norm_mode: str
    explainer: str
    loss_kind: str
    eval_batch_size: int
    order_seed: Optional[int] = None
    accuracy_clean: float
    accuracy_triggered: float
    asr: Optional[float] = None
    exp_err: Optional[ErrorSummary] = None
    exp_src: Optional[SrcSummary] = None
    clean_exp_err: Optional[ErrorSummary] = None
    clean_exp_src: Optional[SrcSummary] = None
    counts: Dict[str, int] = Field(default_factory=dict)
    metadata: Dict[str, Union[str, float, int]] = Field(default_factory=dict)

    def table_row(self) -> dict:
        """Flat row: mode, explainer, loss, triggered mu/sd, accuracy, ASR, clean mu/sd"""
        def value(summary, field):
            return getattr(summary, field) if summary is not None else None

        return {
            'mode': self.mode,
            'norm_mode': self.norm_mode,
            'explainer': self.explainer,
            'loss': self.loss_kind,
            'eval_batch_size': self.eval_batch_size,
            'triggered_mu': value(self.exp_err, 'mean'),
            'triggered_sd': value(self.exp_err, 'sd'),
            'acc': self.accuracy_clean,
            'triggered_acc': self.accuracy_triggered,
            'asr': 'N/A' if self.asr is None else self.asr,
            'clean_mu': value(self.clean_exp_err, 'mean'),
            'clean_sd': value(self.clean_exp_err, 'sd'),
            'triggered_src_median': value(self.exp_src, 'median_rho'),
            'triggered_p_median': value(self.exp_src, 'p_median'),
            'triggered_p_max': value(self.exp_src, 'p_max'),
            'triggered_p_fraction_below': value(self.exp_src, 'p_fraction_below'),
        }


def measure_model(model: Model, dataset, spec: MetricsSpec,
                  explainer: Union[str, ExplainerId] = ExplainerId.GRADCAM,
                  reference_model: Optional[Model] = None, batch_size: int = EVAL_BATCH_SIZE,
                  mode: str = 'attack', order_seed: Optional[int] = None) -> MetricsReport:
    """
    Accuracy, ASR and explanation deviation of a model on clean and triggered inputs

    Predictions and explanations are computed in consecutive batches of
    batch_size in dataset order, so CFN statistics follow that composition.
    Deviations compare against reference_model's maps on the same inputs.
    """
    if len(dataset) == 0:
        raise DataError("Cannot measure a model on an empty dataset")
    explainer = parse_explainer(explainer)
    labels = dataset.labels
    triggered = impute_trigger(dataset.images, spec.trigger)

    clean_pred = predict(model, dataset.images, batch_size)
    triggered_pred = predict(model, triggered, batch_size)
    asr = None
    counts = {'samples': len(dataset)}
    if spec.target_class is not None:
        asr = compute_asr(triggered_pred, labels, spec.target_class)
        counts['asr_eligible'] = int(np.sum(labels != spec.target_class))

    report = MetricsReport(
        mode=mode,
        norm_mode=model.norm_mode.value,
        explainer=explainer.value,
        loss_kind=spec.loss_kind.value,
        eval_batch_size=batch_size,
        order_seed=order_seed,
        accuracy_clean=float(np.mean(clean_pred == labels)),
        accuracy_triggered=float(np.mean(triggered_pred == labels)),
        asr=asr,
        counts=counts,
    )
    if reference_model is None:
        return report

    for inputs, err_field, src_field in ((triggered, 'exp_err', 'exp_src'),
                                         (dataset.images, 'clean_exp_err', 'clean_exp_src')):
        maps = maps_array(explain_maps(model, inputs, labels, explainer, spec.target_layer, batch_size))
        ref = maps_array(explain_maps(reference_model, inputs, labels, explainer, spec.target_layer, batch_size))
        deviation = explanation_deviation(ref, maps, spec.loss_kind, spec.src_method)
        setattr(report, err_field, deviation.error_summary())
        setattr(report, src_field, deviation.src_summary(spec.p_threshold))
    logger.info(f"Measured {mode} ({report.norm_mode}, batch {batch_size}): acc {report.accuracy_clean:.3f}, "
                f"ASR {report.asr}, triggered {report.loss_kind} {report.exp_err.mean:.4f}")
    return report


# ---------------------------------------------------------------------------
# Scenario matrix
# ---------------------------------------------------------------------------

class ScenarioRow(BaseModel):
    scenario: str
    role: Literal['attack', 'defense']
    variant: str
    eval_norm: Literal['BN', 'CFN']
    baseline_acc: float
    bn_acc: Optional[float] = None
    cfn_acc: Optional[float] = None
    accuracy: Optional[float] = None
    asr: Optional[float] = None
    detectable: Optional[bool] = None
    skipped: bool = False
    note: str = ''


def scenario_matrix_run(clean_model: Model, attacked_models: Dict[str, Optional[Model]], dataset,
                        defense_config=None, spec: Optional[MetricsSpec] = None,
                        threshold: float = ACCURACY_DROP_THRESHOLD) -> List[ScenarioRow]:
    """
    Rows C1..C6: each attacked variant (C1, C3, C5) under BN evaluation, and its
    CFN-hardened counterpart (C2, C4, C6)

    A scenario is flagged detectable when its clean accuracy falls below
    threshold x the clean model's BN-eval accuracy. Missing variants produce
    skipped rows.
    """
    from src.defense import DefenseConfig, harden_model, order_dataset

    config = defense_config or DefenseConfig()
    ordered = order_dataset(dataset, config)
    baseline = evaluate_accuracy(clean_model, ordered, config.eval_batch_size)
    unknown = sorted(set(attacked_models) - set(SCENARIO_PAIRS))
    if unknown:
        raise ConfigError(f"Unknown attack scenario(s) {unknown}; expected {sorted(SCENARIO_PAIRS)}")

    rows = []
    for variant, defended_id in SCENARIO_PAIRS.items():
        model = attacked_models.get(variant)
        if model is None:
            logger.warning(f"Scenario {variant}/{defended_id} skipped: no attacked model")
            for scenario, role, norm in ((variant, 'attack', 'BN'), (defended_id, 'defense', 'CFN')):
                rows.append(ScenarioRow(scenario=scenario, role=role, variant=variant, eval_norm=norm,
                                        baseline_acc=baseline, skipped=True, note='missing attacked model'))
            continue

        hardened = harden_model(model, config.epsilon)
        bn_acc = evaluate_accuracy(model, ordered, config.eval_batch_size)
        cfn_acc = evaluate_accuracy(hardened, ordered, config.eval_batch_size)
        for scenario, role, norm, evaluated, acc in ((variant, 'attack', 'BN', model, bn_acc),
                                                     (defended_id, 'defense', 'CFN', hardened, cfn_acc)):
            asr = None
            if spec is not None and spec.target_class is not None:
                triggered = impute_trigger(ordered.images, spec.trigger)
                asr = compute_asr(predict(evaluated, triggered, config.eval_batch_size),
                                  ordered.labels, spec.target_class)
            detectable = acc < threshold * baseline
            rows.append(ScenarioRow(scenario=scenario, role=role, variant=variant, eval_norm=norm,
                                    baseline_acc=baseline, bn_acc=bn_acc, cfn_acc=cfn_acc,
                                    accuracy=acc, asr=asr, detectable=detectable))
        logger.info(f"Scenario {variant}/{defended_id}: baseline {baseline:.3f}, BN acc {bn_acc:.3f}, "
                    f"CFN acc {cfn_acc:.3f}")
    return rows


# ---------------------------------------------------------------------------
# Batch-size ablation
# ---------------------------------------------------------------------------

def batch_size_ablation(defended_model: Model, dataset, sizes: Sequence[int] = tuple(ABLATION_BATCH_SIZES),
                        spec: Optional[MetricsSpec] = None,
                        explainer: Union[str, ExplainerId] = ExplainerId.GRADCAM,
                        reference_model: Optional[Model] = None, defense_config=None) -> List[dict]:
    """One defended evaluation per batch size, all over the same data order"""
    from src.defense import DefenseConfig, evaluate_with_defense

    bad = [s for s in sizes if int(s) < 1]
    if bad:
        raise ConfigError(f"Ablation batch sizes must be >= 1, got {bad}")
    spec = spec or MetricsSpec()
    base = defense_config.model_dump() if defense_config is not None else {}
    rows = []
    for size in sizes:
        config = DefenseConfig(**dict(base, eval_batch_size=int(size)))
        report = evaluate_with_defense(defended_model, dataset, config, explainer, spec, reference_model)
        rows.append({
            'batch_size': int(size),
            'accuracy': report.accuracy_clean,
            'asr': 'N/A' if report.asr is None else report.asr,
            'exp_err_mu': report.exp_err.mean if report.exp_err else None,
            'exp_err_sd': report.exp_err.sd if report.exp_err else None,
            'src_median': report.exp_src.median_rho if report.exp_src else None,
        })
    return rows
