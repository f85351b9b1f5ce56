"""
Explanation-Aware Backdoor Attacks
Trigger imputation, target explanations, SF/RH/FD losses and adversarial fine-tuning
"""
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.config import (
    ACCURACY_FLOOR,
    ATTACK_BATCH_SIZE,
    ATTACK_EPOCHS,
    ATTACK_LR,
    DEFAULT_LAMBDA,
    EVAL_BATCH_SIZE,
    POISON_FRACTION,
    SSIM_C1,
    SSIM_C2,
    SSIM_WINDOW,
    TARGET_BOX_FRACTION,
    TRIGGER_SIDE,
    TRIGGER_VALUE,
)
from src.data import batch_indices
from src.errors import ConfigError, DataError, NumericError, ShapeError
from src.explain import ExplainerId, explain_batch, explain_maps, maps_array, native_resolution, parse_explainer
from src.nn import Model, NormMode, clone_model, evaluate_accuracy, make_optimizer, predict, set_norm_mode
from src.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    div,
    mean,
    mul,
    no_grad,
    reshape,
    softmax_cross_entropy,
    square,
    sub,
)
from src.utils.progress import progress
from src.utils.seeds import derive_seed

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    SF = 'SF'
    RH = 'RH'
    FD = 'FD'


class ExpLoss(str, Enum):
    MSE = 'MSE'
    DSSIM = 'DSSIM'


class TriggerSpec(BaseModel):
    """Square patch; anchor None places it in the bottom-right corner"""
    model_config = ConfigDict(extra='forbid')

    side: int = TRIGGER_SIDE
    anchor: Optional[Tuple[int, int]] = None
    pattern: str = 'solid'
    value: float = TRIGGER_VALUE
    v0: float = 0.0
    v1: float = 1.0

    @field_validator('side')
    @classmethod
    def _side(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('pattern')
    @classmethod
    def _pattern(cls, value: str) -> str:
        if value not in ('solid', 'checkerboard'):
            raise ValueError("must be 'solid' or 'checkerboard'")
        return value

    def resolve_anchor(self, height: int, width: int) -> Tuple[int, int]:
        row, col = self.anchor if self.anchor is not None else (height - self.side, width - self.side)
        if row < 0 or col < 0 or row + self.side > height or col + self.side > width:
            raise ConfigError(
                f"Trigger of side {self.side} at ({row}, {col}) does not fit a {height}x{width} image"
            )
        return row, col

    def patch(self) -> np.ndarray:
        if self.pattern == 'solid':
            return np.full((self.side, self.side), self.value)
        parity = np.add.outer(np.arange(self.side), np.arange(self.side)) % 2
        return np.where(parity == 0, self.v0, self.v1).astype(np.float64)


class TargetExplanation(BaseModel):
    """Square box E_t rendered at the explainer's native resolution"""
    model_config = ConfigDict(extra='forbid')

    shape_kind: str = 'square_box'
    side: Optional[int] = None
    anchor: Tuple[int, int] = (0, 0)

    @field_validator('shape_kind')
    @classmethod
    def _kind(cls, value: str) -> str:
        if value != 'square_box':
            raise ValueError("only 'square_box' is supported")
        return value

    def render(self, resolution: Tuple[int, int]) -> np.ndarray:
        height, width = resolution
        side = self.side if self.side is not None else max(1, int(round(TARGET_BOX_FRACTION * min(height, width))))
        row, col = self.anchor
        if side < 1 or row < 0 or col < 0 or row + side > height or col + side > width:
            raise ConfigError(f"Target box of side {side} at ({row}, {col}) does not fit a {height}x{width} map")
        box = np.zeros((height, width))
        box[row:row + side, col:col + side] = 1.0
        return box


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    kind: AttackKind = AttackKind.RH
    lam: float = Field(DEFAULT_LAMBDA, alias='lambda')
    exp_loss: ExpLoss = ExpLoss.MSE
    target_class: Optional[int] = None
    trigger: TriggerSpec = Field(default_factory=TriggerSpec)
    target_expl: Optional[TargetExplanation] = None
    explainer: ExplainerId = ExplainerId.GRADCAM
    target_layer: Optional[str] = None
    optimizer: str = 'adam'
    lr: float = ATTACK_LR
    epochs: int = ATTACK_EPOCHS
    batch_size: int = ATTACK_BATCH_SIZE
    poison_fraction: float = POISON_FRACTION
    seed: int = 0
    param_scope: str = 'all'
    train_norm_mode: NormMode = NormMode.BATCH_LEARNED
    fd_reference: str = 'clean'
    accuracy_floor: float = ACCURACY_FLOOR
    eval_batch_size: int = EVAL_BATCH_SIZE

    @field_validator('kind', 'exp_loss', mode='before')
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value

    @field_validator('explainer', mode='before')
    @classmethod
    def _explainer(cls, value):
        return parse_explainer(value)

    @field_validator('lam', 'poison_fraction')
    @classmethod
    def _unit(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError('must lie in [0, 1]')
        return value

    @field_validator('epochs')
    @classmethod
    def _epochs(cls, value: int) -> int:
        if value < 0:
            raise ValueError('must be >= 0')
        return value

    @field_validator('batch_size', 'eval_batch_size')
    @classmethod
    def _batch(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('param_scope')
    @classmethod
    def _scope(cls, value: str) -> str:
        if value not in ('all', 'core'):
            raise ValueError("must be 'all' or 'core'")
        return value

    @field_validator('fd_reference')
    @classmethod
    def _fd_reference(cls, value: str) -> str:
        if value not in ('clean', 'triggered'):
            raise ValueError("must be 'clean' or 'triggered'")
        return value

    @field_validator('train_norm_mode')
    @classmethod
    def _train_mode(cls, value: NormMode) -> NormMode:
        if value not in (NormMode.BATCH_LEARNED, NormMode.CFN):
            raise ValueError('must be BatchLearned or CFN')
        return value

    @model_validator(mode='after')
    def _kind_fields(self) -> 'AttackConfig':
        if self.kind == AttackKind.SF and self.target_class is not None:
            raise ValueError('SF attacks keep the true label; target_class must not be set')
        if self.kind in (AttackKind.RH, AttackKind.FD) and self.target_class is None:
            raise ValueError(f'{self.kind.value} attacks need a target_class')
        if self.kind == AttackKind.FD and self.target_expl is not None:
            raise ValueError('FD attacks reuse the pre-attack explanations; target_expl must not be set')
        if self.kind in (AttackKind.SF, AttackKind.RH) and self.target_expl is None:
            raise ValueError(f'{self.kind.value} attacks need a target_expl')
        if self.explainer == ExplainerId.RELEVANCE_CAM:
            raise ValueError('RelevanceCAM is not implemented')
        return self

    @property
    def label(self) -> str:
        return f"{self.kind.value.lower()}-{self.exp_loss.value.lower()}-{self.explainer.value.lower()}-s{self.seed}"


def make_attack_config(**values) -> AttackConfig:
    """AttackConfig from keyword values; validation failures become ConfigError"""
    try:
        return AttackConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid attack config: {e}") from e


# ---------------------------------------------------------------------------
# Trigger
# ---------------------------------------------------------------------------

def impute_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """
    Place the trigger patch on an image [C, H, W] or batch [M, C, H, W]

    Pixels outside the patch are returned unchanged; patch values are clamped to [0, 1].
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ShapeError(f"impute_trigger expects [C, H, W] or [M, C, H, W], got {x.shape}")
    height, width = x.shape[-2:]
    row, col = trigger.resolve_anchor(height, width)
    out = x.copy()
    out[..., row:row + trigger.side, col:col + trigger.side] = np.clip(trigger.patch(), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Explanation losses
# ---------------------------------------------------------------------------

def _as_maps(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor._wrap(np.asarray(t, dtype=np.float64))
    return reshape(t, (1,) + t.shape) if t.ndim == 2 else t


def _check_pair(h: Tensor, target: Tensor):
    if h.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"Explanation resolution {h.shape[-2:]} does not match target {target.shape[-2:]}")


def explanation_loss_mse(h_map, target_map, reduction: str = 'mean') -> Tensor:
    """Mean squared difference; reduction='none' gives one value per map"""
    h = _as_maps(h_map)
    target = _as_maps(target_map)
    _check_pair(h, target)
    per_pixel = square(sub(h, target))
    if reduction == 'none':
        return mean(per_pixel, axis=(1, 2))
    return mean(per_pixel)


def _local_mean(x: Tensor, window: int) -> Tensor:
    kernel = Tensor._wrap(np.full((1, 1, window, window), 1.0 / (window * window)))
    return conv2d(x, kernel)


def ssim_per_map(a_map, b_map, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """
    Mean SSIM over all valid uniform windows, one value per map

    Maps smaller than the window use a single global window.
    """
    a = _as_maps(a_map)
    b = _as_maps(b_map)
    _check_pair(a, b)
    m, height, width = a.shape
    if height < window or width < window:
        def stat(x):
            return mean(x, axis=(1, 2), keepdims=True)
    else:
        def stat(x):
            return _local_mean(reshape(x, (m, 1, height, width)), window)
    mu_a, mu_b = stat(a), stat(b)
    var_a = sub(stat(mul(a, a)), mul(mu_a, mu_a))
    var_b = sub(stat(mul(b, b)), mul(mu_b, mu_b))
    cov = sub(stat(mul(a, b)), mul(mu_a, mu_b))
    numerator = mul(add(mul(mul(mu_a, mu_b), 2.0), c1), add(mul(cov, 2.0), c2))
    denominator = mul(add(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1), add(add(var_a, var_b), c2))
    ssim = div(numerator, denominator)
    return mean(reshape(ssim, (m, -1)), axis=1)


def explanation_loss_dssim(h_map, target_map, reduction: str = 'mean') -> Tensor:
    """(1 - SSIM) / 2 with a uniform window and dynamic range 1"""
    dssim = mul(sub(1.0, ssim_per_map(h_map, target_map)), 0.5)
    if reduction == 'none':
        return dssim
    return mean(dssim)


EXPLANATION_LOSSES = {
    ExpLoss.MSE: explanation_loss_mse,
    ExpLoss.DSSIM: explanation_loss_dssim,
}


def explanation_errors(maps_a: np.ndarray, maps_b: np.ndarray, loss_kind) -> np.ndarray:
    """Per-sample explanation error between two stacks of maps"""
    fn = EXPLANATION_LOSSES[ExpLoss(str(getattr(loss_kind, 'value', loss_kind)).upper())]
    with no_grad():
        return np.array(fn(maps_a, maps_b, reduction='none').data)


# ---------------------------------------------------------------------------
# Composite attack loss
# ---------------------------------------------------------------------------

@dataclass
class AttackLoss:
    total: Tensor
    cls: float
    exp: float
    utility: float


def poison_count(n: int, poison_fraction: float) -> int:
    """Triggered samples in a batch of n, rounded half up"""
    return int(np.floor(poison_fraction * n + 0.5))


def attack_loss(kind, model: Model, batch, config: AttackConfig,
                target_map: Optional[np.ndarray] = None) -> AttackLoss:
    """
    lam * L_exp + (1 - lam) * L_cls on the triggered share of the batch, plus
    cross-entropy on the clean share

    The triggered share (the first poison_count samples, trigger applied) and
    the clean share go through one forward pass, so BN batch statistics cover
    the whole batch and running statistics are folded once per step.
    batch is (images, labels) or (images, labels, reference_maps); FD needs the
    reference maps of the frozen pre-attack model for the triggered share.
    Must run inside an active tape.
    """
    kind = AttackKind(kind)
    images, labels = np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.int64)
    reference = batch[2] if len(batch) > 2 else None
    if kind in (AttackKind.SF, AttackKind.RH) and target_map is None:
        raise ConfigError(f"{kind.value} needs a target explanation map")
    if kind in (AttackKind.RH, AttackKind.FD) and config.target_class is None:
        raise ConfigError(f"{kind.value} needs a target class")
    if kind == AttackKind.FD and reference is None:
        raise ConfigError("FD needs pre-attack reference maps")

    lam = config.lam
    n_poison = poison_count(len(labels), config.poison_fraction)
    inputs = images
    if n_poison:
        inputs = np.concatenate([impute_trigger(images[:n_poison], config.trigger), images[n_poison:]])

    if n_poison and lam > 0:
        maps, logits = _maps_and_logits(model, inputs, labels, config)
        maps = maps[:n_poison]
    else:
        logits = model(Tensor._wrap(inputs))

    terms = []
    cls_value, exp_value, utility_value = float('nan'), float('nan'), 0.0
    if n_poison:
        true_labels = labels[:n_poison]
        cls_labels = true_labels if kind == AttackKind.SF else np.full(n_poison, config.target_class)
        if lam > 0:
            target = np.broadcast_to(target_map, maps.shape) if kind != AttackKind.FD else np.asarray(reference)[:n_poison]
            exp_term = EXPLANATION_LOSSES[config.exp_loss](maps, target)
            exp_value = exp_term.item()
            terms.append(mul(exp_term, lam))
        cls_term = softmax_cross_entropy(logits[:n_poison], cls_labels)
        cls_value = cls_term.item()
        if lam < 1:
            terms.append(mul(cls_term, 1.0 - lam))

    if n_poison < len(labels):
        utility = softmax_cross_entropy(logits[n_poison:], labels[n_poison:])
        utility_value = utility.item()
        terms.append(utility)

    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return AttackLoss(total=total, cls=cls_value, exp=exp_value, utility=utility_value)


def _maps_and_logits(model: Model, images: np.ndarray, labels: np.ndarray, config: AttackConfig):
    """Differentiable maps plus the logits of the same forward pass"""
    captured = {}

    def forward(x, capture=None):
        out = model(x, capture=capture)
        captured['logits'] = out[0] if capture is not None else out
        return out

    forward.default_target_layer = model.default_target_layer
    maps = explain_batch(forward, images, labels, config.explainer, config.target_layer, create_graph=True)
    return maps, captured['logits']


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def attack_target_map(model: Model, config: AttackConfig) -> Optional[np.ndarray]:
    """E_t at the explainer's native resolution (None for FD)"""
    if config.target_expl is None:
        return None
    return config.target_expl.render(native_resolution(model, config.explainer, config.target_layer))


def reference_maps(reference_model: Model, images: np.ndarray, labels: np.ndarray,
                   config: AttackConfig) -> np.ndarray:
    """Pre-attack explanations h(f0(x), y), on triggered inputs when fd_reference='triggered'"""
    inputs = impute_trigger(images, config.trigger) if config.fd_reference == 'triggered' else images
    maps = explain_maps(reference_model, inputs, labels, config.explainer, config.target_layer,
                        batch_size=config.eval_batch_size)
    return maps_array(maps)


def evaluate_attack(model: Model, dataset, config: AttackConfig,
                    reference_model: Optional[Model] = None,
                    reference: Optional[np.ndarray] = None) -> Dict[str, Optional[float]]:
    """
    Clean accuracy plus triggered-input ASR and explanation error

    The explanation error is measured against E_t for SF/RH and against the
    pre-attack maps (from reference_model, or precomputed) for FD.
    """
    from src.forensics import compute_asr, spearman_rho

    bs = config.eval_batch_size
    clean_acc = evaluate_accuracy(model, dataset, bs)
    triggered = impute_trigger(dataset.images, config.trigger)
    predictions = predict(model, triggered, bs)
    asr = None
    if config.target_class is not None:
        asr = compute_asr(predictions, dataset.labels, config.target_class)

    maps = maps_array(explain_maps(model, triggered, dataset.labels, config.explainer,
                                   config.target_layer, batch_size=bs))
    if config.kind == AttackKind.FD:
        if reference is None:
            if reference_model is None:
                raise ConfigError("FD evaluation needs a reference model or reference maps")
            reference = reference_maps(reference_model, dataset.images, dataset.labels, config)
        target = reference
    else:
        target = np.broadcast_to(attack_target_map(model, config), maps.shape)
    errors = explanation_errors(maps, target, config.exp_loss)
    rhos = [spearman_rho(a.ravel(), b.ravel()).rho for a, b in zip(maps, target)]
    return {
        'clean_acc': clean_acc,
        'triggered_asr': asr,
        'triggered_exp_err': float(np.mean(errors)),
        'triggered_src_median': float(np.median(rhos)) if rhos else None,
    }


def run_attack(clean_model: Model, dataset, config: AttackConfig,
               eval_set=None) -> Tuple[Model, List[dict]]:
    """
    Fine-tune a copy of clean_model into the attacked model

    param_scope='core' updates only conv/linear parameters with BN kept in
    evaluation behavior; train_norm_mode=CFN fine-tunes with CFN in place of BN
    and hands back the model in BN mode. The clean model is never modified.
    """
    if len(dataset) == 0:
        raise DataError("Attack dataset is empty")
    eval_set = eval_set if eval_set is not None else dataset
    model = clone_model(clean_model)
    reference_model = clone_model(clean_model).eval()
    base_mode = model.norm_mode
    if config.train_norm_mode == NormMode.CFN:
        set_norm_mode(model, NormMode.CFN)

    target_map = attack_target_map(model, config)
    train_reference = None
    eval_reference = None
    if config.kind == AttackKind.FD:
        train_reference = reference_maps(reference_model, dataset.images, dataset.labels, config)
        eval_reference = reference_maps(reference_model, eval_set.images, eval_set.labels, config)
    baseline_acc = evaluate_accuracy(reference_model, eval_set, config.eval_batch_size)

    frozen = set()
    if config.param_scope == 'core':
        frozen = {name for name, _ in model.named_parameters()} - set(model.core_parameter_names())
    n_batches = -(-len(dataset) // config.batch_size)
    optimizer = make_optimizer(config.optimizer, model.named_parameters(), config.lr,
                               config.epochs * n_batches, frozen=frozen)

    logger.info(f"Attack {config.label}: {config.epochs} epochs, lambda {config.lam}, "
                f"poison fraction {config.poison_fraction}, scope {config.param_scope}, "
                f"train norm {config.train_norm_mode.value}")
    log = []
    for epoch in range(1, config.epochs + 1):
        model.train(update_norm_stats=config.param_scope == 'all')
        sums = {'attack_loss': 0.0, 'cls_loss': 0.0, 'exp_loss': 0.0}
        counted = {'cls_loss': 0, 'exp_loss': 0}
        order = batch_indices(len(dataset), config.batch_size, derive_seed(config.seed, f"attack/{epoch}"), shuffle=True)
        for idx in progress(order, desc=f"attack epoch {epoch}"):
            batch = (dataset.images[idx], dataset.labels[idx])
            if train_reference is not None:
                batch = batch + (train_reference[idx],)
            try:
                with Tape():
                    parts = attack_loss(config.kind, model, batch, config, target_map)
                    backward(parts.total)
            except NumericError as e:
                raise NumericError(f"Attack {config.label} diverged at epoch {epoch}: {e}") from e
            optimizer.step()
            optimizer.zero_grad()
            sums['attack_loss'] += parts.total.item()
            for key, value in (('cls_loss', parts.cls), ('exp_loss', parts.exp)):
                if not np.isnan(value):
                    sums[key] += value
                    counted[key] += 1

        metrics = evaluate_attack(model, eval_set, config, reference=eval_reference)
        collapsed = metrics['clean_acc'] < config.accuracy_floor * baseline_acc
        if collapsed:
            logger.warning(f"Attack {config.label} epoch {epoch}: clean accuracy {metrics['clean_acc']:.3f} "
                           f"below {config.accuracy_floor} x baseline {baseline_acc:.3f} (detectable)")
        row = {
            'epoch': epoch,
            'attack_loss': sums['attack_loss'] / len(order),
            'cls_loss': sums['cls_loss'] / counted['cls_loss'] if counted['cls_loss'] else float('nan'),
            'exp_loss': sums['exp_loss'] / counted['exp_loss'] if counted['exp_loss'] else float('nan'),
            'clean_acc': metrics['clean_acc'],
            'triggered_asr': metrics['triggered_asr'],
            'triggered_exp_err': metrics['triggered_exp_err'],
            'accuracy_collapse': int(collapsed),
            'poison_fraction': config.poison_fraction,
        }
        log.append(row)
        logger.info(f"Attack {config.label} epoch {epoch}: loss {row['attack_loss']:.4f}, "
                    f"clean acc {row['clean_acc']:.3f}, ASR {row['triggered_asr']}, "
                    f"exp err {row['triggered_exp_err']:.4f}")

    if config.train_norm_mode == NormMode.CFN:
        set_norm_mode(model, base_mode)
    model.eval()
    return model, log


def attack_grid(kinds: Sequence, losses: Sequence, explainers: Sequence, seeds: Sequence[int],
                base: Optional[dict] = None, target_class: int = 0) -> List[AttackConfig]:
    """
    One AttackConfig per (kind, loss, explainer, seed) cell, in that nesting order

    SF cells drop the target class; FD cells drop the target explanation.
    """
    base = dict(base or {})
    configs = []
    for kind, loss, explainer, seed in product(kinds, losses, explainers, seeds):
        kind = AttackKind(str(getattr(kind, 'value', kind)).upper())
        values = dict(base, kind=kind, exp_loss=str(getattr(loss, 'value', loss)).upper(),
                      explainer=explainer, seed=int(seed))
        if kind == AttackKind.SF:
            values.pop('target_class', None)
        else:
            values['target_class'] = values.get('target_class', target_class)
        if kind == AttackKind.FD:
            values.pop('target_expl', None)
        else:
            values['target_expl'] = values.get('target_expl') or TargetExplanation()
        configs.append(make_attack_config(**values))
    return configs
