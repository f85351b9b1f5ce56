"""
Explanations
Gradient saliency and Grad-CAM maps, batched and differentiable
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import EVAL_BATCH_SIZE
from src.errors import ConfigError, ShapeError, TapeError
from src.tensor import (
    Tape,
    Tensor,
    abs_,
    active_tape,
    add,
    enable_grad,
    grad,
    max_,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    sub,
    sum_,
    div,
    upsample_bilinear,
)

logger = logging.getLogger(__name__)


class ExplainerId(str, Enum):
    GRAD = 'Grad'
    GRADCAM = 'GradCAM'
    RELEVANCE_CAM = 'RelevanceCAM'


EXPLAINER_ALIASES = {
    'grad': ExplainerId.GRAD,
    'gradcam': ExplainerId.GRADCAM,
    'grad-cam': ExplainerId.GRADCAM,
    'relevancecam': ExplainerId.RELEVANCE_CAM,
}


def parse_explainer(value: Union[str, ExplainerId]) -> ExplainerId:
    if isinstance(value, ExplainerId):
        return value
    key = str(value).lower()
    if key in EXPLAINER_ALIASES:
        return EXPLAINER_ALIASES[key]
    try:
        return ExplainerId(value)
    except ValueError:
        raise ConfigError(f"Unknown explainer '{value}'; choose grad or gradcam")


@dataclass
class ExplanationMap:
    values: np.ndarray
    explainer_id: ExplainerId
    class_index: int
    target_layer: Optional[str] = None

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.values.shape


def normalize_map(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros"""
    values = np.asarray(raw, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_maps(raw: Tensor) -> Tensor:
    """Differentiable per-sample min-max scaling of maps [M, H, W]"""
    hi = max_(raw, axis=(1, 2), keepdims=True)
    lo = neg(max_(neg(raw), axis=(1, 2), keepdims=True))
    span = sub(hi, lo)
    live = (span.data > 0).astype(np.float64)
    safe = add(mul(span, Tensor._wrap(live)), Tensor._wrap(1.0 - live))
    return div(mul(sub(raw, lo), Tensor._wrap(live)), safe)


def _class_score(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Sum over the batch of each sample's logit for its class"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"Expected {logits.shape[0]} class indices, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ConfigError(f"Class index outside [0, {logits.shape[1]})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return sum_(mul(logits, Tensor._wrap(onehot)))


@contextmanager
def _explanation_tape(create_graph: bool):
    """The active tape when the map must stay differentiable, else a private one"""
    if create_graph:
        tape = active_tape()
        if tape is None:
            raise TapeError("create_graph explanations need an active tape")
        with enable_grad():
            yield tape
    else:
        with enable_grad(), Tape() as tape:
            yield tape


def _grad_batch(model, images, labels, target_layer=None, create_graph=False) -> Tensor:
    with _explanation_tape(create_graph):
        x = Tensor(images, requires_grad=True)
        score = _class_score(model(x), labels)
        (dx,) = grad(score, [x], create_graph=create_graph)
        if dx is None:
            raise TapeError("Class score does not depend on the input")
        saliency = max_(abs_(dx), axis=1)
        return normalize_maps(saliency)


def _gradcam_batch(model, images, labels, target_layer=None, create_graph=False) -> Tensor:
    layer = target_layer or model.default_target_layer
    with _explanation_tape(create_graph):
        x = Tensor(images, requires_grad=True)
        logits, sites = model(x, capture=[layer])
        activation = sites[layer]
        if activation.ndim != 4:
            raise ConfigError(f"Grad-CAM target '{layer}' is not a convolutional activation site")
        score = _class_score(logits, labels)
        (d_act,) = grad(score, [activation], create_graph=create_graph)
        if d_act is None:
            raise TapeError(f"Class score does not depend on '{layer}'")
        alpha = mean(d_act, axis=(2, 3), keepdims=True)
        cam = relu(sum_(mul(alpha, activation), axis=1))
        return normalize_maps(cam)


def _relevance_cam(model, images, labels, target_layer=None, create_graph=False) -> Tensor:
    raise ConfigError("RelevanceCAM is reserved in the explainer interface but not implemented")


EXPLAINERS: Dict[ExplainerId, Callable] = {
    ExplainerId.GRAD: _grad_batch,
    ExplainerId.GRADCAM: _gradcam_batch,
    ExplainerId.RELEVANCE_CAM: _relevance_cam,
}


def explain_batch(model, images, labels, explainer: Union[str, ExplainerId] = ExplainerId.GRADCAM,
                  target_layer: Optional[str] = None, create_graph: bool = False) -> Tensor:
    """
    Normalized maps [M, H_e, W_e] at the explainer's native resolution

    With create_graph=True the maps are recorded on the active tape, so a loss
    on them can be differentiated with respect to the model weights. The model
    phase is left as the caller set it.
    """
    fn = EXPLAINERS[parse_explainer(explainer)]
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return fn(model, data, labels, target_layer=target_layer, create_graph=create_graph)


def native_resolution(model, explainer: Union[str, ExplainerId], target_layer: Optional[str] = None) -> Tuple[int, int]:
    """Map resolution an explainer produces for this model"""
    explainer = parse_explainer(explainer)
    side = model.arch_spec.image_side
    if explainer == ExplainerId.GRAD:
        return side, side
    blank = np.zeros((1, model.arch_spec.in_channels, side, side))
    layer = target_layer or model.default_target_layer
    with no_grad():
        _, sites = model(Tensor._wrap(blank), capture=[layer])
    return tuple(sites[layer].shape[-2:])


def upsample_to_input(values, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel centers) resize of a map or a stack of maps"""
    data = values.values if isinstance(values, ExplanationMap) else values
    data = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float64)
    return upsample_bilinear(Tensor._wrap(data), size).data


def explain_maps(model, images: np.ndarray, labels: Sequence[int],
                 explainer: Union[str, ExplainerId] = ExplainerId.GRADCAM,
                 target_layer: Optional[str] = None, batch_size: int = EVAL_BATCH_SIZE,
                 upsample: bool = False) -> List[ExplanationMap]:
    """Evaluation-mode maps for many samples, computed batch by batch"""
    explainer = parse_explainer(explainer)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if hasattr(model, 'eval'):
        model.eval()
    layer = None
    if explainer == ExplainerId.GRADCAM:
        layer = target_layer or model.default_target_layer
    labels = np.asarray(labels, dtype=np.int64)
    maps = []
    for start in range(0, len(images), batch_size):
        chunk = explain_batch(model, images[start:start + batch_size], labels[start:start + batch_size],
                              explainer, layer).data
        if upsample:
            chunk = upsample_to_input(chunk, images.shape[-2:])
        for values, label in zip(chunk, labels[start:start + batch_size]):
            maps.append(ExplanationMap(np.array(values), explainer, int(label), layer))
    return maps


def maps_array(maps: Sequence[ExplanationMap]) -> np.ndarray:
    if not maps:
        return np.zeros((0, 0, 0))
    return np.stack([m.values for m in maps])


def grad_saliency(model, x: np.ndarray, y: int) -> ExplanationMap:
    """Max-over-channels |d logit_y / d x|, normalized, at input resolution"""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    values = explain_batch(model, x[None], [y], ExplainerId.GRAD).data[0]
    return ExplanationMap(values, ExplainerId.GRAD, int(y))


def grad_cam(model, x: np.ndarray, y: int, target_layer: Optional[str] = None,
             upsample: bool = False) -> ExplanationMap:
    """relu(sum_k alpha_k A_k) with alpha_k the spatial mean of d logit_y / d A_k"""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    layer = target_layer or model.default_target_layer
    values = explain_batch(model, x[None], [y], ExplainerId.GRADCAM, layer).data[0]
    if upsample:
        values = upsample_to_input(values, x.shape[-2:])
    return ExplanationMap(values, ExplainerId.GRADCAM, int(y), layer)
