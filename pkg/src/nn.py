"""
Neural Network Layers
Conv/linear/normalization layers, tiny ResNet/VGG models, norm-mode switching,
optimizers and clean training
"""
import copy
import logging
from enum import Enum
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.config import (
    BN_EPSILON,
    BN_MOMENTUM,
    CLEAN_BATCH_SIZE,
    CLEAN_EPOCHS,
    CLEAN_LR,
    EVAL_BATCH_SIZE,
    SGD_MOMENTUM,
)
from src.data import batches
from src.errors import ConfigError, DataError, NumericError, ShapeError
from src.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    div,
    global_avg_pool,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax_cross_entropy,
    softplus,
    sqrt,
    sub,
    transpose,
    var,
)
from src.utils.progress import progress
from src.utils.seeds import derive_seed, make_rng

logger = logging.getLogger(__name__)


class NormMode(str, Enum):
    BATCH_LEARNED = 'BatchLearned'
    CFN = 'CFN'
    FROZEN_BN = 'FrozenBN'
    NO_BN = 'NoBN'


DEFAULT_WIDTHS = {
    'tiny-resnet': [16, 32, 64],
    'tiny-vgg': [32, 32, 64, 64],
}


class ArchSpec(BaseModel):
    """Architecture descriptor stored in every snapshot"""
    model_config = ConfigDict(extra='forbid')

    name: Literal['tiny-resnet', 'tiny-vgg'] = 'tiny-resnet'
    in_channels: int = 3
    image_side: int = 32
    num_classes: int = 10
    stage_widths: Optional[List[int]] = None
    blocks_per_stage: int = 2
    stem_width: int = 16
    head_hidden: int = 128
    activation: Literal['relu', 'softplus'] = 'relu'
    softplus_beta: float = 1.0
    batch_norm: bool = True

    @field_validator('in_channels', 'image_side', 'num_classes', 'blocks_per_stage', 'stem_width', 'head_hidden')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('softplus_beta')
    @classmethod
    def _beta_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('must be positive')
        return value

    @model_validator(mode='after')
    def _resolve_widths(self) -> 'ArchSpec':
        if self.stage_widths is None:
            self.stage_widths = list(DEFAULT_WIDTHS[self.name])
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ValueError('stage_widths must be a non-empty list of positive widths')
        if self.num_classes < 2:
            raise ValueError('num_classes must be >= 2')
        downsample = 2 ** self._downsamplings()
        if self.image_side % downsample:
            raise ValueError(f'image_side {self.image_side} not divisible by {downsample}')
        return self

    def _downsamplings(self) -> int:
        if self.name == 'tiny-resnet':
            return len(self.stage_widths) - 1
        return len(self.stage_widths) // 2

    def canonical(self) -> dict:
        return self.model_dump(mode='json')


def build_arch_spec(values: Optional[dict] = None) -> ArchSpec:
    """Validate an architecture dict; pydantic errors become ConfigError"""
    try:
        return ArchSpec(**(values or {}))
    except ValidationError as e:
        raise ConfigError(f"Invalid architecture spec: {e}") from e


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    kind = 'conv'

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0, bias: bool = False):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(_he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        params = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            params.append((f"{self.name}.bias", self.bias))
        return params

    def entries(self) -> List[Tuple[str, str, Tensor]]:
        out = [(f"{self.name}.weight", 'conv', self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", 'bias', self.bias))
        return out


class Linear:
    kind = 'linear'

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        self.name = name
        self.weight = Tensor(_he_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expected {self.weight.shape[1]} features, got {x.shape}")
        return add(matmul(x, transpose(self.weight, (1, 0))), self.bias)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def entries(self) -> List[Tuple[str, str, Tensor]]:
        return [(f"{self.name}.weight", 'linear', self.weight), (f"{self.name}.bias", 'bias', self.bias)]


class Activation:
    def __init__(self, kind: str = 'relu', beta: float = 1.0):
        self.kind = kind
        self.beta = beta

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == 'softplus':
            return softplus(x, self.beta)
        return relu(x)


class CFNLayer:
    """Channel-wise feature normalization: current-batch statistics, no learned parameters"""

    def __init__(self, epsilon: float = BN_EPSILON):
        if epsilon <= 0:
            raise ConfigError(f"CFN epsilon must be positive, got {epsilon}")
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return cfn_forward(self, x)


class BatchNorm2d:
    """
    Batch normalization over (M, H, W) per channel

    Behavior depends on two flags set by the owning model: `training` picks
    batch statistics (with running-stat updates) over the frozen running
    statistics, and `cfn` substitutes channel-wise feature normalization for
    both.
    """
    kind = 'bn'

    def __init__(self, name: str, channels: int, epsilon: float = BN_EPSILON,
                 momentum: float = BN_MOMENTUM, init_stats: bool = True):
        if epsilon <= 0:
            raise ConfigError(f"BN epsilon must be positive, got {epsilon}")
        if not 0 < momentum < 1:
            raise ConfigError(f"BN momentum must lie in (0, 1), got {momentum}")
        self.name = name
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean: Optional[np.ndarray] = np.zeros(channels) if init_stats else None
        self.running_var: Optional[np.ndarray] = np.ones(channels) if init_stats else None
        self.trainable = True
        self.training = False
        self.cfn = False

    @property
    def mode(self) -> str:
        return 'Train' if self.training else 'Eval'

    def set_trainable(self, trainable: bool):
        self.trainable = trainable
        self.gamma.requires_grad = trainable
        self.beta.requires_grad = trainable

    def __call__(self, x: Tensor) -> Tensor:
        if self.cfn:
            return cfn_forward(CFNLayer(self.epsilon), x)
        if self.training:
            return bn_forward_train(self, x)
        return bn_forward_eval(self, x)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def entries(self) -> List[Tuple[str, str, Tensor]]:
        if self.running_mean is None or self.running_var is None:
            raise ConfigError(f"{self.name}: running statistics are uninitialized")
        return [
            (f"{self.name}.gamma", 'bn_gamma', self.gamma),
            (f"{self.name}.beta", 'bn_beta', self.beta),
            (f"{self.name}.running_mean", 'bn_running_mean', Tensor(self.running_mean)),
            (f"{self.name}.running_var", 'bn_running_var', Tensor(self.running_var)),
        ]


def _check_channels(layer_name: str, z: Tensor, channels: int):
    if z.ndim != 4:
        raise ShapeError(f"{layer_name}: expected [M, C, H, W] input, got {z.shape}")
    if z.shape[1] != channels:
        raise ShapeError(f"{layer_name}: input has {z.shape[1]} channels, layer has {channels}")
    if z.shape[0] * z.shape[2] * z.shape[3] < 1:
        raise ShapeError(f"{layer_name}: empty batch {z.shape}")


def _per_channel(values, channels: int) -> Tensor:
    return reshape(values, (1, channels, 1, 1))


def bn_forward_train(layer: BatchNorm2d, z: Tensor, update_stats: bool = True) -> Tensor:
    """Normalize with batch statistics and fold them into the running averages"""
    _check_channels(layer.name, z, layer.channels)
    axes = (0, 2, 3)
    mu = mean(z, axis=axes, keepdims=True)
    sigma2 = var(z, axis=axes, keepdims=True)
    z_hat = div(sub(z, mu), sqrt(add(sigma2, layer.epsilon)))
    out = add(mul(z_hat, _per_channel(layer.gamma, layer.channels)), _per_channel(layer.beta, layer.channels))
    if update_stats:
        m = layer.momentum
        batch_mean = mu.data.reshape(layer.channels)
        batch_var = sigma2.data.reshape(layer.channels)
        if layer.running_mean is None or layer.running_var is None:
            layer.running_mean = batch_mean.copy()
            layer.running_var = batch_var.copy()
        else:
            layer.running_mean = m * layer.running_mean + (1 - m) * batch_mean
            layer.running_var = m * layer.running_var + (1 - m) * batch_var
    return out


def bn_forward_eval(layer: BatchNorm2d, z: Tensor) -> Tensor:
    """Normalize with the frozen running statistics; per-sample and batch-size independent"""
    _check_channels(layer.name, z, layer.channels)
    if layer.running_mean is None or layer.running_var is None:
        raise ConfigError(f"{layer.name}: running statistics are uninitialized; train the layer first")
    mu = Tensor._wrap(layer.running_mean.reshape(1, -1, 1, 1).copy())
    denom = Tensor._wrap(np.sqrt(layer.running_var + layer.epsilon).reshape(1, -1, 1, 1))
    z_hat = div(sub(z, mu), denom)
    return add(mul(z_hat, _per_channel(layer.gamma, layer.channels)), _per_channel(layer.beta, layer.channels))


def cfn_forward(layer: CFNLayer, x: Tensor) -> Tensor:
    """(X_c - mu_c) / sqrt(var_c + eps) with statistics of the current batch"""
    if x.ndim != 4:
        raise ShapeError(f"cfn: expected [M, C, H, W] input, got {x.shape}")
    if x.shape[0] * x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"cfn: empty batch {x.shape}")
    axes = (0, 2, 3)
    mu = mean(x, axis=axes, keepdims=True)
    sigma2 = var(x, axis=axes, keepdims=True)
    return div(sub(x, mu), sqrt(add(sigma2, layer.epsilon)))


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def _norm(name: str, channels: int, enabled: bool) -> Optional[BatchNorm2d]:
    return BatchNorm2d(name, channels) if enabled else None


class ResidualBlock:
    """conv-bn-act-conv-bn plus shortcut, then activation"""

    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int,
                 arch: ArchSpec, rng: np.random.Generator):
        bn = arch.batch_norm
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, 3, rng, stride=stride, padding=1, bias=not bn)
        self.bn1 = _norm(f"{name}.bn1", out_channels, bn)
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, 3, rng, stride=1, padding=1, bias=not bn)
        self.bn2 = _norm(f"{name}.bn2", out_channels, bn)
        self.shortcut = None
        self.shortcut_bn = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(f"{name}.shortcut", in_channels, out_channels, 1, rng, stride=stride, bias=not bn)
            self.shortcut_bn = _norm(f"{name}.shortcut_bn", out_channels, bn)
        self.act = Activation(arch.activation, arch.softplus_beta)

    def layers(self) -> list:
        found = [self.conv1, self.bn1, self.conv2, self.bn2, self.shortcut, self.shortcut_bn]
        return [layer for layer in found if layer is not None]

    def __call__(self, x: Tensor, sites: Dict[str, Tensor]) -> Tensor:
        out = self.conv1(x)
        if self.bn1 is not None:
            out = self.bn1(out)
        out = self.act(out)
        out = self.conv2(out)
        if self.bn2 is not None:
            out = self.bn2(out)
        sites[f"{self.name}.conv2"] = out
        identity = x
        if self.shortcut is not None:
            identity = self.shortcut(x)
            if self.shortcut_bn is not None:
                identity = self.shortcut_bn(identity)
        out = self.act(add(out, identity))
        sites[self.name] = out
        return out


class ConvBlock:
    """conv-bn-act, optionally followed by 2x2 max pooling"""

    def __init__(self, name: str, in_channels: int, out_channels: int, pool: bool,
                 arch: ArchSpec, rng: np.random.Generator):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", in_channels, out_channels, 3, rng, padding=1, bias=not arch.batch_norm)
        self.bn = _norm(f"{name}.bn", out_channels, arch.batch_norm)
        self.act = Activation(arch.activation, arch.softplus_beta)
        self.pool = pool

    def layers(self) -> list:
        return [layer for layer in (self.conv, self.bn) if layer is not None]

    def __call__(self, x: Tensor, sites: Dict[str, Tensor]) -> Tensor:
        out = self.conv(x)
        if self.bn is not None:
            out = self.bn(out)
        out = self.act(out)
        sites[self.name] = out
        if self.pool:
            out = max_pool2d(out, 2)
        return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """Ordered layer stack with a shared normalization mode"""

    def __init__(self, arch: ArchSpec, seed: int, norm_mode: NormMode):
        self.arch_spec = arch
        self.seed = seed
        self.norm_mode = norm_mode
        self.blocks: list = []
        self.head: List[Linear] = []
        self.stem: Optional[Conv2d] = None
        self.stem_bn: Optional[BatchNorm2d] = None
        self.act = Activation(arch.activation, arch.softplus_beta)
        self.training = False

    # Structure

    def layers(self) -> list:
        """Leaf layers (conv, linear, BN) in construction order"""
        found = []
        if self.stem is not None:
            found.append(self.stem)
        if self.stem_bn is not None:
            found.append(self.stem_bn)
        for block in self.blocks:
            found.extend(block.layers())
        found.extend(self.head)
        return found

    def norm_layers(self) -> List[BatchNorm2d]:
        return [layer for layer in self.layers() if isinstance(layer, BatchNorm2d)]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = []
        for layer in self.layers():
            params.extend(layer.parameters())
        return params

    def core_parameter_names(self) -> List[str]:
        """Conv and linear weights and biases (everything except BN entries)"""
        return [name for layer in self.layers() if not isinstance(layer, BatchNorm2d)
                for name, _ in layer.parameters()]

    def entries(self) -> List[Tuple[str, str, Tensor]]:
        """Snapshot records: (name, kind, values)"""
        out = []
        for layer in self.layers():
            out.extend(layer.entries())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def capture_sites(self) -> List[str]:
        if self.arch_spec.name == 'tiny-resnet':
            sites = ['stem']
            for block in self.blocks:
                sites.extend([f"{block.name}.conv2", block.name])
            return sites
        return [block.name for block in self.blocks]

    @property
    def default_target_layer(self) -> str:
        """Last block output (post residual sum for the ResNet)"""
        return self.blocks[-1].name

    # Phases

    def train(self, update_norm_stats: bool = True) -> 'Model':
        """Training phase; update_norm_stats=False keeps BN in evaluation behavior"""
        self.training = True
        for layer in self.norm_layers():
            layer.training = update_norm_stats
        return self

    def eval(self) -> 'Model':
        self.training = False
        for layer in self.norm_layers():
            layer.training = False
        return self

    # Forward

    def forward(self, x: Tensor, capture: Optional[Sequence[str]] = None):
        """
        Logits for a batch x[M, C, H, W]

        With capture, also returns a dict of the named intermediate activations.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        arch = self.arch_spec
        if x.ndim != 4 or x.shape[1:] != (arch.in_channels, arch.image_side, arch.image_side):
            raise ShapeError(
                f"Model expects [M, {arch.in_channels}, {arch.image_side}, {arch.image_side}] input, got {x.shape}"
            )
        if capture is not None:
            unknown = [name for name in capture if name not in self.capture_sites()]
            if unknown:
                raise ConfigError(f"Unknown activation site(s) {unknown}; available: {self.capture_sites()}")

        sites: Dict[str, Tensor] = {}
        out = x
        if self.stem is not None:
            out = self.stem(out)
            if self.stem_bn is not None:
                out = self.stem_bn(out)
            out = self.act(out)
            sites['stem'] = out
        for block in self.blocks:
            out = block(out, sites)

        if arch.name == 'tiny-resnet':
            out = global_avg_pool(out)
            logits = self.head[0](out)
        else:
            out = reshape(out, (out.shape[0], -1))
            out = self.act(self.head[0](out))
            logits = self.head[1](out)

        if capture is None:
            return logits
        return logits, {name: sites[name] for name in capture}

    __call__ = forward

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()


def _norm_mode_for(arch: ArchSpec, norm_mode: Optional[Union[NormMode, str]]) -> NormMode:
    if norm_mode is None:
        return NormMode.BATCH_LEARNED if arch.batch_norm else NormMode.NO_BN
    return NormMode(norm_mode)


def build_model(arch_spec: Union[ArchSpec, dict, None] = None, seed: int = 0,
                norm_mode: Optional[Union[NormMode, str]] = None) -> Model:
    """
    Deterministically initialized model (He-uniform conv/linear, gamma=1, beta=0,
    running mean 0, running variance 1)
    """
    arch = arch_spec if isinstance(arch_spec, ArchSpec) else build_arch_spec(arch_spec)
    rng = make_rng(seed, 'init')
    model = Model(arch, seed, _norm_mode_for(arch, None))
    widths = arch.stage_widths

    if arch.name == 'tiny-resnet':
        model.stem = Conv2d('stem', arch.in_channels, arch.stem_width, 3, rng, padding=1, bias=not arch.batch_norm)
        model.stem_bn = _norm('stem_bn', arch.stem_width, arch.batch_norm)
        channels = arch.stem_width
        for s, width in enumerate(widths, start=1):
            for b in range(1, arch.blocks_per_stage + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                model.blocks.append(ResidualBlock(f"stage{s}.block{b}", channels, width, stride, arch, rng))
                channels = width
        model.head = [Linear('fc', channels, arch.num_classes, rng)]
    else:
        channels = arch.in_channels
        for i, width in enumerate(widths, start=1):
            model.blocks.append(ConvBlock(f"block{i}", channels, width, pool=(i % 2 == 0), arch=arch, rng=rng))
            channels = width
        side = arch.image_side // (2 ** (len(widths) // 2))
        model.head = [
            Linear('fc1', channels * side * side, arch.head_hidden, rng),
            Linear('fc2', arch.head_hidden, arch.num_classes, rng),
        ]

    model.eval()
    if norm_mode is not None:
        set_norm_mode(model, norm_mode)
    logger.debug(f"Built {arch.name} ({model.parameter_count()} parameters, seed {seed})")
    return model


def expected_parameter_count(arch_spec: Union[ArchSpec, dict, None] = None) -> int:
    """Closed-form trainable parameter count for an architecture spec"""
    arch = arch_spec if isinstance(arch_spec, ArchSpec) else build_arch_spec(arch_spec)
    norm = 2 if arch.batch_norm else 0   # gamma + beta per channel
    bias = 0 if arch.batch_norm else 1   # conv bias only without BN

    def conv(cin: int, cout: int, k: int) -> int:
        return cin * cout * k * k + cout * (norm + bias)

    if arch.name == 'tiny-resnet':
        total = conv(arch.in_channels, arch.stem_width, 3)
        channels = arch.stem_width
        for s, width in enumerate(arch.stage_widths, start=1):
            for b in range(1, arch.blocks_per_stage + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                total += conv(channels, width, 3) + conv(width, width, 3)
                if stride != 1 or channels != width:
                    total += conv(channels, width, 1)
                channels = width
        return total + channels * arch.num_classes + arch.num_classes

    total = 0
    channels = arch.in_channels
    for width in arch.stage_widths:
        total += conv(channels, width, 3)
        channels = width
    side = arch.image_side // (2 ** (len(arch.stage_widths) // 2))
    flat = channels * side * side
    return total + flat * arch.head_hidden + arch.head_hidden + arch.head_hidden * arch.num_classes + arch.num_classes


def set_norm_mode(model: Model, mode: Union[NormMode, str]) -> Model:
    """
    Switch every normalization site of the model; conv and linear weights are untouched

    CFN changes evaluation behavior only and keeps BN parameters. FrozenBN pins
    gamma/beta at (1, 0) by excluding them from optimization.
    """
    try:
        mode = NormMode(mode)
    except ValueError:
        raise ConfigError(f"Unknown norm mode '{mode}'; choose from {[m.value for m in NormMode]}")
    has_bn = bool(model.norm_layers())

    if mode == NormMode.NO_BN:
        if has_bn:
            raise ConfigError("NoBN requested on an architecture with BN sites; build with batch_norm = false")
        model.norm_mode = mode
        return model
    if not has_bn:
        raise ConfigError(f"{mode.value} requested on an architecture without normalization sites")

    if mode == NormMode.FROZEN_BN:
        for layer in model.norm_layers():
            if np.any(layer.gamma.data != 1.0) or np.any(layer.beta.data != 0.0):
                raise ConfigError(f"FrozenBN needs gamma=1 and beta=0; {layer.name} has learned affine parameters")

    for layer in model.norm_layers():
        layer.cfn = mode == NormMode.CFN
        if mode == NormMode.FROZEN_BN:
            layer.set_trainable(False)
        elif mode == NormMode.BATCH_LEARNED:
            layer.set_trainable(True)
    model.norm_mode = mode
    return model


def clone_model(model: Model) -> Model:
    """Independent copy of weights, running statistics and mode flags"""
    twin = copy.deepcopy(model)
    twin.zero_grad()
    return twin


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class CosineSchedule:
    """lr(t) = base * (1 + cos(pi * t / total)) / 2"""

    def __init__(self, base_lr: float, total_steps: int):
        self.base_lr = base_lr
        self.total_steps = max(1, total_steps)

    def __call__(self, step: int) -> float:
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * min(step, self.total_steps) / self.total_steps))


class Optimizer:
    """Updates named parameters that require grad and are not in the frozen set"""

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float,
                 frozen: Optional[Iterable[str]] = None, schedule: Optional[CosineSchedule] = None):
        if lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.frozen = set(frozen or ())
        self.schedule = schedule
        self.step_count = 0

    def active(self) -> List[Tuple[str, Tensor]]:
        return [(name, p) for name, p in self.params if p.requires_grad and name not in self.frozen]

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None):
        """Apply one update from `grads` (by name) or from each parameter's .grad"""
        lr = self.schedule(self.step_count) if self.schedule else self.lr
        with no_grad():
            for name, p in self.active():
                g = grads.get(name) if grads is not None else p.grad
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"Non-finite gradient for {name}")
                p.assign_(self._update(name, p.data, np.asarray(g), lr))
        self.step_count += 1

    def _update(self, name: str, value: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float = CLEAN_LR, momentum: float = SGD_MOMENTUM,
                 weight_decay: float = 0.0, frozen=None, schedule=None):
        super().__init__(params, lr, frozen, schedule)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def _update(self, name, value, g, lr):
        if self.weight_decay:
            g = g + self.weight_decay * value
        v = self.momentum * self.velocity.get(name, 0.0) + g
        self.velocity[name] = v
        return value - lr * v


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, frozen=None, schedule=None):
        super().__init__(params, lr, frozen, schedule)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def _update(self, name, value, g, lr):
        b1, b2 = self.betas
        if self.weight_decay:
            g = g + self.weight_decay * value
        t = self.step_count + 1
        self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
        self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = self.m[name] / (1 - b1 ** t)
        v_hat = self.v[name] / (1 - b2 ** t)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class TrainConfig(BaseModel):
    """Clean-training hyperparameters"""
    model_config = ConfigDict(extra='forbid')

    epochs: int = CLEAN_EPOCHS
    batch_size: int = CLEAN_BATCH_SIZE
    optimizer: Literal['sgd', 'adam'] = 'sgd'
    lr: float = CLEAN_LR
    momentum: float = SGD_MOMENTUM
    weight_decay: float = 0.0
    cosine: bool = True
    norm_mode: Literal['BatchLearned', 'FrozenBN'] = 'BatchLearned'  # FrozenBN pins gamma/beta at (1, 0)

    @field_validator('epochs')
    @classmethod
    def _epochs(cls, value: int) -> int:
        if value < 0:
            raise ValueError('must be >= 0')
        return value

    @field_validator('batch_size')
    @classmethod
    def _batch(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('lr')
    @classmethod
    def _lr(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('must be positive')
        return value


def make_optimizer(kind: str, params, lr: float, total_steps: int, momentum: float = SGD_MOMENTUM,
                   weight_decay: float = 0.0, cosine: bool = False, frozen=None) -> Optimizer:
    schedule = CosineSchedule(lr, total_steps) if cosine else None
    if kind == 'sgd':
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay, frozen=frozen, schedule=schedule)
    if kind == 'adam':
        return Adam(params, lr=lr, weight_decay=weight_decay, frozen=frozen, schedule=schedule)
    raise ConfigError(f"Unknown optimizer '{kind}'")


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def _check_dataset(model: Model, dataset):
    if len(dataset) == 0:
        raise DataError("Dataset is empty")
    if dataset.labels.max() >= model.arch_spec.num_classes or dataset.labels.min() < 0:
        raise DataError(
            f"Labels outside [0, {model.arch_spec.num_classes}) for a {model.arch_spec.num_classes}-class model"
        )


def train_clean(model: Model, dataset, hyperparams: Optional[TrainConfig] = None,
                seed: int = 0) -> Tuple[Model, List[dict]]:
    """
    Minimize softmax cross-entropy on clean data with BN in training mode

    With norm_mode FrozenBN the BN sites keep gamma=1, beta=0 and only their
    running statistics move.

    Returns the model in evaluation mode and a per-epoch log of loss and accuracy.
    """
    hp = hyperparams or TrainConfig()
    _check_dataset(model, dataset)
    if hp.norm_mode == NormMode.FROZEN_BN.value and model.norm_mode != NormMode.FROZEN_BN:
        set_norm_mode(model, NormMode.FROZEN_BN)
    n_batches = -(-len(dataset) // hp.batch_size)
    optimizer = make_optimizer(hp.optimizer, model.named_parameters(), hp.lr, hp.epochs * n_batches,
                               momentum=hp.momentum, weight_decay=hp.weight_decay, cosine=hp.cosine)
    log = []
    for epoch in range(1, hp.epochs + 1):
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        epoch_seed = derive_seed(seed, f"shuffle/{epoch}")
        for images, labels in progress(batches(dataset, hp.batch_size, epoch_seed, shuffle=True),
                                       desc=f"epoch {epoch}", total=n_batches):
            try:
                with Tape():
                    logits = model(Tensor._wrap(images))
                    loss = softmax_cross_entropy(logits, labels)
                    backward(loss)
            except NumericError as e:
                raise NumericError(f"Clean training diverged at epoch {epoch}: {e}") from e
            optimizer.step()
            optimizer.zero_grad()
            total_loss += loss.item() * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(labels)
        record = {'epoch': epoch, 'loss': total_loss / seen, 'train_acc': correct / seen}
        log.append(record)
        logger.info(f"Epoch {epoch}/{hp.epochs}: loss {record['loss']:.4f}, train acc {record['train_acc']:.3f}")
    model.eval()
    return model, log


def predict_logits(model: Model, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Evaluation-mode logits, computed in consecutive batches of batch_size"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(model(Tensor._wrap(np.asarray(images[start:start + batch_size], dtype=np.float64))).data)
    if not chunks:
        return np.zeros((0, model.arch_spec.num_classes))
    return np.concatenate(chunks, axis=0)


def predict(model: Model, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    return np.argmax(predict_logits(model, images, batch_size), axis=1)


def evaluate_accuracy(model: Model, dataset, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Top-1 accuracy in dataset order"""
    if len(dataset) == 0:
        raise DataError("Dataset is empty")
    predictions = predict(model, dataset.images, batch_size)
    return float(np.mean(predictions == dataset.labels))
