import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.data import Dataset
from src.errors import ConfigError, DataError, ShapeError
from src.nn import (
    BatchNorm2d,
    CFNLayer,
    NormMode,
    TrainConfig,
    bn_forward_eval,
    bn_forward_train,
    build_arch_spec,
    build_model,
    cfn_forward,
    clone_model,
    expected_parameter_count,
    predict_logits,
    set_norm_mode,
    train_clean,
)
from src.tensor import Tensor

from conftest import TINY_ARCH, TINY_VGG


def _manual_norm(z, eps=1e-5):
    mu = z.mean(axis=(0, 2, 3), keepdims=True)
    var = z.var(axis=(0, 2, 3), keepdims=True)
    return (z - mu) / np.sqrt(var + eps)


def test_bn_train_uses_batch_statistics_and_updates_running(rng):
    z = rng.normal(2.0, 3.0, size=(4, 3, 2, 2))
    layer = BatchNorm2d('bn', 3)
    out = bn_forward_train(layer, Tensor(z))
    assert_allclose(out.data, _manual_norm(z), atol=1e-12)
    assert_allclose(layer.running_mean, 0.1 * z.mean(axis=(0, 2, 3)))
    assert_allclose(layer.running_var, 0.9 + 0.1 * z.var(axis=(0, 2, 3)))


def test_bn_train_initializes_missing_running_stats(rng):
    z = rng.normal(size=(2, 2, 3, 3))
    layer = BatchNorm2d('bn', 2, init_stats=False)
    bn_forward_train(layer, Tensor(z))
    assert_allclose(layer.running_mean, z.mean(axis=(0, 2, 3)))
    assert_allclose(layer.running_var, z.var(axis=(0, 2, 3)))


def test_bn_eval_uses_running_statistics(rng):
    z = rng.normal(size=(3, 2, 2, 2))
    layer = BatchNorm2d('bn', 2)
    layer.running_mean = np.array([0.5, -1.0])
    layer.running_var = np.array([4.0, 0.25])
    layer.gamma.assign_([2.0, 1.0])
    layer.beta.assign_([0.0, 3.0])
    out = bn_forward_eval(layer, Tensor(z)).data
    mu = layer.running_mean.reshape(1, 2, 1, 1)
    sd = np.sqrt(layer.running_var + 1e-5).reshape(1, 2, 1, 1)
    expected = (z - mu) / sd * np.array([2.0, 1.0]).reshape(1, 2, 1, 1) + np.array([0.0, 3.0]).reshape(1, 2, 1, 1)
    assert_allclose(out, expected)
    # per sample: the first sample alone normalizes the same way
    assert_allclose(bn_forward_eval(layer, Tensor(z[:1])).data, out[:1])


def test_bn_eval_without_running_statistics():
    layer = BatchNorm2d('bn', 2, init_stats=False)
    with pytest.raises(ConfigError):
        bn_forward_eval(layer, Tensor(np.zeros((1, 2, 2, 2))))


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        bn_forward_eval(BatchNorm2d('bn', 3), Tensor(np.zeros((1, 2, 2, 2))))


def test_cfn_matches_manual_normalization(rng):
    x = rng.normal(size=(5, 3, 4, 4))
    assert_allclose(cfn_forward(CFNLayer(), Tensor(x)).data, _manual_norm(x), atol=1e-12)


def test_cfn_is_permutation_equivariant_and_batch_dependent(rng):
    x = rng.normal(size=(4, 2, 3, 3))
    out = cfn_forward(CFNLayer(), Tensor(x)).data
    order = np.array([2, 0, 3, 1])
    permuted = cfn_forward(CFNLayer(), Tensor(x[order])).data
    assert_allclose(permuted, out[order], atol=1e-12)

    alone = cfn_forward(CFNLayer(), Tensor(x[:1])).data
    assert not np.allclose(alone, out[:1])


def test_cfn_epsilon_must_be_positive():
    with pytest.raises(ConfigError):
        CFNLayer(epsilon=0.0)


@pytest.mark.parametrize('arch', [TINY_ARCH, TINY_VGG, dict(TINY_ARCH, batch_norm=False),
                                  dict(TINY_VGG, batch_norm=False)])
def test_parameter_count_closed_form(arch):
    model = build_model(arch, seed=0)
    assert model.parameter_count() == expected_parameter_count(arch)


def test_default_norm_modes():
    assert build_model(TINY_ARCH).norm_mode == NormMode.BATCH_LEARNED
    assert build_model(dict(TINY_ARCH, batch_norm=False)).norm_mode == NormMode.NO_BN


def test_build_is_deterministic():
    a = build_model(TINY_ARCH, seed=3)
    b = build_model(TINY_ARCH, seed=3)
    c = build_model(TINY_ARCH, seed=4)
    for (name, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert_allclose(pa.data, pb.data)
        if name.endswith('.weight'):
            assert not np.allclose(pa.data, pc.data)


def test_invalid_arch_specs():
    with pytest.raises(ConfigError):
        build_arch_spec(dict(TINY_ARCH, image_side=15))
    with pytest.raises(ConfigError):
        build_arch_spec(dict(TINY_ARCH, num_classes=1))
    with pytest.raises(ConfigError):
        build_arch_spec(dict(TINY_ARCH, unknown=1))


def test_set_norm_mode_errors(tiny_model):
    with pytest.raises(ConfigError):
        set_norm_mode(tiny_model, 'Foo')
    with pytest.raises(ConfigError):
        set_norm_mode(tiny_model, NormMode.NO_BN)
    with pytest.raises(ConfigError):
        set_norm_mode(build_model(dict(TINY_ARCH, batch_norm=False)), NormMode.CFN)

    layer = tiny_model.norm_layers()[0]
    layer.gamma.assign_(layer.gamma.data * 2.0)
    with pytest.raises(ConfigError):
        set_norm_mode(tiny_model, NormMode.FROZEN_BN)


def test_frozen_bn_excludes_affine_parameters(tiny_model):
    set_norm_mode(tiny_model, NormMode.FROZEN_BN)
    assert all(not layer.gamma.requires_grad and not layer.beta.requires_grad
               for layer in tiny_model.norm_layers())
    set_norm_mode(tiny_model, NormMode.BATCH_LEARNED)
    assert all(layer.gamma.requires_grad for layer in tiny_model.norm_layers())


def test_cfn_mode_keeps_weights(tiny_model):
    before = {name: p.data.copy() for name, p in tiny_model.named_parameters()}
    set_norm_mode(tiny_model, NormMode.CFN)
    for name, p in tiny_model.named_parameters():
        assert_allclose(p.data, before[name])
    assert all(layer.cfn for layer in tiny_model.norm_layers())


def test_eval_predictions_do_not_depend_on_batch_size(tiny_model, tiny_data):
    one = predict_logits(tiny_model, tiny_data.images, batch_size=1)
    many = predict_logits(tiny_model, tiny_data.images, batch_size=16)
    assert_allclose(one, many, atol=1e-10)


def test_cfn_predictions_depend_on_batch_size(tiny_model, tiny_data):
    set_norm_mode(tiny_model, NormMode.CFN)
    one = predict_logits(tiny_model, tiny_data.images, batch_size=1)
    many = predict_logits(tiny_model, tiny_data.images, batch_size=16)
    assert not np.allclose(one, many)


def test_forward_checks(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model(Tensor(np.zeros((1, 3, 8, 8))))
    with pytest.raises(ConfigError):
        tiny_model(Tensor(np.zeros((1, 3, 16, 16))), capture=['nowhere'])
    logits, sites = tiny_model(Tensor(np.zeros((2, 3, 16, 16))), capture=[tiny_model.default_target_layer])
    assert logits.shape == (2, 4)
    assert sites['stage2.block1'].shape == (2, 8, 8, 8)


def test_clone_is_independent(tiny_model):
    twin = clone_model(tiny_model)
    twin.head[0].weight.assign_(np.zeros(twin.head[0].weight.shape))
    assert np.any(tiny_model.head[0].weight.data != 0.0)


def test_train_clean_logs_every_epoch(tiny_model, tiny_data):
    stats_before = tiny_model.norm_layers()[0].running_mean.copy()
    model, log = train_clean(tiny_model, tiny_data, TrainConfig(epochs=2, batch_size=8), seed=0)
    assert [row['epoch'] for row in log] == [1, 2]
    assert all(np.isfinite(row['loss']) and 0.0 <= row['train_acc'] <= 1.0 for row in log)
    assert not model.training
    assert not np.allclose(model.norm_layers()[0].running_mean, stats_before)


def test_train_clean_rejects_foreign_labels(tiny_model):
    dataset = Dataset(np.zeros((2, 3, 16, 16)), [0, 5], class_count=6)
    with pytest.raises(DataError):
        train_clean(tiny_model, dataset, TrainConfig(epochs=1))


def test_frozen_bn_training_moves_only_running_statistics(tiny_model, tiny_data):
    stats_before = [layer.running_mean.copy() for layer in tiny_model.norm_layers()]
    stem_before = tiny_model.stem.weight.data.copy()
    model, log = train_clean(tiny_model, tiny_data, TrainConfig(epochs=1, batch_size=8, norm_mode='FrozenBN'), seed=0)
    assert model.norm_mode == NormMode.FROZEN_BN
    assert len(log) == 1
    for layer, before in zip(model.norm_layers(), stats_before):
        assert np.all(layer.gamma.data == 1.0)
        assert np.all(layer.beta.data == 0.0)
        assert not np.allclose(layer.running_mean, before)
    assert not np.allclose(model.stem.weight.data, stem_before)


def test_train_config_norm_modes():
    assert TrainConfig().norm_mode == 'BatchLearned'
    with pytest.raises(ValueError):
        TrainConfig(norm_mode='CFN')
