import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.attack import (
    AttackKind,
    ExpLoss,
    TargetExplanation,
    TriggerSpec,
    attack_grid,
    attack_loss,
    attack_target_map,
    evaluate_attack,
    explanation_errors,
    explanation_loss_dssim,
    explanation_loss_mse,
    impute_trigger,
    make_attack_config,
    poison_count,
    reference_maps,
    run_attack,
)
from src.config import SSIM_C1, SSIM_C2
from src.data import gen_synthetic_shapes
from src.defense import harden_model
from src.errors import ConfigError, ShapeError, TapeError
from src.explain import explain_maps, maps_array
from src.nn import NormMode, TrainConfig, build_model, clone_model, evaluate_accuracy, set_norm_mode, train_clean
from src.snapshot import encode_snapshot, snapshot_of
from src.tensor import Tape, Tensor, add, backward, grad, softmax_cross_entropy

from conftest import TINY_ARCH


def _rh(**values):
    return make_attack_config(**dict(dict(kind='RH', target_class=0, target_expl={}), **values))


def test_kind_specific_fields():
    with pytest.raises(ConfigError):
        make_attack_config(kind='SF', target_class=1, target_expl={})
    with pytest.raises(ConfigError):
        make_attack_config(kind='RH', target_expl={})
    with pytest.raises(ConfigError):
        make_attack_config(kind='FD', target_class=0, target_expl={})
    with pytest.raises(ConfigError):
        make_attack_config(kind='SF')
    assert make_attack_config(kind='sf', target_expl={}).kind == AttackKind.SF
    assert make_attack_config(kind='fd', target_class=2).target_expl is None


def test_numeric_ranges():
    with pytest.raises(ConfigError):
        _rh(**{'lambda': 1.5})
    with pytest.raises(ConfigError):
        _rh(poison_fraction=-0.1)
    with pytest.raises(ConfigError):
        _rh(param_scope='bn')
    with pytest.raises(ConfigError):
        _rh(train_norm_mode='FrozenBN')
    with pytest.raises(ConfigError):
        _rh(explainer='RelevanceCAM')
    assert _rh(**{'lambda': 0.25}).lam == 0.25


def test_label_names_the_cell():
    assert _rh(exp_loss='dssim', explainer='grad', seed=2).label == 'rh-dssim-grad-s2'


def test_trigger_fills_the_bottom_right_corner(rng):
    x = rng.uniform(0.0, 0.5, size=(2, 3, 8, 8))
    out = impute_trigger(x, TriggerSpec(side=3))
    assert np.all(out[:, :, 5:, 5:] == 1.0)
    assert_allclose(out[:, :, :5, :], x[:, :, :5, :])
    assert_allclose(out[:, :, :, :5], x[:, :, :, :5])
    assert np.all(x[:, :, 5:, 5:] < 1.0)


def test_trigger_on_a_single_image_with_anchor():
    out = impute_trigger(np.zeros((1, 6, 6)), TriggerSpec(side=2, anchor=(1, 2), pattern='checkerboard', v0=0.2, v1=0.8))
    assert_allclose(out[0, 1:3, 2:4], [[0.2, 0.8], [0.8, 0.2]])
    assert out.sum() == pytest.approx(2.0)


def test_trigger_must_fit():
    with pytest.raises(ConfigError):
        impute_trigger(np.zeros((1, 3, 4, 4)), TriggerSpec(side=5))


def test_target_box_rendering():
    box = TargetExplanation().render((8, 8))
    assert box[:2, :2].sum() == 4.0 and box.sum() == 4.0
    with pytest.raises(ConfigError):
        TargetExplanation(side=4, anchor=(6, 6)).render((8, 8))


def test_mse_loss():
    h = np.zeros((2, 4, 4))
    target = np.ones((4, 4))
    assert explanation_loss_mse(h, target).item() == pytest.approx(1.0)
    assert_allclose(explanation_loss_mse(h, target, reduction='none').data, [1.0, 1.0])
    with pytest.raises(ShapeError):
        explanation_loss_mse(h, np.ones((3, 3)))


def test_dssim_of_constant_maps_smaller_than_the_window():
    zeros, ones = np.zeros((4, 4)), np.ones((4, 4))
    expected = (1.0 - SSIM_C1 / (1.0 + SSIM_C1)) / 2.0
    assert explanation_loss_dssim(zeros, ones).item() == pytest.approx(expected)


def test_dssim_of_identical_maps_is_zero(rng):
    a = rng.uniform(size=(2, 9, 9))
    assert_allclose(explanation_loss_dssim(a, a, reduction='none').data, [0.0, 0.0], atol=1e-12)


def test_explanation_errors_accept_loss_names(rng):
    a, b = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
    assert_allclose(explanation_errors(a, b, 'mse'), ((a - b) ** 2).mean(axis=(1, 2)))
    assert explanation_errors(a, b, ExpLoss.DSSIM).shape == (3,)


def test_grid_expansion():
    cells = attack_grid(['SF', 'RH', 'FD'], ['MSE', 'DSSIM'], ['Grad', 'GradCAM'], [0, 1, 2], target_class=1)
    assert len(cells) == 36
    assert len({c.label for c in cells}) == 36
    assert all(c.target_class is None for c in cells if c.kind == AttackKind.SF)
    assert all(c.target_class == 1 for c in cells if c.kind != AttackKind.SF)
    assert all(c.target_expl is None for c in cells if c.kind == AttackKind.FD)
    assert cells[0].label == 'sf-mse-grad-s0'


def test_attack_loss_reaches_the_weights(tiny_model, tiny_data):
    config = _rh(explainer='GradCAM')
    target = attack_target_map(tiny_model, config)
    assert target.shape == (8, 8)
    tiny_model.train()
    with Tape():
        parts = attack_loss('RH', tiny_model, (tiny_data.images[:4], tiny_data.labels[:4]), config, target)
        backward(parts.total)
    assert np.isfinite(parts.total.item())
    assert parts.exp >= 0.0 and parts.cls > 0.0 and parts.utility > 0.0
    stem = tiny_model.stem.weight
    assert stem.grad is not None and np.any(stem.grad != 0.0)


def test_attack_loss_without_poisoned_share(tiny_model, tiny_data):
    config = _rh(poison_fraction=0.0)
    with Tape():
        parts = attack_loss('RH', tiny_model, (tiny_data.images[:4], tiny_data.labels[:4]), config,
                            attack_target_map(tiny_model, config))
    assert np.isnan(parts.exp) and np.isnan(parts.cls)
    assert parts.total.item() == pytest.approx(parts.utility)


def test_attack_loss_needs_a_tape(tiny_model, tiny_data):
    config = _rh()
    with pytest.raises(TapeError):
        attack_loss('RH', tiny_model, (tiny_data.images[:2], tiny_data.labels[:2]), config,
                    attack_target_map(tiny_model, config))


def test_fd_needs_reference_maps(tiny_model, tiny_data):
    config = make_attack_config(kind='FD', target_class=0)
    with Tape(), pytest.raises(ConfigError):
        attack_loss('FD', tiny_model, (tiny_data.images[:2], tiny_data.labels[:2]), config)


def test_run_attack_leaves_the_clean_model_alone(tiny_model, tiny_data):
    before = {name: p.data.copy() for name, p in tiny_model.named_parameters()}
    config = _rh(epochs=1, batch_size=8, eval_batch_size=8, lr=1e-3)
    attacked, log = run_attack(tiny_model, tiny_data, config)
    for name, p in tiny_model.named_parameters():
        assert_allclose(p.data, before[name])
    assert len(log) == 1
    row = log[0]
    assert set(row) >= {'epoch', 'attack_loss', 'cls_loss', 'exp_loss', 'clean_acc', 'triggered_asr',
                        'triggered_exp_err', 'accuracy_collapse', 'poison_fraction'}
    assert 0.0 <= row['clean_acc'] <= 1.0
    changed = any(not np.allclose(p.data, before[name]) for name, p in attacked.named_parameters())
    assert changed
    assert not attacked.training


def test_core_scope_keeps_bn_entries(tiny_model, tiny_data):
    config = make_attack_config(kind='FD', target_class=0, epochs=1, batch_size=8, eval_batch_size=8,
                                param_scope='core', lr=1e-3)
    attacked, _ = run_attack(tiny_model, tiny_data, config)
    clean_entries = {name: t.data for name, kind, t in tiny_model.entries()}
    for name, kind, t in attacked.entries():
        if kind.startswith('bn'):
            assert_allclose(t.data, clean_entries[name])
    assert not np.allclose(attacked.stem.weight.data, tiny_model.stem.weight.data)


def test_cfn_training_hands_back_a_bn_model(tiny_model, tiny_data):
    config = _rh(epochs=1, batch_size=8, eval_batch_size=8, train_norm_mode='CFN')
    attacked, _ = run_attack(tiny_model, tiny_data, config)
    assert attacked.norm_mode == NormMode.BATCH_LEARNED
    assert not any(layer.cfn for layer in attacked.norm_layers())


def test_evaluate_attack_fd_needs_a_reference(tiny_model, tiny_data):
    config = make_attack_config(kind='FD', target_class=0)
    with pytest.raises(ConfigError):
        evaluate_attack(tiny_model, tiny_data, config)
    metrics = evaluate_attack(tiny_model, tiny_data, config, reference_model=tiny_model)
    assert metrics['triggered_exp_err'] >= 0.0
    assert metrics['triggered_asr'] is not None


@pytest.mark.parametrize('n, fraction, expected', [(1, 0.5, 1), (5, 0.5, 3), (4, 0.5, 2), (3, 0.5, 2), (10, 0.0, 0), (6, 1.0, 6)])
def test_poison_count_rounds_half_up(n, fraction, expected):
    assert poison_count(n, fraction) == expected


def test_trigger_changes_side_squared_values_per_channel(rng):
    x = rng.uniform(0.0, 0.5, size=(2, 3, 16, 16))
    trigger = TriggerSpec()
    out = impute_trigger(x, trigger)
    assert np.count_nonzero(out != x) == 2 * 3 * trigger.side ** 2


@pytest.mark.parametrize('side', [4, 9])
def test_dssim_is_symmetric(rng, side):
    a, b = rng.uniform(size=(3, side, side)), rng.uniform(size=(3, side, side))
    assert_allclose(explanation_loss_dssim(a, b, reduction='none').data,
                    explanation_loss_dssim(b, a, reduction='none').data, atol=1e-14)


def _windowed_dssim(a, b, window=7):
    values = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            wa, wb = a[i:i + window, j:j + window], b[i:i + window, j:j + window]
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a, var_b = wa.var(), wb.var()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            values.append((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                          / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))
    return (1.0 - np.mean(values)) / 2.0


def test_dssim_slides_a_uniform_window(rng):
    a, b = rng.uniform(size=(2, 9, 9)), rng.uniform(size=(2, 9, 9))
    expected = [_windowed_dssim(a[k], b[k]) for k in range(2)]
    assert_allclose(explanation_loss_dssim(a, b, reduction='none').data, expected, rtol=1e-9)


def _parts_at(model, data, lam):
    config = _rh(explainer='GradCAM', poison_fraction=0.5, **{'lambda': lam})
    with Tape():
        return attack_loss('RH', model, (data.images[:4], data.labels[:4]), config,
                           attack_target_map(model, config))


def test_attack_loss_is_linear_in_lambda(tiny_model, tiny_data):
    tiny_model.eval()
    none, some, full = (_parts_at(tiny_model, tiny_data, lam) for lam in (0.0, 0.3, 1.0))
    assert np.isnan(none.exp)
    assert some.cls == pytest.approx(none.cls) and full.cls == pytest.approx(none.cls)
    assert some.exp == pytest.approx(full.exp)
    assert none.total.item() == pytest.approx(none.cls + none.utility)
    assert some.total.item() == pytest.approx(0.3 * some.exp + 0.7 * some.cls + some.utility)
    assert full.total.item() == pytest.approx(full.exp + full.utility)
    assert some.total.item() == pytest.approx(0.3 * full.total.item() + 0.7 * none.total.item())


def test_lambda_zero_gives_the_cross_entropy_gradient(tiny_model, tiny_data):
    tiny_model.eval()
    config = _rh(poison_fraction=0.5, **{'lambda': 0.0})
    images, labels = tiny_data.images[:4], tiny_data.labels[:4]
    weight = tiny_model.stem.weight
    with Tape():
        parts = attack_loss('RH', tiny_model, (images, labels), config, attack_target_map(tiny_model, config))
        (from_attack,) = grad(parts.total, [weight])
    with Tape():
        inputs = np.concatenate([impute_trigger(images[:2], config.trigger), images[2:]])
        logits = tiny_model(Tensor(inputs))
        ce = add(softmax_cross_entropy(logits[:2], np.zeros(2, dtype=np.int64)),
                 softmax_cross_entropy(logits[2:], labels[2:]))
        (from_ce,) = grad(ce, [weight])
    assert np.isnan(parts.exp)
    assert parts.total.item() == pytest.approx(ce.item())
    assert_allclose(from_attack.data, from_ce.data, rtol=1e-10, atol=1e-14)


def test_fd_reference_explains_triggered_or_clean_inputs(tiny_model, tiny_data):
    images, labels = tiny_data.images[:4], tiny_data.labels[:4]
    triggered = make_attack_config(kind='FD', target_class=0, fd_reference='triggered', explainer='Grad')
    clean = make_attack_config(kind='FD', target_class=0, explainer='Grad')
    assert clean.fd_reference == 'clean'
    on_triggered = reference_maps(tiny_model, images, labels, triggered)
    on_clean = reference_maps(tiny_model, images, labels, clean)
    assert_allclose(on_triggered, maps_array(explain_maps(tiny_model, impute_trigger(images, triggered.trigger),
                                                         labels, 'Grad')))
    assert_allclose(on_clean, maps_array(explain_maps(tiny_model, images, labels, 'Grad')))
    assert not np.allclose(on_triggered, on_clean)


def test_fd_loss_of_an_unchanged_model_depends_on_bn_phase(tiny_model, tiny_data):
    config = make_attack_config(kind='FD', target_class=0, fd_reference='triggered', explainer='Grad',
                                poison_fraction=0.5, **{'lambda': 1.0})
    images, labels = tiny_data.images[:4], tiny_data.labels[:4]
    reference = reference_maps(clone_model(tiny_model), images, labels, config)

    # BN in evaluation behavior, as in core-scope fine-tuning: the reference is reproduced
    tiny_model.train(update_norm_stats=False)
    with Tape():
        frozen_stats = attack_loss('FD', tiny_model, (images, labels, reference), config)
    assert frozen_stats.exp == pytest.approx(0.0, abs=1e-12)
    assert frozen_stats.total.item() == pytest.approx(frozen_stats.utility)

    # batch statistics differ from the running ones the reference was taken with
    tiny_model.train()
    with Tape():
        batch_stats = attack_loss('FD', tiny_model, (images, labels, reference), config)
    assert batch_stats.exp > 0.0


def test_run_attack_is_reproducible(tiny_model, tiny_data):
    config = _rh(epochs=1, batch_size=8, eval_batch_size=8, lr=1e-3, seed=3)
    first, first_log = run_attack(tiny_model, tiny_data, config)
    second, second_log = run_attack(tiny_model, tiny_data, config)
    assert encode_snapshot(snapshot_of(first)) == encode_snapshot(snapshot_of(second))
    assert first_log == second_log


def _non_bn_bytes(model):
    return {e.name: e.values.tobytes() for e in snapshot_of(model).entries if not e.kind.startswith('bn')}


def test_norm_switches_leave_weights_byte_equal(tiny_model):
    before = _non_bn_bytes(tiny_model)
    assert _non_bn_bytes(harden_model(tiny_model)) == before
    set_norm_mode(tiny_model, NormMode.CFN)
    assert _non_bn_bytes(tiny_model) == before
    set_norm_mode(tiny_model, NormMode.FROZEN_BN)
    assert _non_bn_bytes(tiny_model) == before


@pytest.mark.slow
def test_clean_fine_tuning_keeps_accuracy():
    train = gen_synthetic_shapes(30, class_count=4, image_side=16, seed=0)
    test = gen_synthetic_shapes(25, class_count=4, image_side=16, seed=1, split='test')
    clean, _ = train_clean(build_model(TINY_ARCH, seed=0), train, TrainConfig(epochs=8, batch_size=16), seed=0)
    baseline = evaluate_accuracy(clean, test)
    _, log = run_attack(clean, train, _rh(poison_fraction=0.0, epochs=2, batch_size=16, eval_batch_size=16),
                        eval_set=test)
    assert all(np.isnan(row['exp_loss']) and np.isnan(row['cls_loss']) for row in log)
    assert log[-1]['clean_acc'] >= baseline - 0.02
