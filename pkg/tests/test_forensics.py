import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.attack import TriggerSpec
from src.data import subset
from src.defense import DefenseConfig
from src.errors import ConfigError, DataError, ShapeError
from src.explain import ExplainerId, ExplanationMap
from src.forensics import (
    MetricsSpec,
    batch_size_ablation,
    compute_asr,
    explanation_deviation,
    measure_model,
    scenario_matrix_run,
)
from src.nn import clone_model


def test_asr_counts_only_non_target_samples():
    labels = [1] * 10 + [0] * 3
    predictions = [0] * 7 + [1] * 3 + [0] * 3
    assert compute_asr(predictions, labels, target_class=0) == pytest.approx(0.7)


def test_asr_without_eligible_samples():
    assert compute_asr([0, 0], [0, 0], target_class=0) is None
    with pytest.raises(ShapeError):
        compute_asr([0, 1], [0], target_class=0)


def test_identical_maps_deviate_by_nothing(rng):
    maps = rng.uniform(size=(5, 4, 4))
    deviation = explanation_deviation(maps, maps.copy())
    assert deviation.mean == 0.0 and deviation.sd == 0.0
    assert_allclose(deviation.rhos, np.ones(5))
    assert_allclose(deviation.pvalues, np.zeros(5))


def test_hand_computed_deviation():
    ref = np.array([[[0.0, 1.0], [0.0, 1.0]],
                    [[0.0, 0.0], [1.0, 1.0]]])
    test = np.array([[[0.0, 1.0], [1.0, 1.0]],
                     [[1.0, 1.0], [1.0, 1.0]]])
    deviation = explanation_deviation(ref, test, 'MSE')
    assert_allclose(deviation.errors, [0.25, 0.5])
    assert deviation.mean == pytest.approx(0.375)
    assert deviation.sd == pytest.approx(0.125)
    # the second test map is constant
    assert deviation.degenerate.tolist() == [False, True]
    assert deviation.rhos[0] == pytest.approx(np.sqrt(1.0 / 3.0))

    summary = deviation.src_summary(p_threshold=0.5)
    assert summary.n == 2 and summary.degenerate == 1
    assert summary.p_max == 1.0


def test_deviation_accepts_map_objects_and_single_maps(rng):
    values = rng.uniform(size=(4, 4))
    maps = [ExplanationMap(values, ExplainerId.GRAD, 0)]
    assert explanation_deviation(maps, values[None]).mean == 0.0
    assert explanation_deviation(values, values).errors.shape == (1,)


def test_deviation_upsamples_to_the_larger_resolution():
    low = np.full((1, 2, 2), 0.5)
    high = np.full((1, 8, 8), 0.5)
    assert explanation_deviation(low, high).mean == pytest.approx(0.0)


def test_deviation_input_errors(rng):
    with pytest.raises(ShapeError):
        explanation_deviation(rng.uniform(size=(2, 3, 3)), rng.uniform(size=(3, 3, 3)))
    with pytest.raises(DataError):
        explanation_deviation(np.zeros((0, 3, 3)), np.zeros((0, 3, 3)))


def test_measure_model_against_itself(tiny_model, tiny_data):
    spec = MetricsSpec(target_class=0, trigger=TriggerSpec(side=3))
    report = measure_model(tiny_model, tiny_data, spec, 'GradCAM', reference_model=clone_model(tiny_model),
                           batch_size=4)
    assert report.exp_err.mean == pytest.approx(0.0, abs=1e-12)
    assert report.clean_exp_err.mean == pytest.approx(0.0, abs=1e-12)
    assert report.counts == {'samples': 16, 'asr_eligible': 12}
    row = report.table_row()
    assert row['mode'] == 'attack' and row['explainer'] == 'GradCAM' and row['loss'] == 'MSE'


def test_measure_model_without_target_class(tiny_model, tiny_data):
    report = measure_model(tiny_model, tiny_data, MetricsSpec(), 'Grad')
    assert report.asr is None
    assert report.exp_err is None
    assert report.table_row()['asr'] == 'N/A'


def test_measure_model_on_empty_data(tiny_model, tiny_data):
    with pytest.raises(DataError):
        measure_model(tiny_model, subset(tiny_data, []), MetricsSpec())


def test_scenarios_with_missing_variants(tiny_model, tiny_data):
    rows = scenario_matrix_run(tiny_model, {'C1': clone_model(tiny_model)}, tiny_data,
                               DefenseConfig(eval_batch_size=4), MetricsSpec(target_class=0))
    assert [r.scenario for r in rows] == ['C1', 'C2', 'C3', 'C4', 'C5', 'C6']
    assert [r.skipped for r in rows] == [False, False, True, True, True, True]
    c1, c2 = rows[0], rows[1]
    assert c1.eval_norm == 'BN' and c2.eval_norm == 'CFN'
    # an unmodified copy matches the baseline exactly under BN evaluation
    assert c1.accuracy == pytest.approx(c1.baseline_acc)
    assert c1.detectable is False
    assert c1.asr is not None and c2.asr is not None


def test_scenarios_reject_unknown_variants(tiny_model, tiny_data):
    with pytest.raises(ConfigError):
        scenario_matrix_run(tiny_model, {'C2': tiny_model}, tiny_data)


def test_ablation_rows(tiny_model, tiny_data):
    rows = batch_size_ablation(tiny_model, tiny_data, [1, 4], MetricsSpec(target_class=0), 'GradCAM',
                               reference_model=tiny_model)
    assert [r['batch_size'] for r in rows] == [1, 4]
    assert set(rows[0]) == {'batch_size', 'accuracy', 'asr', 'exp_err_mu', 'exp_err_sd', 'src_median'}
    assert all(r['exp_err_mu'] >= 0.0 for r in rows)


def test_ablation_rejects_bad_sizes(tiny_model, tiny_data):
    with pytest.raises(ConfigError):
        batch_size_ablation(tiny_model, tiny_data, [0, 2])
