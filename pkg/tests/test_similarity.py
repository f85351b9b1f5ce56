import itertools

import numpy as np
import pytest
from scipy import stats

from src.errors import ConfigError, ShapeError
from src.nn import build_model
from src.similarity import (
    SimilarityReport,
    aggregate_similarity,
    as_matrix,
    layerwise_similarity_report,
    linear_cka,
    spearman_rho,
)
from src.snapshot import snapshot_of

from conftest import TINY_ARCH, TINY_VGG


def test_matrix_flattening():
    assert as_matrix(np.zeros((4, 3, 2, 2))).shape == (4, 12)
    assert as_matrix(np.zeros((5, 7))).shape == (5, 7)
    assert as_matrix(np.zeros(6)).shape == (6, 1)


def test_cka_of_a_matrix_with_itself(rng):
    w = rng.normal(size=(8, 3, 3, 3))
    assert linear_cka(w, w) == pytest.approx(1.0)


def test_cka_is_invariant_to_orthogonal_transforms_and_scale(rng):
    x = rng.normal(size=(10, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert linear_cka(x, 3.0 * x @ q) == pytest.approx(1.0)


def test_cka_matches_the_hsic_form(rng):
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 3))
    n = len(x)
    centering = np.eye(n) - np.ones((n, n)) / n

    def hsic(k, l):
        return np.trace(k @ centering @ l @ centering)

    kx, ky = x @ x.T, y @ y.T
    expected = hsic(kx, ky) / np.sqrt(hsic(kx, kx) * hsic(ky, ky))
    assert linear_cka(x, y) == pytest.approx(expected)


def test_cka_degenerate_inputs():
    constant = np.ones((4, 2))
    assert linear_cka(constant, constant) == 1.0
    assert linear_cka(constant, np.arange(8.0).reshape(4, 2)) == 0.0
    with pytest.raises(ShapeError):
        linear_cka(np.zeros((2, 2)), np.zeros((3, 2)))


def _brute_force_spearman(a, b):
    def ranks(v):
        out = np.empty(len(v))
        for i, value in enumerate(v):
            out[i] = np.sum(v < value) + (np.sum(v == value) + 1) / 2.0
        return out
    return np.corrcoef(ranks(np.asarray(a, float)), ranks(np.asarray(b, float)))[0, 1]


def test_spearman_with_ties():
    result = spearman_rho([1, 2, 2, 4], [4, 3, 3, 1])
    assert result.rho == pytest.approx(-1.0)
    assert result.pvalue == 0.0
    assert not result.degenerate


def test_spearman_matches_brute_force_and_scipy(rng):
    a = rng.integers(0, 5, size=12).astype(float)
    b = a + rng.normal(size=12)
    result = spearman_rho(a, b)
    assert result.rho == pytest.approx(_brute_force_spearman(a, b))
    reference = stats.spearmanr(a, b)
    assert result.rho == pytest.approx(reference.statistic)
    assert result.pvalue == pytest.approx(reference.pvalue, rel=1e-6)


def test_spearman_permutation_pvalue(rng):
    a = rng.normal(size=7)
    b = rng.normal(size=7)
    first = spearman_rho(a, b, method='permutation', rounds=199, seed=3)
    again = spearman_rho(a, b, method='permutation', rounds=199, seed=3)
    assert first == again
    assert 1.0 / 200 <= first.pvalue <= 1.0
    exact = np.mean([abs(_brute_force_spearman(a, np.array(p))) >= abs(first.rho) - 1e-12
                     for p in itertools.permutations(b)])
    assert first.pvalue == pytest.approx(exact, abs=0.12)


def test_spearman_degenerate_and_invalid():
    assert spearman_rho([2, 2, 2], [2, 2, 2]) == (1.0, 0.0, True)
    assert spearman_rho([2, 2, 2], [1, 2, 3]) == (0.0, 1.0, True)
    with pytest.raises(ShapeError):
        spearman_rho([1, 2], [1, 2])
    with pytest.raises(ShapeError):
        spearman_rho([1, 2, 3], [1, 2, 3, 4])
    with pytest.raises(ConfigError):
        spearman_rho([1, 2, 3, 5], [1, 3, 2, 4], method='exact')


def test_self_report_is_all_ones():
    snapshot = snapshot_of(build_model(TINY_ARCH, seed=0))
    report = layerwise_similarity_report(snapshot, snapshot, {'norm_mode': 'BatchLearned'})
    assert report.rows
    assert {r.kind for r in report.rows} == {'conv', 'linear', 'bn_gamma', 'bn_beta'}
    assert all(r.cka == pytest.approx(1.0) and r.src_rho == pytest.approx(1.0) for r in report.rows)
    # fresh BN gamma/beta are constant vectors
    assert all(r.degenerate for r in report.rows if r.kind.startswith('bn'))


def test_report_between_different_models():
    a = snapshot_of(build_model(TINY_ARCH, seed=0))
    b = snapshot_of(build_model(TINY_ARCH, seed=1))
    report = layerwise_similarity_report(a, b)
    conv = [r for r in report.rows if r.kind == 'conv']
    assert all(0.0 <= r.cka <= 1.0 for r in conv)
    assert report.median(['conv', 'linear']) < 1.0
    assert list(report.to_frame().columns) == ['layer_name', 'kind', 'cka', 'src_rho', 'src_pvalue', 'degenerate']


def test_incomparable_snapshots():
    with pytest.raises(ConfigError, match='not comparable'):
        layerwise_similarity_report(snapshot_of(build_model(TINY_ARCH)), snapshot_of(build_model(TINY_VGG)))


def test_aggregation_groups_reports():
    reference = snapshot_of(build_model(TINY_ARCH, seed=0))
    reports = [
        layerwise_similarity_report(reference, snapshot_of(build_model(TINY_ARCH, seed=s)),
                                    {'norm_mode': mode, 'attack_seed': str(s)})
        for s, mode in ((1, 'BatchLearned'), (2, 'BatchLearned'), (3, 'CFN'))
    ]
    long, summary = aggregate_similarity(reports, group_keys=['norm_mode'])
    assert list(long.columns) == ['layer', 'kind', 'metric', 'value', 'group']
    assert len(long) == 2 * sum(len(r.rows) for r in reports)
    assert summary['group'].tolist() == ['norm_mode=BatchLearned', 'norm_mode=CFN']
    assert summary['models'].tolist() == [2, 1]


def test_empty_report_median():
    assert SimilarityReport().median(['conv']) is None
