"""
Similarity Module
Weight-space linear CKA and Spearman rank correlation between model snapshots
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats

from src.config import NORMAL_APPROX_N, PERMUTATION_ROUNDS
from src.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# Snapshot kinds compared layer by layer
COMPARED_KINDS = ('conv', 'linear', 'bn_gamma', 'bn_beta')
CORE_KINDS = ('conv', 'linear')
BN_KINDS = ('bn_gamma', 'bn_beta')

FLATTENING = "conv [out,in,kh,kw] -> [out, in*kh*kw]; linear [out,in] as is; vectors [n] -> [n,1]; columns centered"


def as_matrix(weights) -> np.ndarray:
    """Reshape layer weights to [out, rest]; vectors become [n, 1]"""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        return w.reshape(1, 1)
    if w.ndim == 1:
        return w.reshape(-1, 1)
    return w.reshape(w.shape[0], -1)


def is_degenerate(matrix: np.ndarray) -> bool:
    """True when column centering leaves nothing (zero variance)"""
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    return not np.any(centered)


def linear_cka(weights_a, weights_b) -> float:
    """
    Linear CKA = ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered matrices

    A zero-variance input gives 0, or 1 when both inputs are identical.
    """
    a = np.asarray(weights_a, dtype=np.float64)
    b = np.asarray(weights_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"linear_cka: shape mismatch {a.shape} vs {b.shape}")
    x = as_matrix(a)
    y = as_matrix(b)
    if is_degenerate(x) or is_degenerate(y):
        return 1.0 if np.array_equal(a, b) else 0.0
    x = x - x.mean(axis=0, keepdims=True)
    y = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(y.T @ x) ** 2
    return float(cross / (np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)))


class SpearmanResult(NamedTuple):
    rho: float
    pvalue: float
    degenerate: bool = False


def _pearson(ra: np.ndarray, rb: np.ndarray) -> float:
    da = ra - ra.mean()
    db = rb - rb.mean()
    return float(np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db)))


def spearman_rho(a, b, method: str = 't', rounds: int = PERMUTATION_ROUNDS, seed: int = 0) -> SpearmanResult:
    """
    Spearman correlation with average ranks for ties

    The two-sided p-value uses t = rho sqrt((n-2)/(1-rho^2)) against Student-t
    with n-2 degrees of freedom (standard normal above NORMAL_APPROX_N), or a
    seeded permutation test with method='permutation'. A constant input gives
    rho 0 with the degenerate flag set (rho 1 when both inputs are identical).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n = len(a)
    if n != len(b):
        raise ShapeError(f"spearman_rho: lengths differ ({n} vs {len(b)})")
    if n < 3:
        raise ShapeError(f"spearman_rho needs at least 3 values, got {n}")
    ra = stats.rankdata(a, method='average')
    rb = stats.rankdata(b, method='average')
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        if np.array_equal(a, b):
            return SpearmanResult(1.0, 0.0, True)
        return SpearmanResult(0.0, 1.0, True)

    rho = float(np.clip(_pearson(ra, rb), -1.0, 1.0))
    if abs(rho) > 1.0 - 1e-12:
        return SpearmanResult(float(np.sign(rho)), 0.0)

    if method == 'permutation':
        rng = np.random.default_rng(seed)
        hits = sum(abs(_pearson(ra, rng.permutation(rb))) >= abs(rho) for _ in range(rounds))
        return SpearmanResult(rho, (hits + 1) / (rounds + 1))
    if method != 't':
        raise ConfigError(f"Unknown Spearman p-value method '{method}'")

    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    if n > NORMAL_APPROX_N:
        p = 2.0 * stats.norm.sf(abs(t))
    else:
        p = 2.0 * stats.t.sf(abs(t), n - 2)
    return SpearmanResult(rho, float(p))


class SimilarityRow(BaseModel):
    layer_name: str
    kind: str
    cka: float
    src_rho: float
    src_pvalue: float
    degenerate: bool = False


class SimilarityReport(BaseModel):
    group: Dict[str, str] = Field(default_factory=dict)
    flattening: str = FLATTENING
    rows: List[SimilarityRow] = Field(default_factory=list)

    def median(self, kinds: Sequence[str], metric: str = 'cka') -> Optional[float]:
        values = [getattr(r, metric) for r in self.rows if r.kind in kinds]
        return float(np.median(values)) if values else None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows],
                            columns=list(SimilarityRow.model_fields))


def _compared_entries(snapshot) -> List:
    return [e for e in snapshot.entries if e.kind in COMPARED_KINDS]


def layerwise_similarity_report(snapshot_a, snapshot_b, group: Optional[Dict[str, str]] = None) -> SimilarityReport:
    """One CKA/SRC row per conv kernel, linear weight, BN gamma and BN beta"""
    entries_a = _compared_entries(snapshot_a)
    entries_b = {e.name: e for e in _compared_entries(snapshot_b)}
    names_a = [e.name for e in entries_a]
    problems = []
    for e in entries_a:
        other = entries_b.get(e.name)
        if other is None:
            problems.append(f"{e.name}: missing in second snapshot")
        elif other.shape != e.shape:
            problems.append(f"{e.name}: {e.shape} vs {other.shape}")
    problems.extend(f"{name}: missing in first snapshot" for name in entries_b if name not in names_a)
    if problems:
        raise ConfigError("Snapshots are not comparable: " + "; ".join(problems))

    rows = []
    for e in entries_a:
        other = entries_b[e.name]
        degenerate = is_degenerate(as_matrix(e.values)) or is_degenerate(as_matrix(other.values))
        if e.values.size >= 3:
            src = spearman_rho(e.values, other.values)
            degenerate = degenerate or src.degenerate
        else:
            src = SpearmanResult(1.0 if np.array_equal(e.values, other.values) else 0.0, 1.0, True)
        rows.append(SimilarityRow(
            layer_name=e.name, kind=e.kind, cka=linear_cka(e.values, other.values),
            src_rho=src.rho, src_pvalue=src.pvalue, degenerate=degenerate,
        ))
    flagged = sum(r.degenerate for r in rows)
    if flagged:
        logger.debug(f"{flagged} degenerate layer comparison(s) in similarity report")
    return SimilarityReport(group={k: str(v) for k, v in (group or {}).items()}, rows=rows)


def group_label(group: Dict[str, str]) -> str:
    return ','.join(f"{k}={group[k]}" for k in sorted(group))


def aggregate_similarity(reports: Sequence[SimilarityReport],
                         group_keys: Optional[Sequence[str]] = None) -> (pd.DataFrame, pd.DataFrame):
    """
    Long-format (layer, metric, value, group) rows for box plots, plus one
    summary row per group with median core-layer CKA/SRC and median BN-layer CKA

    group_keys selects which group fields define a group (default: all).
    """
    long_rows = []
    for report in reports:
        group = report.group if group_keys is None else {k: report.group.get(k, '') for k in group_keys}
        label = group_label(group)
        for row in report.rows:
            for metric in ('cka', 'src_rho'):
                long_rows.append({'layer': row.layer_name, 'kind': row.kind, 'metric': metric,
                                  'value': getattr(row, metric), 'group': label})
    long = pd.DataFrame(long_rows, columns=['layer', 'kind', 'metric', 'value', 'group'])

    summary_rows = []
    for label in dict.fromkeys(long['group']):
        part = long[long['group'] == label]
        core = part[part['kind'].isin(CORE_KINDS)]
        bn = part[part['kind'].isin(BN_KINDS)]
        summary_rows.append({
            'group': label,
            'models': int(sum(1 for r in reports
                              if group_label(r.group if group_keys is None
                                             else {k: r.group.get(k, '') for k in group_keys}) == label)),
            'median_core_cka': core[core['metric'] == 'cka']['value'].median() if len(core) else float('nan'),
            'median_core_src': core[core['metric'] == 'src_rho']['value'].median() if len(core) else float('nan'),
            'median_bn_cka': bn[bn['metric'] == 'cka']['value'].median() if len(bn) else float('nan'),
        })
    summary = pd.DataFrame(summary_rows, columns=['group', 'models', 'median_core_cka', 'median_core_src', 'median_bn_cka'])
    return long, summary
