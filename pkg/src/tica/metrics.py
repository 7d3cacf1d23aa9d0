"""Accuracy and reliability metrics for estimated source maps."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, InconsistentCohort
from .infomax import fix_signs
from .matrix import as_matrix


def _stack(maps):
    arr = np.asarray(maps, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionMismatch(f"expected a stack of L x V maps, got shape {arr.shape}")
    return arr


def rescale_to(estimate, truth) -> np.ndarray:
    """Scale each row of ``estimate`` by the least-squares factor matching ``truth``."""
    est = as_matrix(estimate)
    tru = as_matrix(truth)
    den = (est * est).sum(axis=1)
    beta = np.where(den > 0, (est * tru).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
    return est * beta[:, None]


def mse_map(estimates, truth) -> np.ndarray:
    """Voxelwise mean squared error over subjects after per-component rescaling."""
    est = _stack(estimates)
    tru = _stack(truth)
    if est.shape != tru.shape:
        raise DimensionMismatch(f"estimates {est.shape} vs truth {tru.shape}")
    if est.shape[0] < 2:
        raise DegenerateInput("mse_map needs at least 2 subjects")
    err = np.stack([rescale_to(e, t) - t for e, t in zip(est, tru)])
    return (err ** 2).mean(axis=0)


def corr_activated(estimate, truth, mask=None) -> float:
    """Pearson correlation over ``mask`` (default: voxels where truth is nonzero)."""
    estimate = np.asarray(estimate, float).ravel()
    truth = np.asarray(truth, float).ravel()
    if estimate.shape != truth.shape:
        raise DimensionMismatch("estimate and truth differ in length")
    mask = truth != 0 if mask is None else np.asarray(mask, bool).ravel()
    if mask.sum() < 3:
        raise DegenerateInput("activation mask has fewer than 3 voxels")
    e, t = estimate[mask], truth[mask]
    if np.ptp(t) == 0:
        raise DegenerateInput("truth is constant on the mask")
    if np.ptp(e) == 0:
        return 0.0
    return float(np.corrcoef(e, t)[0, 1])


def match_components(estimates, truth) -> np.ndarray:
    """Greedy matching on |r|: ``perm[i]`` is the truth row assigned to estimate row ``i``."""
    est = fix_signs(estimates)
    tru = as_matrix(truth)
    k = est.shape[0]
    if tru.shape[0] < k:
        raise DimensionMismatch("more estimates than true components")
    r = np.abs(np.corrcoef(est, tru)[:k, k:])
    r = np.nan_to_num(r, nan=-1.0)
    perm = np.full(k, -1)
    for _ in range(k):
        i, j = np.unravel_index(np.argmax(r), r.shape)
        perm[i] = j
        r[i, :] = -np.inf
        r[:, j] = -np.inf
    return perm


@dataclass
class ReliabilityReport:
    icc: np.ndarray
    var_between: np.ndarray
    var_within: np.ndarray
    var_total: np.ndarray
    wi2c2: np.ndarray = None


def icc_map(session1, session2) -> ReliabilityReport:
    """Voxelwise ICC from two sessions of per-subject maps (n x L x V each)."""
    w1 = _stack(session1)
    w2 = _stack(session2)
    if w1.shape != w2.shape:
        raise InconsistentCohort(f"session stacks differ: {w1.shape} vs {w2.shape}")
    if w1.shape[0] < 2:
        raise InconsistentCohort("ICC needs at least 2 subjects")
    var_within = 0.5 * (w2 - w1).var(axis=0, ddof=1)
    var_total = 0.5 * (w1.var(axis=0, ddof=1) + w2.var(axis=0, ddof=1))
    var_between = np.maximum(var_total - var_within, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        icc = np.where(var_total > 0, var_between / var_total, 0.0)
    return ReliabilityReport(np.clip(icc, 0.0, 1.0), var_between, var_within, var_total)


def wi2c2(report: ReliabilityReport, template_mean) -> np.ndarray:
    """Image ICC per component, weighting voxels by |template mean| (normalized to sum 1)."""
    lam = np.abs(as_matrix(template_mean))
    norm = lam.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise DegenerateInput("template mean row is all zero")
    lam = lam / norm
    num = (lam * report.var_between).sum(axis=1)
    den = (lam * report.var_total).sum(axis=1)
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    report.wi2c2 = out
    return out
