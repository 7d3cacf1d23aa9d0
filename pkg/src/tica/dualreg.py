"""Two-stage OLS (dual regression) estimation of subject mixing and maps."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, RankDeficient
from .matrix import as_matrix

_RANK_TOL = 1e-12


@dataclass
class DualRegResult:
    mixing: np.ndarray   # T x L
    sources: np.ndarray  # L x V


def _lstsq(design, target, what):
    """QR least squares, refusing designs whose Gram matrix is singular to 1e-12 (relative)."""
    q, r = np.linalg.qr(design, mode="reduced")
    sv = np.linalg.svd(r, compute_uv=False)
    if sv.size == 0 or not sv[-1] ** 2 > _RANK_TOL * sv[0] ** 2:
        raise RankDeficient(f"{what} Gram matrix is singular")
    return np.linalg.solve(r, q.T @ target)


def dual_regress(x, s_grp) -> DualRegResult:
    """Regress data on group maps for the mixing, then on that mixing for the maps.

    ``mixing = X S'(S S')^-1`` and ``sources = (M'M)^-1 M' X``.
    """
    x = as_matrix(x)
    s_grp = as_matrix(s_grp)
    if x.shape[1] != s_grp.shape[1]:
        raise DimensionMismatch(
            f"data has {x.shape[1]} locations, group maps have {s_grp.shape[1]}"
        )
    mixing = _lstsq(s_grp.T, x.T, "group-map").T
    sources = _lstsq(mixing, x, "mixing")
    return DualRegResult(mixing=mixing, sources=sources)
