"""Dimension reduction: eigen-spectrum, Laplace-evidence order selection and prewhitening."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .errors import DegenerateInput, NumericalError
from .matrix import as_matrix

log = logging.getLogger(__name__)

_POSITIVE_RTOL = 1e-10


class LowRankWarning(UserWarning):
    """Order selection found no structure beyond the first component."""


@dataclass
class ReducedData:
    """Prewhitened data ``y = h @ x`` plus everything needed to undo it."""

    y: np.ndarray
    h: np.ndarray
    c_diag: np.ndarray
    sigma2: float
    order: int
    eigenvalues: np.ndarray
    low_rank_warning: bool = False

    def backproject(self, part: np.ndarray) -> np.ndarray:
        """Map a Q x V reduced-space signal back to the T x V data space."""
        return self.h.T @ (part / self.c_diag[:, None])


def _gram(x):
    x = as_matrix(x)
    return (x @ x.T) / x.shape[1]


def eigen_spectrum(x):
    """Eigen-decomposition of ``(1/V) x x'``, eigenvalues sorted non-increasing."""
    try:
        vals, vecs = linalg.eigh(_gram(x))
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition failed: {exc}") from exc
    vals = np.clip(vals[::-1], 0.0, None)
    return vals, vecs[:, ::-1]


def log_evidence(eigenvalues, n_obs):
    """Laplace-approximated PPCA log-evidence for every candidate rank.

    Returns ``(ranks, evidence)``. Only strictly positive eigenvalues take part;
    ranks run from 1 to ``d - 2`` where ``d`` is the number of positive ones
    (at least one rank is always returned when ``d >= 2``).
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    if lam.size == 0 or lam[0] <= 0:
        raise DegenerateInput("no positive eigenvalues")
    lam = lam[lam > _POSITIVE_RTOL * lam[0]]
    d = lam.size
    if d < 2:
        raise DegenerateInput("order selection needs at least 2 positive eigenvalues")
    n = float(n_obs)
    kmax = max(1, d - 2)
    ks = np.arange(1, kmax + 1)

    i = np.arange(1, d + 1)
    pu_terms = gammaln((d - i + 1) / 2.0) - np.log(np.pi) * (d - i + 1) / 2.0
    pu = -ks * np.log(2.0) + np.cumsum(pu_terms)[:kmax]
    log_lam = np.log(lam)
    pl = -n / 2.0 * np.cumsum(log_lam)[:kmax]
    tail_sum = lam.sum() - np.cumsum(lam)[:kmax]
    v = tail_sum / (d - ks)
    pv = -n * (d - ks) / 2.0 * np.log(v)
    m = d * ks - ks * (ks + 1) / 2.0
    pp = np.log(2.0 * np.pi) * (m + ks) / 2.0

    with np.errstate(divide="ignore", invalid="ignore"):
        diff = lam[:, None] - lam[None, :]
        log_diff = np.where(np.triu(np.ones((d, d), bool), 1), np.log(diff), 0.0)
        inv_diff = 1.0 / lam[None, :] - 1.0 / lam[:, None]
        log_inv = np.where(np.triu(np.ones((d, d), bool), 1), np.log(inv_diff), 0.0)
    # within(k): pairs i < j <= k ; cross(k): i <= k < j
    both = np.cumsum(np.cumsum(log_diff + log_inv, axis=0), axis=1)
    within = both[ks - 1, ks - 1]
    cum_d = np.cumsum(np.cumsum(log_diff, axis=0), axis=1)
    row_tot = np.cumsum(log_diff.sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        cross_diff = row_tot[ks - 1] - cum_d[ks - 1, ks - 1]
        cross_inv = np.array(
            [(d - k) * np.sum(np.log(1.0 / v[k - 1] - 1.0 / lam[:k])) for k in ks]
        )
    pa = within + cross_diff + cross_inv + m * np.log(n)

    ll = pu + pl + pv + pp - pa / 2.0 - ks * np.log(n) / 2.0
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    return ks, ll


def estimate_order(eigenvalues, n_obs) -> int:
    """Rank maximizing the Laplace evidence; 1 (with a warning) when there is no structure."""
    lam = np.asarray(eigenvalues, dtype=float)
    pos = lam[lam > 0]
    if pos.size < 2:
        raise DegenerateInput("order selection needs at least 2 positive eigenvalues")
    if pos.max() - pos.min() <= 1e-12 * pos.max():
        warnings.warn("flat spectrum, returning order 1", LowRankWarning, stacklevel=2)
        return 1
    ks, ll = log_evidence(lam, n_obs)
    if not np.any(np.isfinite(ll)):
        warnings.warn("evidence undefined at every rank, returning 1", LowRankWarning, stacklevel=2)
        return 1
    q = int(ks[int(np.argmax(ll))])
    if q == 1:
        warnings.warn("evidence peaks at order 1", LowRankWarning, stacklevel=2)
    return q


def residual_variance(eigenvalues, q) -> float:
    lam = np.asarray(eigenvalues, dtype=float)
    q = int(q)
    if q >= lam.size or q < 0:
        raise DegenerateInput(f"order {q} leaves no tail among {lam.size} eigenvalues")
    return float(lam[q:].mean())


def prewhiten(x, q="auto") -> ReducedData:
    """Project doubly-centered data onto its leading ``q`` principal directions.

    The whitening operator is ``h = (D1 - sigma2 I)^(-1/2) U1'``, where
    ``sigma2`` is the mean of the discarded eigenvalues.
    """
    x = as_matrix(x)
    t, v = x.shape
    gram = _gram(x)
    try:
        lam = np.clip(linalg.eigh(gram, eigvals_only=True)[::-1], 0.0, None)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition failed: {exc}") from exc
    low_rank = False
    if q == "auto" or q is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", LowRankWarning)
            q = estimate_order(lam, v)
        low_rank = any(issubclass(w.category, LowRankWarning) for w in caught)
    q = int(q)
    if q < 1 or q >= t:
        raise DegenerateInput(f"order {q} invalid for T={t}")
    sigma2 = residual_variance(lam, q)
    if not lam[q - 1] > sigma2:
        raise DegenerateInput(
            f"eigenvalue gap violated: eigenvalue {q} = {lam[q - 1]:.4g} <= sigma2 = {sigma2:.4g}"
        )
    try:
        _, vecs = linalg.eigh(gram, subset_by_index=[t - q, t - 1])
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition failed: {exc}") from exc
    u1 = vecs[:, ::-1]
    c_diag = 1.0 / (lam[:q] - sigma2)
    h = np.sqrt(c_diag)[:, None] * u1.T
    return ReducedData(
        y=h @ x, h=h, c_diag=c_diag, sigma2=sigma2, order=q, eigenvalues=lam,
        low_rank_warning=low_rank,
    )
