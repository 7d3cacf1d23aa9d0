"""Infomax ICA (natural gradient, logistic nonlinearity) with restart clustering.

Used to pull nuisance components out of residual data before the fast EM.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.special import expit, log_expit
from scipy.stats import skew

from .errors import DegenerateInput, NonConvergence
from .matrix import as_matrix

log = logging.getLogger(__name__)


@dataclass
class IcaResult:
    mixing: np.ndarray   # Q x q_out
    sources: np.ndarray  # q_out x V
    n_runs: int
    cluster_quality: np.ndarray
    converged: bool = True


def fix_signs(sources) -> np.ndarray:
    """Flip every row whose sample skewness is negative (ties keep their sign)."""
    s = np.array(as_matrix(sources), dtype=float)
    with np.errstate(all="ignore"):
        sk = skew(s, axis=1, bias=True)
    flip = np.nan_to_num(sk) < 0
    s[flip] *= -1.0
    return s


def _pca_whiten(y, q_out):
    yc = y - y.mean(axis=1, keepdims=True)
    cov = yc @ yc.T / yc.shape[1]
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1][:q_out], vecs[:, ::-1][:, :q_out]
    if vals[-1] <= 1e-12 * max(vals[0], 1e-300):
        raise DegenerateInput(f"data have rank below the requested {q_out} components")
    sphere = vecs.T / np.sqrt(vals)[:, None]
    return yc, sphere


def _mean_loglik(w, x):
    # logistic density of each source: log s(u)(1-s(u)); plus the Jacobian term
    u = w @ x
    dens = log_expit(u) + log_expit(-u)
    return float(dens.sum(axis=0).mean() + np.linalg.slogdet(w)[1])


def _infomax(x, rng, lrate=0.01, max_epochs=500, tol=1e-6, anneal=0.9, anneal_deg=60.0):
    """Natural-gradient Infomax on sphered data ``x`` (q x V). Returns (W, converged, change)."""
    q, n = x.shape
    block = int(np.ceil(np.sqrt(n / 3.0)))
    # random orthogonal start
    w, _ = np.linalg.qr(rng.standard_normal((q, q)))
    bias = np.zeros((q, 1))
    eye = np.eye(q)
    prev_delta = None
    prev_ll = _mean_loglik(w, x)
    change = np.inf
    for epoch in range(max_epochs):
        w_old = w.copy()
        perm = rng.permutation(n)
        for start in range(0, n, block):
            xb = x[:, perm[start:start + block]]
            u = w @ xb + bias
            g = 1.0 - 2.0 * expit(u)
            w = w + lrate * (eye + g @ u.T / xb.shape[1]) @ w
            bias = bias + lrate * g.mean(axis=1, keepdims=True)
        if not np.all(np.isfinite(w)) or np.abs(w).max() > 1e8:
            # blow-up: restart from the previous epoch with a smaller step
            w, bias, lrate = w_old, np.zeros((q, 1)), lrate * 0.5
            continue
        delta = (w - w_old).ravel()
        change = np.linalg.norm(delta) / max(np.linalg.norm(w_old), 1e-300)
        if change < tol:
            return w, True, change
        ll = _mean_loglik(w, x)
        if ll < prev_ll:
            lrate *= 0.5
        elif prev_delta is not None:
            cos = delta @ prev_delta / (np.linalg.norm(delta) * np.linalg.norm(prev_delta))
            if np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))) > anneal_deg:
                lrate *= anneal
        prev_ll = ll
        prev_delta = delta
    return w, change <= 1e-3, change


def infomax_single(y, q_out: int, seed: int = 0, max_epochs: int = 500):
    """One Infomax run on the rank-``q_out`` PCA projection of ``y``.

    Returns ``(mixing, sources, converged)``: sources are unit-variance and
    skew-positive, and ``mixing @ sources`` equals the PCA projection of the
    (row-centered) data.
    """
    y = as_matrix(y)
    q_out = int(q_out)
    if not 1 <= q_out <= y.shape[0]:
        raise DegenerateInput(f"q_out={q_out} must be in [1, {y.shape[0]}]")
    rng = np.random.default_rng(seed)
    yc, sphere = _pca_whiten(y, q_out)
    x = sphere @ yc
    if q_out == 1:
        w, converged = np.eye(1), True
    else:
        w, converged, change = _infomax(x, rng, max_epochs=max_epochs)
        if not converged:
            warnings.warn(f"infomax stopped at relative change {change:.2e}", NonConvergence,
                          stacklevel=2)
    sources = w @ x
    sources /= sources.std(axis=1, keepdims=True)
    sources = fix_signs(sources)
    mixing = _mixing_for(yc, sources)
    return mixing, sources, converged


def _mixing_for(yc, sources):
    return np.linalg.solve(sources @ sources.T, sources @ yc.T).T


def infomax_restarts(y, q_out: int, n_runs: int = 5, seed: int = 0, max_epochs: int = 500) -> IcaResult:
    """Repeat :func:`infomax_single` and cluster the pooled maps.

    Maps from all runs are clustered by average linkage on ``1 - |r|`` into
    ``q_out`` groups. Each cluster's map is the mean of its sign-aligned
    members, rescaled and made skew-positive. Rows come out sorted by
    cluster quality (mean within-cluster ``|r|``), best first.
    """
    y = as_matrix(y)
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n_runs)
    runs = [infomax_single(y, q_out, seed=int(s), max_epochs=max_epochs) for s in seeds]
    converged = all(r[2] for r in runs)
    yc = y - y.mean(axis=1, keepdims=True)
    if n_runs == 1:
        mixing, sources, _ = runs[0]
        return IcaResult(mixing, sources, 1, np.ones(q_out), converged)

    pool = np.vstack([r[1] for r in runs])
    corr = np.corrcoef(pool)
    dist = np.clip(1.0 - np.abs(corr), 0.0, None)
    np.fill_diagonal(dist, 0.0)
    dist = 0.5 * (dist + dist.T)
    if q_out == 1:
        labels = np.ones(pool.shape[0], int)
    else:
        tree = linkage(squareform(dist, checks=False), method="average")
        labels = fcluster(tree, t=q_out, criterion="maxclust")

    centroids, quality, first = [], [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        ref = pool[idx[0]]
        signs = np.sign(pool[idx] @ ref)
        signs[signs == 0] = 1.0
        centroids.append((signs[:, None] * pool[idx]).mean(axis=0))
        if idx.size > 1:
            sub = np.abs(corr[np.ix_(idx, idx)])
            quality.append(float(sub[np.triu_indices(idx.size, 1)].mean()))
        else:
            quality.append(1.0)
        first.append(idx[0])
    order = sorted(range(len(centroids)), key=lambda k: (-quality[k], first[k]))
    sources = np.array([centroids[k] for k in order])
    sources -= sources.mean(axis=1, keepdims=True)
    sources /= sources.std(axis=1, keepdims=True)
    sources = fix_signs(sources)
    mixing = _mixing_for(yc, sources)
    return IcaResult(mixing, sources, n_runs, np.array([quality[k] for k in order]), converged)
