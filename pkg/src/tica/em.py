"""Template ICA estimators: exact EM, subspace EM and the fast two-stage EM.

All fits work on prewhitened data ``y = A s + e`` with ``e ~ N(0, nu0^2 C)``,
``C = diag(c_diag)``. Template components get a Gaussian prior from the
template, nuisance components a mixture-of-Gaussians prior.

Inside the fits the template is standardized (spatially centered, scaled
so each component has unit mean square including its prior variance). This
matches the unit-variance sources implied by the prewhitening and the
orthonormal mixing. Results are mapped back to template units.
"""

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import null_space

from .dualreg import dual_regress
from .errors import (DegenerateInput, DimensionMismatch, FormatError, LowOrder, MissingArtifact,
                     NonConvergence, NumericalError, SpaceTooLarge)
from .infomax import infomax_restarts
from .matrix import as_matrix, center_rows, center_scale, ensure_dir, read_matrix, write_matrix
from .mog import MoGParams, fit_mog
from .reduction import LowRankWarning, ReducedData, estimate_order, prewhiten
from .template import Template

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_CAP = 10 ** 7
_NU_FLOOR = 1e-10
_BUDGET = 2_000_000  # float64 elements per batched (location, config) block


# ---------------------------------------------------------------- latent space

@dataclass
class LatentSpace:
    """Latent state configurations, one row per config, zero-based (0..M-1).

    The activation state is index ``m - 1``.
    """

    configs: np.ndarray
    m: int
    kind: str

    def __len__(self):
        return self.configs.shape[0]

    @property
    def q_prime(self) -> int:
        return self.configs.shape[1]

    def one_hot(self, rows=slice(None)) -> np.ndarray:
        z = self.configs[rows].astype(np.intp)
        return (z[..., None] == np.arange(self.m)).astype(float)


def space_size(q_prime: int, m: int, kind: str) -> int:
    if kind == "full":
        return m ** q_prime
    if kind == "subspace":
        return (q_prime + m - 1) * (m - 1) ** (q_prime - 1)
    raise ValueError(f"unknown space kind {kind!r}")


def _product(q, values):
    """All length-``q`` tuples over ``values`` in lexicographic order (uint8)."""
    values = np.asarray(values, dtype=np.uint8)
    k = values.size ** q
    out = np.empty((k, q), dtype=np.uint8)
    idx = np.arange(k)
    for j in range(q):
        out[:, j] = values[(idx // values.size ** (q - 1 - j)) % values.size]
    return out


def enumerate_space(q_prime: int, m: int, kind: str = "subspace", cap: int = DEFAULT_CAP) -> LatentSpace:
    """Enumerate the full space ``{0..m-1}^q_prime`` or the subspace with at most one
    coordinate in the activation state. Raises SpaceTooLarge beyond ``cap`` configs."""
    q_prime, m = int(q_prime), int(m)
    if q_prime < 1 or m < 2:
        raise DegenerateInput(f"need q_prime >= 1 and m >= 2, got {q_prime}, {m}")
    if m > 255:
        raise DegenerateInput("at most 255 mixture components are supported")
    n = space_size(q_prime, m, kind)
    if n > cap:
        raise SpaceTooLarge(f"{kind} space has {n} configurations (cap {cap})")
    if kind == "full":
        configs = _product(q_prime, range(m))
    else:
        base = _product(q_prime, range(m - 1))  # R0: no activation
        parts = [base]
        if q_prime == 1:
            parts.append(np.array([[m - 1]], dtype=np.uint8))
        else:
            rest = _product(q_prime - 1, range(m - 1))
            for j in range(q_prime):
                block = np.insert(rest, j, m - 1, axis=1)
                parts.append(block)
        configs = np.vstack(parts)
        configs = configs[np.lexsort(configs.T[::-1])]
    return LatentSpace(configs, m, kind)


def _empty_space(m):
    return LatentSpace(np.zeros((1, 0), dtype=np.uint8), m, "full")


# ---------------------------------------------------------------- parameters

@dataclass
class ThetaState:
    a1: np.ndarray          # Q x L
    a2: np.ndarray          # Q x Q'
    nu0_sq: float
    mog: list = field(default_factory=list)

    @property
    def a(self) -> np.ndarray:
        return np.hstack([self.a1, self.a2])

    @property
    def q_prime(self) -> int:
        return self.a2.shape[1]

    def mog_arrays(self):
        """(log weights, means, vars) as Q' x M arrays."""
        if not self.mog:
            return np.zeros((0, 1)), np.zeros((0, 1)), np.ones((0, 1))
        with np.errstate(divide="ignore"):
            lw = np.log(np.array([p.weights for p in self.mog]))
        return lw, np.array([p.means for p in self.mog]), np.array([p.vars for p in self.mog])

    def copy(self) -> "ThetaState":
        return ThetaState(self.a1.copy(), self.a2.copy(), float(self.nu0_sq),
                          [p.copy() for p in self.mog])


@dataclass
class PosteriorMoments:
    """Per-location posterior moments; the leading axis indexes locations."""

    mean: np.ndarray         # V x Q
    second: np.ndarray       # V x Q x Q
    z_marginals: np.ndarray  # V x Q' x M
    cond_first: np.ndarray   # V x Q' x M
    cond_second: np.ndarray  # V x Q' x M
    loglik: np.ndarray       # V


@dataclass
class EMOptions:
    max_iters: int = 100
    tol_mean: float = 1e-3
    tol_nu: float = 1e-5
    orthogonalize: bool = True
    m: int = 3
    seed: int = 0
    q_prime: int = None          # fast pipeline: None estimates it from the residual
    n_ica_runs: int = 5
    reestimate_nuisance: bool = False
    cap: int = DEFAULT_CAP


@dataclass
class FitResult:
    template_mean: np.ndarray
    template_var: np.ndarray
    nuisance_mean: np.ndarray = None
    theta: ThetaState = None
    n_iters: int = 0
    loglik_trace: list = field(default_factory=list)
    converged: bool = False
    order: int = 0
    q_prime: int = 0
    flags: list = field(default_factory=list)
    timing: dict = field(default_factory=dict, repr=False, compare=False)  # seconds per stage

    def save(self, directory) -> Path:
        directory = ensure_dir(directory)
        meta = {
            "order": int(self.order), "l": int(self.template_mean.shape[0]),
            "q_prime": int(self.q_prime), "n_iters": int(self.n_iters),
            "converged": bool(self.converged),
            "loglik_trace": [float(x) for x in self.loglik_trace],
            "flags": list(self.flags), "version": 1,
        }
        (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        write_matrix(self.template_mean, directory / "template_mean.bin", "bin")
        write_matrix(self.template_var, directory / "template_var.bin", "bin")
        if self.nuisance_mean is not None and self.nuisance_mean.size:
            write_matrix(self.nuisance_mean, directory / "nuisance_mean.bin", "bin")
        return directory

    @classmethod
    def load(cls, directory) -> "FitResult":
        directory = Path(directory)
        if not (directory / "meta.json").exists():
            raise MissingArtifact(f"no fit result at {directory}")
        meta = json.loads((directory / "meta.json").read_text())
        nuis = directory / "nuisance_mean.bin"
        res = cls(
            template_mean=read_matrix(directory / "template_mean.bin", "bin"),
            template_var=read_matrix(directory / "template_var.bin", "bin"),
            nuisance_mean=read_matrix(nuis, "bin") if nuis.exists() else None,
            n_iters=meta["n_iters"], loglik_trace=meta["loglik_trace"],
            converged=meta["converged"], order=meta["order"], q_prime=meta["q_prime"],
            flags=meta.get("flags", []),
        )
        if res.template_mean.shape[0] != meta["l"]:
            raise FormatError(f"{directory}: template_mean rows disagree with meta.json")
        return res


# ---------------------------------------------------------------- template prior

@dataclass
class _Prior:
    s0: np.ndarray     # L x V, standardized
    var: np.ndarray    # L x V, standardized
    scale: np.ndarray  # L
    offset: np.ndarray  # L
    gram: np.ndarray = None  # L x L, (1/V) sum_v E[s s'] under the prior

    def metric(self, q_prime=0):
        """Source second-moment matrix used by the orthogonalization (nuisance: identity)."""
        l = self.s0.shape[0]
        g = np.eye(l + q_prime)
        g[:l, :l] = self.gram
        return g

    def to_template_units(self, mean, var):
        k = self.scale[:, None]
        return mean / k + self.offset[:, None], var / k ** 2


def _standardize(template: Template) -> _Prior:
    mean = np.asarray(template.mean, float)
    var = template.prior_variance()
    offset = mean.mean(axis=1)
    s0c = mean - offset[:, None]
    ms = (s0c ** 2 + var).mean(axis=1)
    if np.any(ms <= 0):
        raise DegenerateInput("template component with zero mean and variance")
    k = 1.0 / np.sqrt(ms)
    s0 = s0c * k[:, None]
    var = var * k[:, None] ** 2
    gram = (s0 @ s0.T + np.diag(var.sum(axis=1))) / s0.shape[1]
    return _Prior(s0, var, k, offset, gram)


# ---------------------------------------------------------------- E-step

def _chol_logdet(p):
    """Batched log-determinant via Cholesky, with one jittered retry."""
    try:
        chol = np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        dim = p.shape[-1]
        jitter = 1e-10 * np.trace(p, axis1=-2, axis2=-1) / dim
        p = p + jitter[..., None, None] * np.eye(dim)
        try:
            chol = np.linalg.cholesky(p)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("posterior precision is not positive definite") from exc
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return p, logdet


def _as_columns(y, s0, var):
    y = np.asarray(y, float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
        s0 = np.asarray(s0, float).reshape(-1, 1)
        var = np.asarray(var, float).reshape(-1, 1)
    return y, np.asarray(s0, float), np.asarray(var, float), single


def _estep(y, theta: ThetaState, s0, var, c_diag, space: LatentSpace, keep=True):
    """Posterior moments for every column of ``y`` (Q x V).

    Configs are streamed in chunks; weights are combined with a running
    maximum so that nothing is ever exponentiated outside the log domain's
    safe range. With ``keep=False`` only the M-step sums are returned.
    """
    y, s0, var, _ = _as_columns(y, s0, var)
    a = theta.a
    q, v = y.shape
    l = s0.shape[0]
    qp = theta.q_prime
    if a.shape != (q, q) or l + qp != q:
        raise DimensionMismatch(f"mixing {a.shape} does not match data dimension {q} "
                                f"with L={l}, Q'={qp}")
    if qp == 0:
        space = _empty_space(2)
    elif space.q_prime != qp:
        raise DimensionMismatch(f"space has Q'={space.q_prime}, model has {qp}")
    mm = space.m
    lw, mu_g, var_g = theta.mog_arrays()
    if qp and mu_g.shape[1] != mm:
        raise DimensionMismatch(f"space uses M={mm}, mixture priors have {mu_g.shape[1]}")
    if np.any(var <= 0) or (qp and np.any(var_g <= 0)):
        raise NumericalError("prior variances must be positive")

    c_diag = np.asarray(c_diag, float)
    rinv = 1.0 / (theta.nu0_sq * c_diag)          # R = nu0^2 C
    gram = a.T @ (rinv[:, None] * a)                # A' R^-1 A
    ary = a.T @ (rinv[:, None] * y)                 # Q x V
    yry = np.einsum("qv,q,qv->v", y, rinv, y)
    logdet_r = float(np.log(theta.nu0_sq * c_diag).sum())

    k = len(space)
    zq = np.arange(qp)
    if qp:
        cfg = space.configs.astype(np.intp)
        z_mu = mu_g[zq, cfg]                        # K x Q'
        z_var = var_g[zq, cfg]
        z_logp = lw[zq, cfg].sum(axis=1)
    else:
        z_mu = np.zeros((1, 0))
        z_var = np.ones((1, 0))
        z_logp = np.zeros(1)

    nz = max(1, min(k, _BUDGET // (q * q)))
    nv = max(1, min(v, _BUDGET // (nz * q * q)))

    mean = np.empty((v, q))
    second = np.empty((v, q, q)) if keep else None
    zmar = np.empty((v, qp, mm))
    cf = np.empty((v, qp, mm))
    cs = np.empty((v, qp, mm))
    ll = np.empty(v)
    second_sum = np.zeros((q, q))
    eye = np.eye(q)

    for v0 in range(0, v, nv):
        vs = slice(v0, min(v, v0 + nv))
        n = vs.stop - vs.start
        run_max = np.full(n, -np.inf)
        s_0 = np.zeros(n)
        s_1 = np.zeros((n, q))
        s_2 = np.zeros((n, q, q))
        s_zm = np.zeros((n, qp, mm))
        s_c1 = np.zeros((n, qp, mm))
        s_c2 = np.zeros((n, qp, mm))
        for z0 in range(0, k, nz):
            zs = slice(z0, min(k, z0 + nz))
            nk = zs.stop - zs.start
            lam = np.empty((n, nk, q))
            lam[:, :, :l] = var[:, vs].T[:, None, :]
            lam[:, :, l:] = z_var[zs][None]
            mpr = np.empty((n, nk, q))
            mpr[:, :, :l] = s0[:, vs].T[:, None, :]
            mpr[:, :, l:] = z_mu[zs][None]
            prec = np.broadcast_to(gram, (n, nk, q, q)).copy()
            prec[..., np.arange(q), np.arange(q)] += 1.0 / lam
            prec, logdet_p = _chol_logdet(prec)
            cov = np.linalg.inv(prec)
            cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
            b = ary[:, vs].T[:, None, :] + mpr / lam
            mu = np.einsum("nkij,nkj->nki", cov, b)
            logp = -0.5 * (q * LOG_2PI + logdet_r + np.log(lam).sum(-1) + logdet_p
                           + yry[vs][:, None] + (mpr ** 2 / lam).sum(-1)
                           - (b * mu).sum(-1))
            logw = logp + z_logp[zs][None]

            new_max = np.maximum(run_max, logw.max(axis=1))
            with np.errstate(invalid="ignore"):
                scale = np.where(np.isfinite(run_max), np.exp(run_max - new_max), 0.0)
            safe = np.where(np.isfinite(new_max), new_max, 0.0)
            e = np.exp(logw - safe[:, None])
            run_max = new_max
            s_0 = s_0 * scale + e.sum(axis=1)
            s_1 = s_1 * scale[:, None] + np.einsum("nk,nki->ni", e, mu)
            s_2 = s_2 * scale[:, None, None] + (np.einsum("nk,nki,nkj->nij", e, mu, mu)
                                                + np.einsum("nk,nkij->nij", e, cov))
            if qp:
                oh = space.one_hot(zs)                       # nk x Q' x M
                m_n = mu[:, :, l:]
                v_n = np.diagonal(cov, axis1=-2, axis2=-1)[:, :, l:]
                s_zm = s_zm * scale[:, None, None] + np.einsum("nk,kqm->nqm", e, oh)
                s_c1 = s_c1 * scale[:, None, None] + np.einsum("nk,nkq,kqm->nqm", e, m_n, oh)
                s_c2 = s_c2 * scale[:, None, None] + np.einsum("nk,nkq,kqm->nqm", e,
                                                               m_n ** 2 + v_n, oh)
        if not np.all(np.isfinite(run_max)) or np.any(s_0 <= 0):
            raise NumericalError("configuration log-densities are all -inf at some location")
        mean[vs] = s_1 / s_0[:, None]
        sec = s_2 / s_0[:, None, None]
        sec = 0.5 * (sec + np.swapaxes(sec, -1, -2))
        second_sum += sec.sum(axis=0)
        if keep:
            second[vs] = sec
        zmar[vs] = s_zm / s_0[:, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            cf[vs] = np.where(s_zm > 0, s_c1 / s_zm, 0.0)
            cs[vs] = np.where(s_zm > 0, s_c2 / s_zm, 0.0)
        ll[vs] = run_max + np.log(s_0)
    moments = PosteriorMoments(mean, second, zmar, cf, cs, ll)
    return moments, second_sum


def cond_posterior_s(y_v, z, theta: ThetaState, template_slice, c_diag):
    """Gaussian ``s | z, y`` at one location: returns ``(mean, covariance)``."""
    s0, var = template_slice
    z = np.asarray(z, dtype=np.uint8).reshape(1, -1)
    m = theta.mog[0].m if theta.mog else 2
    space = LatentSpace(z, m, "full") if theta.q_prime else _empty_space(2)
    mom, _ = _estep(y_v, theta, s0, var, c_diag, space)
    sec = mom.second[0]
    mean = mom.mean[0]
    return mean, sec - np.outer(mean, mean)


def _config_logpost(y, theta, s0, var, c_diag, space):
    """log p(y, z) for every location and config, shape V x K."""
    out = []
    for i in range(len(space)):
        one = LatentSpace(space.configs[i:i + 1], space.m, space.kind)
        mom, _ = _estep(y, theta, s0, var, c_diag, one, keep=False)
        out.append(mom.loglik)
    return np.stack(out, axis=1)


def posterior_z(y_v, theta: ThetaState, template_slice, c_diag, space: LatentSpace):
    """p(z | y) over ``space``; shape (K,) for one location, (V, K) for a Q x V block."""
    s0, var = template_slice
    y, s0, var, single = _as_columns(y_v, s0, var)
    if theta.q_prime == 0:
        space = _empty_space(2)
    lp = _config_logpost(y, theta, s0, var, c_diag, space)
    top = lp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericalError("all configuration log-densities are -inf")
    p = np.exp(lp - top)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def posterior_moments(y_v, theta: ThetaState, template_slice, c_diag, space: LatentSpace) -> PosteriorMoments:
    """Mixture moments of ``s | y``; accepts one location (vector) or a Q x V block."""
    s0, var = template_slice
    mom, _ = _estep(y_v, theta, s0, var, c_diag, space)
    return mom


def observed_loglik(y, theta: ThetaState, template_slice, c_diag, space: LatentSpace) -> float:
    """Sum over locations of ``log sum_z p(z) g(y_v; mu_y|z, Sigma_y|z)``."""
    s0, var = template_slice
    mom, _ = _estep(y, theta, s0, var, c_diag, space, keep=False)
    return float(mom.loglik.sum())


# ---------------------------------------------------------------- M-step

def _sym_sqrt(g):
    vals, vecs = np.linalg.eigh(g)
    if vals[0] <= 1e-12 * vals[-1]:
        raise NumericalError("source second-moment matrix is singular")
    return (vecs * np.sqrt(vals)) @ vecs.T, (vecs / np.sqrt(vals)) @ vecs.T


def orthogonalize(raw, metric=None) -> np.ndarray:
    """Nearest matrix with orthonormal columns, ``U V'`` from the SVD of ``raw``.

    With a source second-moment ``metric`` G the constraint becomes
    ``A G A' = I``: the result is ``polar(raw G^1/2) G^-1/2``, which equals
    the plain version when G is the identity.
    """
    raw = np.asarray(raw, float)
    if metric is not None:
        half, inv_half = _sym_sqrt(np.asarray(metric, float))
        return orthogonalize(raw @ half) @ inv_half
    u, sv, vt = np.linalg.svd(raw, full_matrices=False)
    if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise NumericalError("mixing matrix is rank deficient")
    return u @ vt


def update_mixing(suff_yx, suff_xx, orthogonalize_: bool = True, metric=None) -> np.ndarray:
    suff_yx = np.asarray(suff_yx, float)
    suff_xx = np.asarray(suff_xx, float)
    try:
        cond = np.linalg.cond(suff_xx)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not cond < 1e12:
        raise NumericalError("second-moment sum is singular")
    raw = np.linalg.solve(suff_xx.T, suff_yx.T).T
    return orthogonalize(raw, metric) if orthogonalize_ else raw


def update_noise_var(y, c_diag, a, mean, second_sum) -> float:
    """``(1/VQ) sum_v [y'C^-1 y - 2 y'C^-1 A E[s] + tr(A'C^-1 A E[ss'])]``, floored.

    ``mean`` is Q x V (or V x Q when ``mean.shape[0] != a.shape[1]``),
    ``second_sum`` is the sum of ``E[ss']`` over locations.
    """
    y = np.asarray(y, float)
    a = np.asarray(a, float)
    mean = np.asarray(mean, float)
    if mean.shape[0] != a.shape[1]:
        mean = mean.T
    cinv = 1.0 / np.asarray(c_diag, float)
    q, v = y.shape
    t1 = np.einsum("qv,q,qv->", y, cinv, y)
    t2 = np.einsum("qv,q,qv->", y, cinv, a @ mean)
    t3 = np.trace(a.T @ (cinv[:, None] * a) @ second_sum)
    return max(float((t1 - 2.0 * t2 + t3) / (v * q)), _NU_FLOOR)


def update_mog(z_marginals, cond_first, cond_second, var_floor=0.0, previous=None) -> list:
    """Mixture updates from per-location marginals and conditional moments (V x Q' x M).

    Components with no posterior mass keep their previous mean and variance
    (or mean 0, variance ``var_floor`` when there is none).
    """
    zm = np.asarray(z_marginals, float)
    v = zm.shape[0]
    n = zm.sum(axis=0)
    pi = n / v
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = (np.asarray(cond_first) * zm).sum(axis=0) / n
        var = (np.asarray(cond_second) * zm).sum(axis=0) / n - mu ** 2
    out = []
    for q in range(zm.shape[1]):
        empty = n[q] <= 0
        floor = var_floor[q] if np.ndim(var_floor) else var_floor
        mq, vq = mu[q].copy(), var[q].copy()
        if np.any(empty):
            pm = previous[q].means if previous is not None else np.zeros_like(mq)
            pv = previous[q].vars if previous is not None else np.full_like(vq, floor)
            mq[empty], vq[empty] = pm[empty], pv[empty]
        out.append(MoGParams(pi[q], mq, np.maximum(vq, floor), floor))
    return out


# ---------------------------------------------------------------- fits

def _init_theta(y, prior: _Prior, q_prime, nu0_sq, m, seed):
    s0 = prior.s0
    a1_raw = np.linalg.solve(s0 @ s0.T, s0 @ y.T).T
    a1 = orthogonalize(a1_raw, prior.gram)
    # complete to A G A' = I: nuisance columns span the complement of A1 G^1/2
    a2 = (null_space((a1 @ _sym_sqrt(prior.gram)[0]).T) if q_prime
          else np.zeros((a1.shape[0], 0)))
    mogs = []
    if q_prime:
        s2 = a2.T @ y
        # the null space basis is only defined up to sign; fix it by skewness
        for j in range(q_prime):
            if np.mean((s2[j] - s2[j].mean()) ** 3) < 0:
                a2[:, j] *= -1
                s2[j] *= -1
            mogs.append(fit_mog(s2[j], m, seed=seed + j))
    return ThetaState(a1, a2, float(nu0_sq), mogs)


def _run_em(y, c_diag, prior: _Prior, theta: ThetaState, space, opts: EMOptions):
    l = prior.s0.shape[0]
    metric = prior.metric(theta.q_prime)
    trace = []
    prev_mean = None
    converged = False
    floors = [p.var_floor for p in theta.mog]
    it = 0
    for it in range(1, opts.max_iters + 1):
        mom, second_sum = _estep(y, theta, prior.s0, prior.var, c_diag, space, keep=False)
        trace.append(float(mom.loglik.sum()))
        mean = mom.mean.T
        a = update_mixing(y @ mom.mean, second_sum, opts.orthogonalize, metric)
        nu = update_noise_var(y, c_diag, a, mean, second_sum)
        new = ThetaState(a[:, :l], a[:, l:], nu, theta.mog)
        if theta.q_prime:
            new.mog = update_mog(mom.z_marginals, mom.cond_first, mom.cond_second,
                                 np.array(floors), theta.mog)
        d_nu = abs(nu - theta.nu0_sq) / theta.nu0_sq
        d_mean = np.inf if prev_mean is None else np.abs(mean[:l] - prev_mean).max()
        theta, prev_mean = new, mean[:l]
        if d_mean < opts.tol_mean and d_nu < opts.tol_nu:
            converged = True
            break
    mom, _ = _estep(y, theta, prior.s0, prior.var, c_diag, space)
    trace.append(float(mom.loglik.sum()))
    if not converged:
        warnings.warn(f"EM stopped after {opts.max_iters} iterations", NonConvergence, stacklevel=3)
    return theta, mom, trace, it, converged


def _mixture_fit(y: ReducedData, template: Template, q_prime, opts, kind):
    opts = opts or EMOptions()
    q_prime = int(q_prime)
    if y.order != template.l + q_prime:
        raise DimensionMismatch(f"order {y.order} != L + Q' = {template.l} + {q_prime}")
    if y.y.shape[1] != template.v:
        raise DimensionMismatch(f"data have {y.y.shape[1]} locations, template {template.v}")
    space = enumerate_space(q_prime, opts.m, kind, opts.cap) if q_prime else _empty_space(opts.m)
    prior = _standardize(template)
    start = time.perf_counter()
    theta = _init_theta(y.y, prior, q_prime, y.sigma2, opts.m, opts.seed)
    theta, mom, trace, it, conv = _run_em(y.y, y.c_diag, prior, theta, space, opts)
    timing = {"em": time.perf_counter() - start}
    l = template.l
    var = np.diagonal(mom.second, axis1=1, axis2=2)[:, :l].T - mom.mean[:, :l].T ** 2
    t_mean, t_var = prior.to_template_units(mom.mean[:, :l].T, np.maximum(var, 0.0))
    return FitResult(t_mean, t_var, mom.mean[:, l:].T, theta, it, trace, conv, y.order, q_prime,
                     timing=timing)


def fit_exact(y: ReducedData, template: Template, q_prime: int, opts: EMOptions = None) -> FitResult:
    """EM over the full latent space (all M^Q' configurations)."""
    return _mixture_fit(y, template, q_prime, opts, "full")


def fit_subspace(y: ReducedData, template: Template, q_prime: int, opts: EMOptions = None) -> FitResult:
    """EM restricted to configurations with at most one activated nuisance component."""
    return _mixture_fit(y, template, q_prime, opts, "subspace")


# ---------------------------------------------------------------- fast EM

def fast_posterior(y, a1, nu0_sq, c_diag, s0, var):
    """Closed-form Gaussian posterior of the template sources (no nuisance in the model).

    Returns ``(mean L x V, cov V x L x L)``.
    """
    y = as_matrix(y)
    cinv = 1.0 / np.asarray(c_diag, float)
    g = a1.T @ (cinv[:, None] * a1) / nu0_sq
    prec = np.broadcast_to(g, (y.shape[1],) + g.shape).copy()
    l = g.shape[0]
    prec[:, np.arange(l), np.arange(l)] += 1.0 / var.T
    prec, _ = _chol_logdet(prec)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    b = (a1.T @ (cinv[:, None] * y)).T / nu0_sq + (s0 / var).T
    mean = np.einsum("vij,vj->iv", cov, b)
    return mean, cov


def _fast_loglik(y, a1, nu0_sq, c_diag, s0, var):
    # y ~ N(A1 s0, A1 diag(var) A1' + nu0^2 C), one location at a time via the mean/cov form
    q, v = y.shape
    total = 0.0
    r = nu0_sq * np.asarray(c_diag, float)
    for j in range(v):
        cov = (a1 * var[:, j]) @ a1.T + np.diag(r)
        resid = y[:, j] - a1 @ s0[:, j]
        chol = np.linalg.cholesky(cov)
        w = np.linalg.solve(chol, resid)
        total += -0.5 * (q * LOG_2PI + 2 * np.log(np.diag(chol)).sum() + w @ w)
    return total


def fast_em_core(y, c_diag, s0, var, a1, nu0_sq, opts: EMOptions = None, loglik=False,
                 metric=None):
    """EM for the nuisance-free model with a closed-form posterior at each location.

    ``s0`` and ``var`` are the (standardized) prior mean and variance maps and
    ``metric`` the source second-moment matrix used by the orthogonalization
    (computed from them when omitted).
    Returns ``(a1, nu0_sq, mean, cov, n_iters, converged, trace)``.
    """
    opts = opts or EMOptions()
    y = as_matrix(y)
    l = s0.shape[0]
    if metric is None:
        metric = (s0 @ s0.T + np.diag(var.sum(axis=1))) / s0.shape[1]
    prev = None
    converged = False
    trace = []
    it = 0
    for it in range(1, opts.max_iters + 1):
        mean, cov = fast_posterior(y, a1, nu0_sq, c_diag, s0, var)
        if loglik:
            trace.append(_fast_loglik(y, a1, nu0_sq, c_diag, s0, var))
        second_sum = mean @ mean.T + cov.sum(axis=0)
        a1_new = update_mixing(y @ mean.T, second_sum, opts.orthogonalize, metric)
        nu = update_noise_var(y, c_diag, a1_new, mean, second_sum)
        d_nu = abs(nu - nu0_sq) / nu0_sq
        d_mean = np.inf if prev is None else np.abs(mean - prev).max()
        a1, nu0_sq, prev = a1_new, nu, mean
        if d_mean < opts.tol_mean and d_nu < opts.tol_nu:
            converged = True
            break
    mean, cov = fast_posterior(y, a1, nu0_sq, c_diag, s0, var)
    if loglik:
        trace.append(_fast_loglik(y, a1, nu0_sq, c_diag, s0, var))
    if not converged:
        warnings.warn(f"fast EM stopped after {opts.max_iters} iterations", NonConvergence,
                      stacklevel=2)
    assert mean.shape[0] == l
    return a1, nu0_sq, mean, cov, it, converged, trace


def _nuisance_order(resid_x, q_total, l):
    if q_total <= l:
        return 0
    lam = np.clip(np.linalg.eigvalsh(resid_x @ resid_x.T / resid_x.shape[1])[::-1], 0.0, None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowRankWarning)
        est = estimate_order(lam, resid_x.shape[1])
    return int(min(est, q_total - l))


def _remove_nuisance(x, red: ReducedData, y_resid, q_prime, opts):
    """Infomax on the reduced residual; returns (cleaned T x V data, nuisance maps)."""
    ica = infomax_restarts(y_resid, q_prime, n_runs=opts.n_ica_runs, seed=opts.seed)
    nuis_y = ica.mixing @ ica.sources
    return x - red.backproject(nuis_y), ica.sources


def nuisance_order(x, template: Template):
    """Order selection step of :func:`fit_fast` on its own.

    Returns ``(Q, Q')``: the total order of the centered/scaled data and the
    number of nuisance components found in the dual-regression residual.
    """
    x = center_scale(x).data
    red = prewhiten(x, "auto")
    if red.order < template.l:
        return red.order, 0
    dr = dual_regress(red.y, _standardize(template).s0)
    return red.order, _nuisance_order(x - red.backproject(dr.mixing @ dr.sources), red.order,
                                      template.l)


def fit_fast(x, template: Template, opts: EMOptions = None) -> FitResult:
    """Two-stage fit: remove Infomax nuisance components, then EM for the template sources."""
    opts = opts or EMOptions()
    clock = time.perf_counter()
    timing = {}
    x = center_scale(x).data
    if x.shape[1] != template.v:
        raise DimensionMismatch(f"data have {x.shape[1]} locations, template {template.v}")
    l = template.l
    prior = _standardize(template)
    flags = []
    red = prewhiten(x, "auto")
    q_total = red.order
    if red.low_rank_warning:
        flags.append("low_rank")

    if q_total < l:
        warnings.warn(f"estimated order {q_total} < L = {l}; fitting without nuisance",
                      LowOrder, stacklevel=2)
        flags.append("low_order")
        q_prime = 0
        x_clean = x
        nuis = None
    else:
        dr = dual_regress(red.y, prior.s0)
        y_res = red.y - dr.mixing @ dr.sources
        if opts.q_prime is not None:
            q_prime = int(opts.q_prime)
            if q_prime > q_total - l:
                red = prewhiten(x, l + q_prime)
                dr = dual_regress(red.y, prior.s0)
                y_res = red.y - dr.mixing @ dr.sources
        else:
            q_prime = _nuisance_order(x - red.backproject(dr.mixing @ dr.sources), q_total, l)
        if q_prime > 0:
            x_clean, nuis = _remove_nuisance(x, red, y_res, q_prime, opts)
        else:
            x_clean, nuis = x, None
    timing["nuisance"] = time.perf_counter() - clock

    clock = time.perf_counter()
    red_l = red if (q_prime == 0 and red.order == l) else prewhiten(x_clean, l)
    theta0 = _init_theta(red_l.y, prior, 0, red_l.sigma2, opts.m, opts.seed)
    a1, nu, mean, cov, it, conv, trace = fast_em_core(
        red_l.y, red_l.c_diag, prior.s0, prior.var, theta0.a1, theta0.nu0_sq, opts)
    timing["em"] = time.perf_counter() - clock

    if opts.reestimate_nuisance and q_prime > 0:
        clock = time.perf_counter()
        resid_x = x - red_l.backproject(a1 @ mean)
        y_res = red.h @ resid_x
        x_clean, nuis = _remove_nuisance(x, red, y_res, q_prime, opts)
        red_l = prewhiten(x_clean, l)
        a1, nu, mean, cov, it2, conv, trace = fast_em_core(
            red_l.y, red_l.c_diag, prior.s0, prior.var, a1, nu, opts)
        it += it2
        flags.append("reestimated")
        timing["reestimate"] = time.perf_counter() - clock

    var = np.diagonal(cov, axis1=1, axis2=2).T
    t_mean, t_var = prior.to_template_units(mean, var)
    theta = ThetaState(a1, np.zeros((l, 0)), nu, [])
    return FitResult(t_mean, t_var, nuis, theta, it, trace, conv, q_total, q_prime, flags, timing)


def dual_regression_fit(x, template: Template):
    """Baseline: center/scale, then dual regression against the centered template mean."""
    x = center_scale(x).data
    return dual_regress(x, center_rows(template.mean))
