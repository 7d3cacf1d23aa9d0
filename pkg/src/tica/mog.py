"""One-dimensional mixture-of-Gaussians fitting, evaluation and sampling."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateInput, NumericalError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class MoGParams:
    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    var_floor: float = 0.0
    loglik_trace: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_1d(np.asarray(self.means, dtype=float))
        self.vars = np.atleast_1d(np.asarray(self.vars, dtype=float))

    @property
    def m(self) -> int:
        return self.weights.size

    def copy(self) -> "MoGParams":
        return MoGParams(self.weights.copy(), self.means.copy(), self.vars.copy(), self.var_floor)


def _component_logpdf(params, x):
    x = np.asarray(x, dtype=float)[..., None]
    return (np.log(params.weights) - 0.5 * (LOG_2PI + np.log(params.vars))
            - 0.5 * (x - params.means) ** 2 / params.vars)


def mog_logpdf(params: MoGParams, x):
    """``log sum_m pi_m N(x; mu_m, s2_m)``, elementwise over ``x``."""
    out = logsumexp(_component_logpdf(params, x), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mog_loglik(params: MoGParams, samples) -> float:
    return float(np.sum(mog_logpdf(params, np.asarray(samples, dtype=float))))


def _activation_last(params: MoGParams) -> MoGParams:
    order = np.argsort(params.vars, kind="stable")
    return MoGParams(params.weights[order], params.means[order], params.vars[order],
                     params.var_floor, params.loglik_trace)


def fit_mog(samples, m: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-10) -> MoGParams:
    """EM fit of an ``m``-component mixture; the largest-variance component ends up last.

    Initialization splits the sorted samples into ``m`` equal-count groups.
    ``seed`` only jitters group boundaries when samples are tied.
    """
    x = np.asarray(samples, dtype=float).ravel()
    m = int(m)
    if m < 1 or x.size < 10 * m:
        raise DegenerateInput(f"need at least {10 * m} samples for m={m}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite samples")
    total_var = float(x.var())
    var_floor = 1e-6 * total_var if total_var > 0 else 1e-12

    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(x.size), x))
    groups = np.array_split(x[order], m)
    params = MoGParams(
        weights=np.array([g.size for g in groups], float) / x.size,
        means=np.array([g.mean() for g in groups]),
        vars=np.array([max(g.var(), var_floor) for g in groups]),
        var_floor=var_floor,
    )
    if m == 1:
        params.loglik_trace.append(mog_loglik(params, x))
        return params

    prev = -np.inf
    for _ in range(max_iter):
        comp = _component_logpdf(params, x)
        norm = logsumexp(comp, axis=1)
        ll = float(norm.sum())
        if not np.isfinite(ll):
            raise NumericalError("mixture log-likelihood is not finite")
        params.loglik_trace.append(ll)
        if ll - prev <= tol * abs(ll):
            break
        prev = ll
        resp = np.exp(comp - norm[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, np.finfo(float).tiny)
        means = resp.T @ x / nk
        var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk
        params = MoGParams(nk / x.size, means, np.maximum(var, var_floor), var_floor,
                           params.loglik_trace)
    return _activation_last(params)


def sample_mog(params: MoGParams, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    comp = rng.choice(params.m, size=int(n), p=params.weights / params.weights.sum())
    return params.means[comp] + np.sqrt(params.vars[comp]) * rng.standard_normal(int(n))
