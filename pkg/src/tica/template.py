"""Empirical population prior: per-component mean and between-subject variance maps."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dualreg import dual_regress
from .errors import DegenerateInput, FormatError, InconsistentCohort, MissingArtifact, TicaError
from .matrix import as_matrix, center_rows, center_scale, ensure_dir, read_matrix, split_sessions, write_matrix

log = logging.getLogger(__name__)

_MAPS = ("mean", "var_between", "var_total", "var_noise")


@dataclass
class Template:
    mean: np.ndarray         # L x V
    var_between: np.ndarray  # L x V
    var_total: np.ndarray
    var_noise: np.ndarray
    n_subjects: int = 0

    @property
    def l(self) -> int:  # noqa: E743
        return self.mean.shape[0]

    @property
    def v(self) -> int:
        return self.mean.shape[1]

    @classmethod
    def from_truth(cls, mean, var_between) -> "Template":
        """A known (noise-free) template, e.g. the generating prior of a simulation."""
        mean = as_matrix(mean)
        var = as_matrix(var_between)
        return cls(mean, var, var.copy(), np.zeros_like(var), 0)

    def prior_variance(self) -> np.ndarray:
        """Between-subject variance with exact zeros replaced by a small positive floor.

        Floor per component: 1e-6 times the median of its total-variance map,
        falling back to the row maximum (then to 1e-12) when the median is 0.
        """
        var = np.array(self.var_between, dtype=float)
        tot = np.maximum(self.var_total, var)
        for q in range(var.shape[0]):
            ref = np.median(tot[q])
            if not ref > 0:
                ref = tot[q].max()
            eps = 1e-6 * ref if ref > 0 else 1e-12
            var[q] = np.maximum(var[q], eps)
        return var

    def save(self, directory) -> Path:
        directory = ensure_dir(directory)
        meta = {"l": self.l, "v": self.v, "n_subjects": int(self.n_subjects), "version": 1}
        (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        for name in _MAPS:
            write_matrix(getattr(self, name), directory / f"{name}.bin", "bin")
        return directory

    @classmethod
    def load(cls, directory) -> "Template":
        directory = Path(directory)
        if not (directory / "meta.json").exists():
            raise MissingArtifact(f"no template at {directory}")
        meta = json.loads((directory / "meta.json").read_text())
        maps = {name: read_matrix(directory / f"{name}.bin", "bin") for name in _MAPS}
        for name, m in maps.items():
            if m.shape != (meta["l"], meta["v"]):
                raise FormatError(f"{directory}/{name}.bin has shape {m.shape}, meta says "
                                  f"({meta['l']}, {meta['v']})")
        return cls(n_subjects=int(meta["n_subjects"]), **maps)


def accumulate_estimates(estimates) -> Template:
    """Build a template from ``(subject_id, session, L x V estimate)`` triples.

    Sessions must be 1 and 2 for every subject. Variances use ddof=1; the
    between-subject variance is truncated at zero.
    """
    by_subject = {}
    shape = None
    for sid, session, est in estimates:
        est = as_matrix(est)
        if shape is None:
            shape = est.shape
        elif est.shape != shape:
            raise InconsistentCohort(f"subject {sid}: estimate shape {est.shape} != {shape}")
        if session not in (1, 2):
            raise InconsistentCohort(f"subject {sid}: session must be 1 or 2, got {session}")
        slot = by_subject.setdefault(sid, {})
        if session in slot:
            raise InconsistentCohort(f"subject {sid}: duplicate session {session}")
        slot[session] = est
    for sid, slot in by_subject.items():
        if len(slot) != 2:
            raise InconsistentCohort(f"subject {sid}: missing a session")
    n = len(by_subject)
    if n < 2:
        raise DegenerateInput(f"template estimation needs at least 2 subjects, got {n}")

    order = sorted(by_subject, key=lambda k: (str(type(k)), k))
    s1 = np.stack([by_subject[k][1] for k in order])
    s2 = np.stack([by_subject[k][2] for k in order])
    mean = (s1.sum(axis=0) + s2.sum(axis=0)) / (2 * n)
    var_total = 0.5 * (s1.var(axis=0, ddof=1) + s2.var(axis=0, ddof=1))
    var_noise = 0.5 * (s2 - s1).var(axis=0, ddof=1)
    var_between = np.maximum(var_total - var_noise, 0.0)
    return Template(mean, var_between, var_total, var_noise, n)


def _subject_estimates(sid, sessions, s_grp, scaling, prescaled):
    out = []
    for j, x in enumerate(sessions, start=1):
        try:
            scaled = x if prescaled else center_scale(x, scaling=scaling).data
            out.append((sid, j, dual_regress(scaled, s_grp).sources))
        except TicaError as exc:
            raise type(exc)(f"subject {sid}: {exc}") from exc
    return out


def _prepare(sid, item, split, scaling):
    if split == "halve":
        try:
            return split_sessions(center_scale(item, scaling=scaling).data)
        except TicaError as exc:
            raise type(exc)(f"subject {sid}: {exc}") from exc
    if split == "provided_sessions":
        if len(item) != 2:
            raise InconsistentCohort(f"subject {sid}: expected two sessions")
        return tuple(as_matrix(s) for s in item)
    raise ValueError(f"unknown split mode {split!r}")


def build_template(cohort, s_grp, split="halve", scaling="temporal_sd", threads=1) -> Template:
    """Estimate a template from a cohort.

    ``cohort`` is an iterable of T x V arrays (``split="halve"``) or of
    ``(session1, session2)`` pairs (``split="provided_sessions"``). It is
    consumed lazily, so a generator keeps memory bounded. Each session is
    centered/scaled, dual-regressed on the spatially centered ``s_grp`` and
    the resulting maps are pooled by :func:`accumulate_estimates`.
    """
    # the data are spatially centered, so the group maps must be as well
    s_grp = center_rows(s_grp)
    if split not in ("halve", "provided_sessions"):
        raise ValueError(f"unknown split mode {split!r}")
    prescaled = split == "halve"
    estimates = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_subject_estimates, sid, _prepare(sid, item, split, scaling),
                                   s_grp, scaling, prescaled)
                       for sid, item in enumerate(cohort)]
            for f in futures:
                estimates.extend(f.result())
    else:
        for sid, item in enumerate(cohort):
            sessions = _prepare(sid, item, split, scaling)
            estimates.extend(_subject_estimates(sid, sessions, s_grp, scaling, prescaled))
    n = len(estimates) // 2
    if n < 2:
        raise DegenerateInput(f"template estimation needs at least 2 subjects, got {n}")
    return accumulate_estimates(estimates)
