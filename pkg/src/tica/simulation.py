"""Synthetic benchmarks on a 46 x 55 grid: group maps, subject maps, time courses and data."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, PerturbationOutOfGrid
from .matrix import as_matrix
from .template import Template

GRID = (46, 55)
FWHM_TO_SD = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
SNR_CAP = 1e6


def rng_for(seed, *stream):
    """Independent generator for (seed, stream...) via a SeedSequence."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(s) for s in stream]))


@dataclass
class SourceSpec:
    centers: list
    amplitudes: list
    fwhm: list
    roles: list = None
    grid: tuple = GRID

    def __post_init__(self):
        n = len(self.centers)
        if self.roles is None:
            self.roles = ["template"] * n
        if not (len(self.amplitudes) == len(self.fwhm) == len(self.roles) == n):
            raise DegenerateInput("source spec lists differ in length")
        for (r, c), f in zip(self.centers, self.fwhm):
            if not (0 <= r < self.grid[0] and 0 <= c < self.grid[1]):
                raise PerturbationOutOfGrid(f"center {(r, c)} outside grid {self.grid}")
            if f <= 0:
                raise DegenerateInput("fwhm must be positive")

    @property
    def n(self) -> int:
        return len(self.centers)

    def maps(self) -> np.ndarray:
        return np.array([gaussian_source(self.grid, c, a, f)
                         for c, a, f in zip(self.centers, self.amplitudes, self.fwhm)])

    def select(self, role) -> "SourceSpec":
        idx = [i for i, r in enumerate(self.roles) if r == role]
        return SourceSpec([self.centers[i] for i in idx], [self.amplitudes[i] for i in idx],
                          [self.fwhm[i] for i in idx], [role] * len(idx), self.grid)


@dataclass
class SubjectData:
    sources: np.ndarray
    timecourses: np.ndarray
    observed: np.ndarray
    snr: float
    sigma_err: float = 0.0


def gaussian_source(grid, center, amplitude, fwhm) -> np.ndarray:
    """Gaussian bump flattened row-major; values below 1e-3 of the peak are set to 0."""
    if fwhm <= 0:
        raise DegenerateInput("fwhm must be positive")
    rows, cols = np.indices(tuple(grid))
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    sd = fwhm * FWHM_TO_SD
    prof = np.exp(-d2 / (2.0 * sd ** 2))
    prof[prof < 1e-3] = 0.0
    return (amplitude * prof).ravel()


def sim_ab_spec() -> SourceSpec:
    """Base features shared by Simulations A and B."""
    return SourceSpec(centers=[(12, 15), (35, 40), (15, 40)], amplitudes=[5.0, 5.0, 5.0],
                      fwhm=[30.0, 40.0, 45.0])


def sim_a_template(prop: float = 0.5, spec: SourceSpec = None) -> Template:
    """True Simulation-A template: group maps with variance ``prop * |mean|``."""
    mean = (spec or sim_ab_spec()).maps()
    return Template.from_truth(mean, prop * np.abs(mean))


def simc_spec() -> SourceSpec:
    """Nine sources on a 3 x 3 lattice, the first six template and the last three nuisance.

    The nuisance sources are brighter than the template ones, so ignoring
    them (as dual regression does) is costly.
    """
    rows, cols = (8, 23, 38), (9, 27, 45)
    centers = [(r, c) for r in rows for c in cols]
    return SourceSpec(centers=centers, amplitudes=[3.0] * 6 + [8.0] * 3, fwhm=[12.0] * 9,
                      roles=["template"] * 6 + ["nuisance"] * 3)


def sim_nuisance_spec() -> SourceSpec:
    """Two template and two nuisance sources (the unknown-sources setting).

    The extra nuisance source is deliberately weak so that short scans tend
    to miss it.
    """
    base = sim_ab_spec()
    return SourceSpec(centers=base.centers + [(38, 10)], amplitudes=base.amplitudes + [1.0],
                      fwhm=base.fwhm + [25.0],
                      roles=["template", "template", "nuisance", "nuisance"])


def spec_template(spec: SourceSpec, prop: float = 0.5) -> Template:
    mean = spec.maps()
    return Template.from_truth(mean, prop * np.abs(mean))


def sample_subject_a(template: Template, seed=0) -> np.ndarray:
    """Subject maps as template mean plus independent N(0, var) deviations."""
    rng = np.random.default_rng(seed)
    var = np.asarray(template.var_between, float)
    return template.mean + np.sqrt(var) * rng.standard_normal(var.shape)


def sample_subject_b(base: SourceSpec, perturb_sd=(1.0, 5.0, 1.0), seed=0, max_attempts=10) -> np.ndarray:
    """Subject maps from randomly perturbed amplitude, FWHM and (rounded) location."""
    rng = np.random.default_rng(seed)
    sd_amp, sd_fwhm, sd_loc = perturb_sd
    maps = []
    for center, amp, fwhm in zip(base.centers, base.amplitudes, base.fwhm):
        for _ in range(max_attempts):
            a = amp + sd_amp * rng.standard_normal()
            f = fwhm + sd_fwhm * rng.standard_normal()
            shift = np.rint(sd_loc * rng.standard_normal(2)).astype(int)
            c = (center[0] + shift[0], center[1] + shift[1])
            if 0 <= c[0] < base.grid[0] and 0 <= c[1] < base.grid[1] and f > 0:
                break
        else:
            raise PerturbationOutOfGrid(f"could not place source at {center} in {max_attempts} tries")
        maps.append(gaussian_source(base.grid, c, a, f))
    return np.array(maps)


def sim_b_template(base: SourceSpec = None, n_mc: int = 10000, seed=0,
                   perturb_sd=(1.0, 5.0, 1.0)) -> Template:
    """Monte Carlo mean and variance of Simulation-B subject maps."""
    base = base or sim_ab_spec()
    total = np.zeros((base.n, base.grid[0] * base.grid[1]))
    total_sq = np.zeros_like(total)
    for i in range(n_mc):
        s = sample_subject_b(base, perturb_sd, seed=rng_for(seed, 99, i))
        total += s
        total_sq += s * s
    mean = total / n_mc
    var = np.maximum(total_sq / n_mc - mean ** 2, 0.0) * n_mc / (n_mc - 1)
    return Template.from_truth(mean, var)


def gen_timecourses(t: int, q: int, seed=0, phi: float = 0.3) -> np.ndarray:
    """``q`` standardized AR(1) series with logistic innovations, shape T x q."""
    if t < 10:
        raise DegenerateInput("need at least 10 time points")
    rng = np.random.default_rng(seed)
    burn = 50
    innov = rng.logistic(size=(t + burn, q))
    out = np.empty_like(innov)
    out[0] = innov[0]
    for i in range(1, t + burn):
        out[i] = phi * out[i - 1] + innov[i]
    out = out[burn:]
    out -= out.mean(axis=0)
    out /= out.std(axis=0)
    return out


def signal_sd(sources, timecourses, intensity=None) -> float:
    """Signal SD: per source, the temporal variance of its contribution averaged over
    its top 1% voxels by |intensity|; then averaged over sources.

    ``intensity`` ranks the voxels and defaults to ``sources`` itself.
    """
    sources = as_matrix(sources)
    intensity = sources if intensity is None else as_matrix(intensity)
    if intensity.shape != sources.shape:
        raise DegenerateInput("intensity maps must match the sources in shape")
    tc_var = np.var(timecourses, axis=0)
    per = []
    for q in range(sources.shape[0]):
        mag = np.abs(intensity[q])
        k = max(1, int(np.ceil(0.01 * mag.size)))
        top = np.argsort(mag, kind="stable")[-k:]
        per.append(tc_var[q] * np.mean(sources[q, top] ** 2))
    return float(np.sqrt(np.mean(per)))


def gen_observed(sources, timecourses, snr: float, seed=0, intensity=None) -> SubjectData:
    """Mix sources by their time courses and add iid Gaussian noise at the requested SNR.

    ``intensity`` optionally supplies the maps used to pick the top-1% voxels
    (for example the group maps); by default the sources themselves are used.
    """
    sources = as_matrix(sources)
    timecourses = as_matrix(timecourses)
    if snr <= 0:
        raise DegenerateInput("snr must be positive")
    if not np.any(sources):
        raise DegenerateInput("all sources are zero")
    snr = min(float(snr), SNR_CAP)
    sig = signal_sd(sources, timecourses, intensity)
    sigma_err = sig / snr
    rng = np.random.default_rng(seed)
    signal = timecourses @ sources
    observed = signal + sigma_err * rng.standard_normal(signal.shape)
    return SubjectData(sources, timecourses, observed, snr, sigma_err)


@dataclass
class SimConfig:
    sim: str = "A"
    n_train: int = 0
    n_test: int = 10
    t_train: int = 800
    t_test: int = 200
    snr: float = None
    seed: int = 0
    m: int = 3
    q_prime_policy: str = "estimate"
    prop: float = 0.5
    sessions: int = 1
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sim not in SIMS:
            raise ValueError(f"sim must be one of {sorted(SIMS)}, got {self.sim!r}")
        if self.snr is None:
            self.snr = 1.0 if self.sim == "C" else 0.5


def _subject_maps(cfg: SimConfig, truth: Template, spec: SourceSpec, role_stream, idx):
    seed = rng_for(cfg.seed, role_stream, idx)
    if cfg.sim == "B":
        return sample_subject_b(spec, seed=seed)
    return sample_subject_a(truth, seed=seed)


def sim_setup(cfg: SimConfig):
    """Returns ``(full spec, full-source template, number of template components L)``."""
    if cfg.sim == "A":
        spec = sim_ab_spec()
        return spec, spec_template(spec, cfg.prop), spec.n
    if cfg.sim == "B":
        spec = sim_ab_spec()
        return spec, sim_b_template(spec, n_mc=cfg.extras.get("n_mc", 10000), seed=cfg.seed), spec.n
    spec = simc_spec() if cfg.sim == "C" else sim_nuisance_spec()
    l = sum(r == "template" for r in spec.roles)
    return spec, spec_template(spec, cfg.prop), l


def simulate_subject(cfg: SimConfig, truth: Template, spec: SourceSpec, group: str, idx: int,
                     t: int, n_sessions: int = 1):
    """Maps plus ``n_sessions`` independent scans of one subject."""
    stream = {"train": 1, "test": 2}[group]
    maps = _subject_maps(cfg, truth, spec, stream, idx)
    # voxel ranking for the SNR statistic: group maps when subjects are noisy
    # deviations from them (A, C, N); the subject's own smooth maps for B
    ref = maps if cfg.sim == "B" else truth.mean
    scans = []
    for j in range(n_sessions):
        tc = gen_timecourses(t, maps.shape[0], seed=rng_for(cfg.seed, stream, idx, 10 + j))
        scans.append(gen_observed(maps, tc, cfg.snr, seed=rng_for(cfg.seed, stream, idx, 20 + j),
                                  intensity=ref))
    return maps, scans


SIMS = {"A", "B", "C", "N"}
