"""Command line driver: ``tica simulate|build-template|fit|evaluate``.

Every subcommand works inside one run directory (``--out``). ``simulate``
creates it; later stages read what earlier ones wrote. ``manifest.json``
records a sha256 for every artifact, and inputs are checked against it
before use.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dualreg import dual_regress
from .em import EMOptions, FitResult, fit_exact, fit_fast, fit_subspace, space_size
from .errors import (ConfigError, DegenerateInput, FormatError, IoError, MissingArtifact,
                     NumericalError, SpaceTooLarge, TicaError)
from .matrix import center_rows, center_scale, ensure_dir, read_matrix, write_matrix
from .metrics import corr_activated, icc_map, mse_map, wi2c2
from .reduction import prewhiten
from .simulation import SIMS, SimConfig, sim_setup, simulate_subject
from .template import Template, build_template

log = logging.getLogger("tica")

METHODS = ("dual_regression", "fast", "subspace", "exact")
EXIT = {ConfigError: 2, DegenerateInput: 3, MissingArtifact: 4, IoError: 4, FormatError: 4,
        NumericalError: 5}
CONFIG_FIELDS = {
    "sim": str, "n_train": int, "n_test": int, "t_train": int, "t_test": int, "snr": float,
    "seed": int, "m": int, "q_prime_policy": (str, int), "sessions": int, "prop": float,
    "method": str, "threads": int, "template": str, "n_mc": int, "max_iters": int,
    "reestimate_nuisance": bool,
}


# ---------------------------------------------------------------- config

def load_config(path, overrides) -> dict:
    """Read the JSON config, apply command-line overrides and validate field types."""
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in cfg.items():
        kind = CONFIG_FIELDS.get(key)
        if kind is None:
            raise ConfigError(f"unknown config field {key!r}")
        if isinstance(value, bool) and kind is not bool:
            raise ConfigError(f"config field {key!r} has the wrong type")
        if kind is float and isinstance(value, int):
            continue
        if not isinstance(value, kind):
            raise ConfigError(f"config field {key!r} has the wrong type")
    if cfg.get("sim", "A") not in SIMS:
        raise ConfigError(f"config field 'sim' must be one of {sorted(SIMS)}, got {cfg['sim']!r}")
    if cfg.get("method", "fast") not in METHODS:
        raise ConfigError(f"config field 'method' must be one of {list(METHODS)}")
    policy = cfg.get("q_prime_policy", "estimate")
    if isinstance(policy, str) and policy not in ("estimate", "true"):
        raise ConfigError("config field 'q_prime_policy' must be 'estimate', 'true' or an integer")
    if cfg.get("template", "estimated") not in ("estimated", "true"):
        raise ConfigError("config field 'template' must be 'estimated' or 'true'")
    for key in ("n_test", "t_test", "t_train", "m", "sessions", "threads"):
        if key in cfg and cfg[key] < 1:
            raise ConfigError(f"config field {key!r} must be positive")
    if cfg.get("sessions", 1) > 2:
        raise ConfigError("config field 'sessions' must be 1 or 2")
    return cfg


def sim_config(cfg) -> SimConfig:
    keys = ("sim", "n_train", "n_test", "t_train", "t_test", "snr", "seed", "m", "prop", "sessions")
    sc = SimConfig(**{k: cfg[k] for k in keys if k in cfg})
    sc.q_prime_policy = cfg.get("q_prime_policy", "estimate")
    if "n_mc" in cfg:
        sc.extras["n_mc"] = cfg["n_mc"]
    return sc


# ---------------------------------------------------------------- manifest

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(run):
    return Path(run) / "manifest.json"


def read_manifest(run) -> dict:
    path = _manifest_path(run)
    if not path.exists():
        raise MissingArtifact(f"no manifest.json in {run}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def record(run, paths):
    """Add (or refresh) checksums for ``paths`` in the run manifest."""
    run = Path(run)
    path = _manifest_path(run)
    man = json.loads(path.read_text()) if path.exists() else {"version": 1, "files": {}}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == "timing.csv":
                continue
            man["files"][f.relative_to(run).as_posix()] = sha256(f)
    man["files"] = dict(sorted(man["files"].items()))
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def verify(run, rel_paths):
    """Check that every artifact exists and matches its manifest checksum."""
    files = read_manifest(run)["files"]
    for rel in rel_paths:
        full = Path(run) / rel
        if not full.exists():
            raise MissingArtifact(f"missing artifact: {full}")
        if rel not in files:
            raise MissingArtifact(f"artifact not listed in manifest: {rel}")
        if sha256(full) != files[rel]:
            raise FormatError(f"checksum mismatch for {rel}: the file was modified")


def _listed(run, prefix):
    files = read_manifest(run)["files"]
    return sorted(k for k in files if k.startswith(prefix))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "" if x is None else f"{float(x):.10g}"


def _run_config(run) -> dict:
    path = Path(run) / "config.json"
    if not path.exists():
        raise MissingArtifact(f"no config.json in {run}; run 'tica simulate' first")
    verify(run, ["config.json"])
    return json.loads(path.read_text())


def subject_key(i, j):
    return f"s{i:04d}_{j}"


# ---------------------------------------------------------------- simulate

def cmd_simulate(cfg, run) -> Path:
    sc = sim_config(cfg)
    run = ensure_dir(run)
    spec, truth, l = sim_setup(sc)
    written = []
    saved = dict(cfg)
    saved.setdefault("sim", sc.sim)
    saved.update({"snr": sc.snr, "l": l, "roles": spec.roles, "n_nuisance": spec.n - l})
    (run / "config.json").write_text(json.dumps(saved, indent=2, sort_keys=True) + "\n")
    written.append(run / "config.json")
    tpl = Template(truth.mean[:l], truth.var_between[:l], truth.var_total[:l],
                   truth.var_noise[:l], truth.n_subjects)
    written.append(tpl.save(run / "truth" / "template"))
    for i in range(sc.n_train):
        _, scans = simulate_subject(sc, truth, spec, "train", i, sc.t_train)
        path = ensure_dir(run / "cohort" / "train") / f"s{i:04d}.bin"
        write_matrix(scans[0].observed, path)
        written.append(path)
    for i in range(sc.n_test):
        maps, scans = simulate_subject(sc, truth, spec, "test", i, sc.t_test, sc.sessions)
        path = ensure_dir(run / "truth" / "test") / f"s{i:04d}.bin"
        write_matrix(maps, path)
        written.append(path)
        for j, scan in enumerate(scans, start=1):
            path = ensure_dir(run / "cohort" / "test") / f"{subject_key(i, j)}.bin"
            write_matrix(scan.observed, path)
            written.append(path)
    log.info("simulated %d training and %d test subjects in %s", sc.n_train, sc.n_test, run)
    record(run, written)
    return run


# ---------------------------------------------------------------- build-template

def cmd_build_template(cfg, run) -> Path:
    run = Path(run)
    _run_config(run)
    train = _listed(run, "cohort/train/")
    verify(run, train + _listed(run, "truth/template/"))
    if len(train) < 2:
        raise DegenerateInput(f"template estimation needs at least 2 training subjects, got {len(train)}")
    truth = Template.load(run / "truth" / "template")
    cohort = (read_matrix(run / rel) for rel in train)
    tpl = build_template(cohort, truth.mean, threads=cfg.get("threads", 1))
    out = tpl.save(run / "template")
    rows = []
    for q in range(tpl.l):
        rows.append([q, _fmt(np.corrcoef(tpl.mean[q], truth.mean[q])[0, 1]),
                     _fmt(np.corrcoef(tpl.var_between[q], truth.var_between[q])[0, 1])
                     if np.ptp(truth.var_between[q]) > 0 else ""])
    write_csv(out / "summary.csv", ["component", "mean_corr", "var_corr"], rows)
    log.info("template from %d subjects written to %s", len(train), out)
    record(run, [out])
    return out


# ---------------------------------------------------------------- fit

def _template_for(run, cfg):
    choice = cfg.get("template", "estimated")
    rel = "template/" if choice == "estimated" else "truth/template/"
    files = _listed(run, rel)
    if not files:
        raise MissingArtifact(f"no {choice} template in {run}; run 'tica build-template' first")
    verify(run, files)
    return Template.load(run / rel)


def _q_prime(cfg, saved, template):
    policy = cfg.get("q_prime_policy", saved.get("q_prime_policy", "estimate"))
    if policy == "estimate":
        return None
    if policy == "true":
        return int(saved.get("n_nuisance", 0))
    return int(policy)


def _fit_one(args):
    """Fit one scan; returns (key, payload or error, timing). Runs in worker processes."""
    key, path, method, template, opts, q_prime = args
    x = read_matrix(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if method == "dual_regression":
                start = time.perf_counter()
                src = dual_regress(center_scale(x).data, center_rows(template.mean)).sources
                return key, src, {"dual_regression": time.perf_counter() - start}
            if method == "fast":
                res = fit_fast(x, template, opts)
                return key, res, res.timing
            data = center_scale(x).data
            if q_prime is None:
                red = prewhiten(data, "auto")
                qp = max(red.order - template.l, 0)
                if red.order != template.l + qp:
                    red = prewhiten(data, template.l + qp)
            else:
                qp = q_prime
                red = prewhiten(data, template.l + qp)
            if qp:
                space_size_check(qp, opts.m, method, opts.cap)
            fit = fit_exact if method == "exact" else fit_subspace
            res = fit(red, template, qp, opts)
            return key, res, res.timing
    except TicaError as exc:
        return key, exc, {}


def space_size_check(q_prime, m, method, cap):
    kind = "full" if method == "exact" else "subspace"
    n = space_size(q_prime, m, kind)
    if n > cap:
        raise SpaceTooLarge(f"{method} fit with M={m}, Q'={q_prime} needs {n} configurations "
                            f"(cap {cap})")


def cmd_fit(cfg, run) -> Path:
    run = Path(run)
    saved = _run_config(run)
    method = cfg.get("method", "fast")
    opts = EMOptions(m=cfg.get("m", saved.get("m", 3)), seed=cfg.get("seed", saved.get("seed", 0)),
                     max_iters=cfg.get("max_iters", 100),
                     reestimate_nuisance=cfg.get("reestimate_nuisance", False))
    template = _template_for(run, cfg)
    q_prime = _q_prime(cfg, saved, template)
    if method == "fast":
        opts.q_prime = q_prime
    elif method in ("exact", "subspace") and q_prime:
        # refuse before any data are touched
        space_size_check(q_prime, opts.m, method, opts.cap)
    scans = _listed(run, "cohort/test/")
    if not scans:
        raise MissingArtifact(f"no test cohort in {run}")
    verify(run, scans)
    out = ensure_dir(run / "fits" / method)
    jobs = [(Path(rel).stem, run / rel, method, template, opts, q_prime) for rel in scans]
    threads = cfg.get("threads", 1)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(job) for job in jobs]

    timing_rows, failures, written = [], [], []
    for key, res, timing in results:
        if isinstance(res, TicaError):
            log.error("subject %s failed: %s", key, res)
            failures.append((key, type(res).__name__, str(res)))
            continue
        if method == "dual_regression":
            path = out / f"{key}.bin"
            write_matrix(res, path)
        else:
            path = res.save(out / key)
        written.append(path)
        for stage, secs in timing.items():
            timing_rows.append([key, stage, f"{secs:.6f}"])
    write_csv(out / "timing.csv", ["subject", "stage", "seconds"], timing_rows)
    write_csv(out / "failures.csv", ["subject", "error", "message"], failures)
    written.append(out / "failures.csv")
    record(run, written)
    log.info("%s: %d fitted, %d failed", method, len(results) - len(failures), len(failures))
    if failures and len(failures) == len(results):
        first = next(res for _, res, _ in results)
        raise first
    return out


# ---------------------------------------------------------------- evaluate

def _load_estimate(run, method, key):
    if method == "dual_regression":
        return read_matrix(run / "fits" / method / f"{key}.bin")
    return FitResult.load(run / "fits" / method / key)


def cmd_evaluate(cfg, run) -> Path:
    run = Path(run)
    saved = _run_config(run)
    methods = [m for m in METHODS if (run / "fits" / m).is_dir()]
    if cfg.get("method"):
        methods = [cfg["method"]]
    if not methods or not all((run / "fits" / m).is_dir() for m in methods):
        raise MissingArtifact(f"no fit artifacts under {run / 'fits'}; run 'tica fit' first")
    truth_files = _listed(run, "truth/")
    verify(run, truth_files)
    true_tpl = Template.load(run / "truth" / "template")
    l = true_tpl.l
    n_test = int(saved.get("n_test", 10))
    sessions = int(saved.get("sessions", 1))
    sim = saved.get("sim", "A")
    n_nuis = int(saved.get("n_nuisance", 0))
    out = ensure_dir(run / "reports")
    summary, per_subject, order_rows, reliability = [], [], [], []

    for method in methods:
        fit_files = _listed(run, f"fits/{method}/")
        if not fit_files:
            raise MissingArtifact(f"fits/{method} is not listed in the manifest")
        verify(run, fit_files)
        est = {}
        for i in range(n_test):
            for j in range(1, sessions + 1):
                key = subject_key(i, j)
                exists = (run / "fits" / method / key).exists() or \
                    (run / "fits" / method / f"{key}.bin").exists()
                if not exists:
                    log.warning("%s: no estimate for %s", method, key)
                    continue
                est[key] = _load_estimate(run, method, key)
        maps_of = {k: (v if isinstance(v, np.ndarray) else v.template_mean) for k, v in est.items()}
        corr = np.full((n_test, l), np.nan)
        est_stack, true_stack = [], []
        for i in range(n_test):
            key = subject_key(i, 1)
            if key not in maps_of:
                continue
            truth = read_matrix(run / "truth" / "test" / f"s{i:04d}.bin")[:l]
            mask_src = truth if sim == "B" else true_tpl.mean
            for q in range(l):
                corr[i, q] = corr_activated(maps_of[key][q], truth[q], mask_src[q] != 0)
                per_subject.append([method, saved.get("t_test", ""), i, q, _fmt(corr[i, q])])
            est_stack.append(maps_of[key])
            true_stack.append(truth)
            fit = est[key]
            if not isinstance(fit, np.ndarray) and method != "dual_regression":
                qp = fit.q_prime
                status = "correct" if qp == n_nuis else ("under" if qp < n_nuis else "over")
                order_rows.append([method, i, fit.order, qp, n_nuis, status])
        mse = mse_map(est_stack, true_stack) if len(est_stack) >= 2 else None
        if mse is not None:
            write_matrix(mse, out / f"mse_{method}.bin")
        w = [None] * l
        if sessions == 2:
            pairs = [(maps_of[subject_key(i, 1)], maps_of[subject_key(i, 2)]) for i in range(n_test)
                     if subject_key(i, 1) in maps_of and subject_key(i, 2) in maps_of]
            rep = icc_map([p[0] for p in pairs], [p[1] for p in pairs])
            w = wi2c2(rep, true_tpl.mean)
            write_matrix(rep.icc, out / f"icc_{method}.bin")
            for q in range(l):
                reliability.append([method, q, _fmt(w[q])])
        for q in range(l):
            summary.append([method, saved.get("t_test", ""), q, _fmt(np.nanmedian(corr[:, q])),
                            _fmt(mse[q].mean() if mse is not None else None), _fmt(w[q])])

    write_csv(out / "summary.csv", ["method", "t", "component", "median_corr", "mean_mse", "wi2c2"],
              summary)
    write_csv(out / "correlations.csv", ["method", "t", "subject", "component", "corr"], per_subject)
    write_csv(out / "order.csv", ["method", "subject", "order", "q_prime", "true_q_prime", "status"],
              order_rows)
    if reliability:
        write_csv(out / "reliability.csv", ["method", "component", "wi2c2"], reliability)
    record(run, [out])
    return out


# ---------------------------------------------------------------- entry point

COMMANDS = {"simulate": cmd_simulate, "build-template": cmd_build_template, "fit": cmd_fit,
            "evaluate": cmd_evaluate}


def build_parser():
    p = argparse.ArgumentParser(prog="tica", description="Template ICA experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    return p


def exit_code(exc) -> int:
    for kind in type(exc).__mro__:
        if kind in EXIT:
            return EXIT[kind]
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("TICA_LOG", "warn").upper()
    logging.basicConfig(level={"WARN": "WARNING"}.get(level, level)
                        if level in ("ERROR", "WARN", "INFO", "DEBUG") else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads,
                                        "method": args.method})
        COMMANDS[args.command](cfg, args.out)
    except TicaError as exc:
        print(f"tica {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
