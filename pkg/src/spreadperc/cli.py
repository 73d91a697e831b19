"""Command-line driver: parameter scans, oracle sweeps and random-walk studies.

Settings come from three layers: dataclass defaults, then an optional JSON or
YAML file (``--config``), then command-line flags. Each scan point draws from
its own substream ``(seed, "scan", index)``, so results do not depend on the
worker count or on whether a run was resumed.

Scan outputs are a CSV with the columns of :data:`COLUMNS` and a JSON
manifest next to it (config echo, versions, wall time, completed points).
Exit codes: 0 success, 1 verification failure, 2 usage error, 3 resource or
capacity error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import oracle, randwalk
from .errors import CapacityError, CensoringError, UsageError
from .lattice import SpreadOutModel
from .rng import RngStream

COLUMNS = ("beta", "estimator", "value", "std_error", "n", "truncation", "censored_rate")
RW_COLUMNS = ("study", "d", "L", "key", "value", "std_error", "n", "reference")
VERIFY_COLUMNS = ("name", "instance", "lhs", "rhs", "slack", "passed")
ESTIMATORS = ("chi", "sharp_length", "triangle", "phi0", "psi", "shell")
RW_STUDIES = ("coupling", "green", "ruin", "exit_time")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    d: int = 7
    L: int = 1
    betas: list = field(default_factory=list)
    beta_c: float | None = None
    beta_c_step: float | None = None
    deltas: list = field(default_factory=list)
    estimators: list = field(default_factory=lambda: ["chi"])
    n: int = 100_000
    cap: int = est.DEFAULT_CAP
    windows: list = field(default_factory=lambda: [4, 8, 16])
    n_pairs: int = 2000
    r_max: int = 12
    psi_n: list = field(default_factory=lambda: [2, 4, 8, 12])
    epsilon: float = est.DEFAULT_EPS
    C: float = 2.0
    n_max: int = 8
    seed: int = 0
    workers: int | None = None
    out: str = "results.csv"
    manifest: str | None = None
    resume: bool = False
    # oracle sweep
    n_instances: int = 500
    verify_dims: list = field(default_factory=lambda: [1, 2])
    verify_ranges: list = field(default_factory=lambda: [1, 2, 3])
    verify_betas: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 1.5])
    max_edges: int = 12
    convolution: list = field(default_factory=lambda: [[5, 1], [7, 1], [7, 2]])
    convolution_R: int = 16
    dump_dir: str | None = None
    # random-walk studies
    rw_studies: list = field(default_factory=lambda: list(RW_STUDIES))
    rw_d: int = 2
    rw_Ls: list = field(default_factory=lambda: [4, 16, 64])
    rw_Ts: list = field(default_factory=lambda: [256, 1024, 4096])
    rw_n: int = 4000
    kappa: float = 1.0
    coupling_mode: str = "greedy"

    def validate(self) -> "ExperimentConfig":
        if self.d < 1 or self.L < 1:
            raise UsageError("d and L must be >= 1")
        if self.n < 1:
            raise UsageError("n must be >= 1")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise UsageError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        bad = [s for s in self.rw_studies if s not in RW_STUDIES]
        if bad:
            raise UsageError(f"unknown random-walk studies {bad}; choose from {RW_STUDIES}")
        if self.deltas and self.beta_c is None:
            raise UsageError("deltas need beta_c")
        if any(b < 0 for b in self.beta_list()):
            raise UsageError("beta must be >= 0")
        return self

    def beta_list(self) -> list:
        if self.betas:
            return [float(b) for b in self.betas]
        if self.deltas:
            return [float(self.beta_c) - float(x) for x in self.deltas]
        return []

    def manifest_path(self) -> str:
        return self.manifest or self.out + ".manifest.json"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        keep = {k: v for k, v in self.to_dict().items() if k not in ("workers", "resume", "out", "manifest")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()


def load_config_file(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    return data


def make_config(file_data: dict | None = None, flags: dict | None = None) -> ExperimentConfig:
    """defaults < file < flags; unknown keys are usage errors."""
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    merged = {}
    for layer in (file_data or {}, flags or {}):
        for k, v in layer.items():
            if v is None:
                continue
            k = k.replace("-", "_")
            if k not in names:
                raise UsageError(f"unknown config key {k!r}")
            merged[k] = v
    try:
        return ExperimentConfig(**merged).validate()
    except TypeError as e:
        raise UsageError(str(e)) from None


# --------------------------------------------------------------------------
# Output helpers


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return " ".join(fmt(x) for x in v)
    return str(v)


def write_atomic(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def versions() -> dict:
    import numba
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__,
            "scipy": scipy.__version__}


# --------------------------------------------------------------------------
# Scans


def _row(beta, name, e: est.Estimate) -> dict:
    return {"beta": beta, "estimator": name, "value": e.value, "std_error": e.std_error, "n": e.n_samples,
            "truncation": e.truncation, "censored_rate": e.censored_rate}


def sharp_length_se(sl: est.SharpLength) -> float:
    """Delta-method error of the interpolated length from the two bracketing phi values."""
    if not isinstance(sl.value, int) or sl.profile is None or sl.value < 1:
        return math.nan
    prev, cur = sl.profile.values[sl.value - 1], sl.profile.values[sl.value]
    if prev.value <= 0 or cur.value <= 0 or prev.value == cur.value:
        return math.nan
    gap = math.log(prev.value) - math.log(cur.value)
    return math.hypot(prev.std_error / prev.value, cur.std_error / cur.value) / gap


def point_rows(cfg: ExperimentConfig, beta: float, stream: RngStream) -> list:
    """Every requested estimator at one beta."""
    model = SpreadOutModel(cfg.d, cfg.L, beta)
    rows = []
    for name in cfg.estimators:
        sub = stream.child(name)
        if name == "chi":
            rows.append(_row(beta, "chi", est.susceptibility(model, cfg.n, sub, cfg.cap, cfg.workers)))
        elif name == "phi0":
            rows.append(_row(beta, "phi0", est.Estimate.exact(est.phi_singleton(model))))
        elif name == "sharp_length":
            sl = est.sharp_length(model, cfg.epsilon, n=cfg.n, seed=sub, site_cap=cfg.cap, workers=cfg.workers)
            if isinstance(sl.value, est.Unbounded):
                rows.append(_row(beta, "sharp_length", est.Estimate(math.inf, math.nan, 0, sl.value.cap)))
                continue
            n_used = sl.profile.values[-1].n_samples if sl.profile else 0
            rows.append(_row(beta, "sharp_length", est.Estimate(float(sl.value), 0.0, n_used, "ambiguous" if sl.ambiguous else None)))
            rows.append(_row(beta, "sharp_length_interp",
                             est.Estimate(sl.interpolated, sharp_length_se(sl), n_used, sl.value)))
        elif name == "triangle":
            tr = est.triangle_profile(model, tuple(cfg.windows), cfg.n_pairs, cfg.n, sub, cfg.cap, cfg.workers)
            for r, v, inc in zip(tr.windows, tr.values, tr.increments):
                rows.append(_row(beta, f"triangle_{r}", v))
                rows.append(_row(beta, f"triangle_inc_{r}", inc))
        elif name == "psi":
            prof = est.psi_profile(model, max(cfg.psi_n), cfg.n, sub, cfg.cap, cfg.workers)
            for k in cfg.psi_n:
                rows.append(_row(beta, f"psi_{k}", prof[k]))
        elif name == "shell":
            cp = est.cluster_profile(model, cfg.r_max, cfg.n, sub, cfg.cap, cfg.workers)
            for r in range(1, cfg.r_max + 1):
                rows.append(_row(beta, f"shell_{r}", cp.shells[r]))
    return rows


def _fit(rows: list, name: str, beta_c: float):
    pts = [(beta_c - r["beta"], r["value"], r["std_error"]) for r in rows
           if r["estimator"] == name and beta_c - r["beta"] > 0 and 0 < r["value"] < math.inf]
    if len(pts) < 2:
        return None
    x, y, s = map(np.array, zip(*pts))
    s = None if not np.all(np.isfinite(s) & (s > 0)) else s
    f = est.loglog_fit(x, y, s)
    return {"slope": f.slope, "slope_se": f.slope_se, "intercept": f.intercept, "n_points": f.n_points}


def scan_fits(cfg: ExperimentConfig, rows: list) -> dict:
    """Log-log slopes against beta_c - beta, for chi and the interpolated sharp length.

    With ``beta_c_step`` set, the fits are repeated with beta_c moved by one
    step either way (keys suffixed ``@beta_c-step`` and ``@beta_c+step``).
    """
    if cfg.beta_c is None:
        return {}
    shifts = [("", 0.0)]
    if cfg.beta_c_step:
        shifts += [("@beta_c-step", -cfg.beta_c_step), ("@beta_c+step", cfg.beta_c_step)]
    fits = {}
    for name in ("chi", "sharp_length_interp"):
        for suffix, shift in shifts:
            f = _fit(rows, name, cfg.beta_c + shift)
            if f is not None:
                fits[name + suffix] = f
    return fits


def _load_manifest(cfg: ExperimentConfig) -> dict | None:
    path = cfg.manifest_path()
    if not (cfg.resume and os.path.exists(path) and os.path.exists(cfg.out)):
        return None
    with open(path) as fh:
        man = json.load(fh)
    if man.get("digest") != cfg.digest():
        raise UsageError("manifest belongs to a different configuration; remove it or drop --resume")
    return man


def _read_rows(path: str) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {"beta": float(r["beta"]), "estimator": r["estimator"], "value": float(r["value"]),
                "std_error": float(r["std_error"]) if r["std_error"] else math.nan,
                "n": int(r["n"]), "censored_rate": float(r["censored_rate"]) if r["censored_rate"] else 0.0}
        t = r["truncation"]
        conv["truncation"] = int(t) if t.lstrip("-").isdigit() else (t or None)
        out.append(conv)
    return out


def run_scan(cfg: ExperimentConfig, log=print) -> tuple[list, dict]:
    """Compute every estimator at every beta, saving after each point."""
    cfg.validate()
    betas = cfg.beta_list()
    if not betas:
        raise UsageError("no beta values given (use betas, or beta_c with deltas)")
    t0 = time.time()
    stream = RngStream(int(cfg.seed)).child("scan")
    man = _load_manifest(cfg)
    done = set(man["completed"]) if man else set()
    by_point = {}
    if man:
        old = _read_rows(cfg.out)
        for i in done:
            by_point[i] = [r for r in old if r["beta"] == betas[i]]
    manifest = {"config": cfg.to_dict(), "digest": cfg.digest(), "versions": versions(),
                "completed": sorted(done), "status": "running", "fits": {}, "wall_time": 0.0}

    def save(status):
        rows = [r for i in sorted(by_point) for r in by_point[i]]
        write_atomic(cfg.out, csv_text(COLUMNS, rows))
        manifest.update(completed=sorted(by_point), status=status, wall_time=time.time() - t0,
                        fits=scan_fits(cfg, rows) if status == "complete" else {})
        write_atomic(cfg.manifest_path(), json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return rows

    try:
        for i, beta in enumerate(betas):
            if i in done:
                continue
            by_point[i] = point_rows(cfg, beta, stream.child(i))
            save("running")
            log(f"[{i + 1}/{len(betas)}] beta={beta!r} done")
    except KeyboardInterrupt:
        save("interrupted")
        raise
    rows = save("complete")
    for name, f in manifest["fits"].items():
        log(f"fit {name}: slope {f['slope']:.4f} +- {f['slope_se']:.4f} over {f['n_points']} points")
    return rows, manifest


# --------------------------------------------------------------------------
# Oracle sweeps


@dataclass
class VerifyBundle:
    reports: list
    instances: int

    @property
    def failures(self) -> list:
        return [r for r in self.reports if not r.passed]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_verify(cfg: ExperimentConfig, log=print) -> VerifyBundle:
    reports = []
    count = 0
    if cfg.n_instances > 0:
        sw = oracle.run_sweep(cfg.n_instances, int(cfg.seed), tuple(cfg.verify_dims), tuple(cfg.verify_ranges),
                              tuple(cfg.verify_betas), cfg.max_edges, cfg.dump_dir)
        reports += sw.reports
        count += sw.n_instances
    for d, L in cfg.convolution:
        res = oracle.verify_convolution(int(d), int(L), cfg.convolution_R)
        reports.append(res.report)
        count += 1
    bundle = VerifyBundle(reports, count)
    rows = [{"name": r.name, "instance": _instance_label(r.instance), "lhs": r.lhs, "rhs": r.rhs,
             "slack": r.slack, "passed": r.passed} for r in reports]
    write_atomic(cfg.out, csv_text(VERIFY_COLUMNS, rows))
    names = sorted({r.name for r in reports})
    for nm in names:
        sel = [r for r in reports if r.name == nm]
        log(f"{nm}: {len(sel)} reports, {sum(not r.passed for r in sel)} failures, "
            f"min slack {min(r.slack for r in sel):.3g}")
    return bundle


def _instance_label(inst) -> str:
    if isinstance(inst, oracle.Instance):
        meta = ",".join(f"{k}={v}" for k, v in sorted(inst.meta.items()))
        return f"{meta};sites={len(inst.graph.sites)};edges={inst.graph.n_edges}"
    return str(inst)


# --------------------------------------------------------------------------
# Random-walk studies


def run_rw(cfg: ExperimentConfig, log=print) -> list:
    """Tables for the coupling, Green function, ruin and exit-time studies."""
    stream = RngStream(int(cfg.seed)).child("rw")
    rows = []
    d = cfg.rw_d

    def add(study, dd, L, key, e: est.Estimate, ref=None):
        rows.append({"study": study, "d": dd, "L": L, "key": key, "value": e.value, "std_error": e.std_error,
                     "n": e.n_samples, "reference": ref})

    if "coupling" in cfg.rw_studies:
        for L in cfg.rw_Ls:
            u, v = (2 * L,) + (L,) * (d - 1), (0,) * d
            for T in cfg.rw_Ts:
                e = randwalk.ornstein_coupling(d, L, u, v, int(T), cfg.rw_n, cfg.kappa, cfg.coupling_mode,
                                               stream.child("coupling", L, T), cfg.workers)
                add("coupling", d, L, f"T={T}", e)
    if "green" in cfg.rw_studies:
        step = randwalk.uniform_spread(3, 1)
        dp = randwalk.halfspace_green(step, (1, 0, 0), "dp", window=16)
        mc = randwalk.halfspace_green(step, (1, 0, 0), "mc", cfg.rw_n * 25, window=16,
                                      seed=stream.child("green"), workers=cfg.workers)
        add("green", 3, 1, "x=e1 mc", mc, dp.value)
        tab = randwalk.halfspace_green_table(step, [(k, 0, 0) for k in (4, 8, 16, 32)], window=256)
        for k, val in zip((4, 8, 16, 32), tab.values):
            add("green", 3, 1, f"x={k}e1 dp", est.Estimate.exact(val, 256))
    if "ruin" in cfg.rw_studies:
        step = randwalk.uniform_spread(d, cfg.L)
        for k in (8, 16, 32, 64):
            e = randwalk.gamblers_ruin(step, k, cfg.rw_n * 25, stream.child("ruin", k), cfg.workers)
            add("ruin", d, cfg.L, f"k={k}", e, randwalk.gamblers_ruin_exact(step, k))
    if "exit_time" in cfg.rw_studies:
        for dd in (1, 2, 3):
            for m in (1, 2, 4):
                for name, step in randwalk.pm_family(dd, m).items():
                    for n in (m, 4 * m):
                        e = randwalk.exit_time_box(step, n, cfg.rw_n, seed=stream.child("exit", dd, m, name, n))
                        add("exit_time", dd, m, f"{name} n={n}", e, randwalk.exit_time_bound(dd, n, m))
    write_atomic(cfg.out, csv_text(RW_COLUMNS, rows))
    log(f"wrote {len(rows)} rows to {cfg.out}")
    return rows


def run_bootstrap(cfg: ExperimentConfig, log=print) -> list:
    stream = RngStream(int(cfg.seed)).child("bootstrap")
    rows = []
    for i, beta in enumerate(cfg.beta_list()):
        rep = est.bootstrap_check(SpreadOutModel(cfg.d, cfg.L, beta), cfg.C, cfg.n_max, n=cfg.n,
                                  seed=stream.child(i), cap=cfg.cap, workers=cfg.workers)
        for k, m in rep.ell1_margins:
            rows.append({"beta": beta, "estimator": f"ell1_margin_{k}", "value": m, "n": cfg.n})
        for x, m in rep.ellinf_margins:
            rows.append({"beta": beta, "estimator": "ellinf_margin_" + "_".join(map(str, x)), "value": m, "n": cfg.n})
        log(f"beta={beta!r}: l1 {'holds' if rep.ell1_holds else 'fails'}, "
            f"pointwise {'holds' if rep.ellinf_holds else 'fails'}{' (ambiguous)' if rep.ambiguous else ''}")
    write_atomic(cfg.out, csv_text(COLUMNS, rows))
    return rows


# --------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spreadperc", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="JSON or YAML file with ExperimentConfig fields")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--d", type=int)
        p.add_argument("--L", type=int)
        p.add_argument("--betas", type=float, nargs="+")
        p.add_argument("--beta-c", type=float)
        p.add_argument("--beta-c-step", type=float)
        p.add_argument("--deltas", type=float, nargs="+")
        p.add_argument("--n", type=int)
        p.add_argument("--cap", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--manifest")
        p.add_argument("--resume", action="store_true", default=None)

    p = sub.add_parser("scan", help="estimators over a beta sweep")
    common(p)
    p.add_argument("--estimators", nargs="+")
    p.add_argument("--windows", type=int, nargs="+")
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--r-max", type=int)
    p.add_argument("--psi-n", type=int, nargs="+")
    p.add_argument("--epsilon", type=float)
    p = sub.add_parser("triangle", help="windowed triangle sums over a beta sweep")
    common(p)
    p.add_argument("--windows", type=int, nargs="+")
    p.add_argument("--n-pairs", type=int)
    p = sub.add_parser("sharp-length", help="sharp length over a beta sweep")
    common(p)
    p.add_argument("--epsilon", type=float)
    p = sub.add_parser("bootstrap", help="half-space bootstrap conditions over a beta sweep")
    common(p)
    p.add_argument("--C", type=float)
    p.add_argument("--n-max", type=int)
    p = sub.add_parser("verify", help="exact inequality sweep and convolution checks")
    p.add_argument("--n-instances", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-edges", type=int)
    p.add_argument("--convolution-R", type=int)
    p.add_argument("--no-convolution", action="store_true")
    p.add_argument("--dump-dir")
    p.add_argument("--out")
    p = sub.add_parser("rw", help="random-walk study tables")
    p.add_argument("--rw-studies", nargs="+")
    p.add_argument("--rw-d", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--rw-Ls", type=int, nargs="+")
    p.add_argument("--rw-Ts", type=int, nargs="+")
    p.add_argument("--rw-n", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--coupling-mode", choices=("proof", "greedy"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "no_convolution")}
    if getattr(args, "no_convolution", False):
        flags["convolution"] = []
    try:
        cfg = make_config(load_config_file(args.config) if args.config else None, flags)
        if args.command == "scan":
            run_scan(cfg)
        elif args.command == "triangle":
            cfg.estimators = ["triangle"]
            run_scan(cfg)
        elif args.command == "sharp-length":
            cfg.estimators = ["sharp_length"]
            run_scan(cfg)
        elif args.command == "bootstrap":
            run_bootstrap(cfg)
        elif args.command == "verify":
            if not run_verify(cfg).ok:
                return EXIT_FAIL
        elif args.command == "rw":
            run_rw(cfg)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CapacityError, CensoringError, MemoryError) as e:
        print(f"resource error: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    return EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
