"""Batch front end: ``maclab <command> --config run.json [--seed S] [--out DIR] [--threads N]``.

Every run writes one CSV (atomically, with the resolved configuration echoed
in a ``# config:`` comment line) and a sidecar ``<name>.meta.json`` holding
the configuration hash, seed, git revision and wall time.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .asymptotic import (asymptotic_bound, blockwise_error_triple, evaluate_potential,
                         pupe_alpha1, sweep_achievable_region)
from .cdma import DenoiserKind, cdma_errors, run_cdma_amp, sample_cdma_instance
from .core import SystemConfig, make_rng
from .finite import FiniteBoundConfig, compute_bound_triple
from .matrix_se import predict_errors, se_fixed_point, write_trajectory_csv
from .runconfig import PARAMETER_MODELS, ConfigError, config_hash, json_schema, load_config
from .sparc import run_sparc_amp, sample_sparc_instance, scalar_se_run, section_errors

__all__ = ["main", "run_config", "aggregate", "Divergence", "TRIAL_COLUMNS"]

log = logging.getLogger("maclab")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

TRIAL_COLUMNS = ["scheme", "seed", "trial", "EbN0_dB", "L", "n", "k", "alpha", "omega",
                 "lambda", "denoiser", "t_final", "p_md", "p_fa", "p_aue", "combined"]
METRICS = ("p_md", "p_fa", "p_aue", "combined")


class Divergence(RuntimeError):
    """A numerical recursion left its finite range."""


# ---------------------------------------------------------------- output helpers


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_csv(path: Path, columns, rows, comments=()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    _atomic_write(path, buf.getvalue())


def _git_revision() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


# ---------------------------------------------------------------- parallel map


def _init_worker():
    threadpool_limits(1)


class _Runner:
    """Ordered map over tasks, serially or on a process pool.

    BLAS is pinned to one thread everywhere, so results do not depend on
    the worker count.
    """

    def __init__(self, threads: int):
        self.threads = threads
        self._ex = None

    def __enter__(self):
        self._limits = threadpool_limits(1)
        if self.threads > 1:
            self._ex = ProcessPoolExecutor(self.threads, mp_context=get_context("spawn"),
                                           initializer=_init_worker)
        return self

    def __exit__(self, *exc):
        if self._ex is not None:
            self._ex.shutdown(cancel_futures=True)
        self._limits.restore_original_limits()

    def map(self, fn, tasks):
        tasks = list(tasks)
        if self._ex is None or len(tasks) <= 1:
            return [fn(t) for t in tasks]
        return list(self._ex.map(fn, tasks))


def _diverged(where: str, exc: Exception) -> Divergence:
    return Divergence(f"{where}: {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------- simulation


def _coupling_cols(spec):
    return spec.omega, spec.lam


def _cdma_trial(task):
    cfg, spec, kind, history, dtype, seed, trial = task
    inst = sample_cdma_instance(cfg, spec, make_rng(seed, trial), dtype=np.dtype(dtype))
    try:
        _, dec = run_cdma_amp(inst, spec, cfg, kind, history)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise _diverged(f"Eb/N0={cfg.ebn0_db} dB trial {trial}", exc) from None
    return cdma_errors(inst, dec)


def _sparc_trial(task):
    cfg, spec, kind, history, dtype, seed, trial = task
    inst = sample_sparc_instance(cfg, spec, make_rng(seed, trial), dtype=np.dtype(dtype))
    _, dec = run_sparc_amp(inst, spec, cfg, kind, history)
    return section_errors(inst, dec)


def _simulate(rc, runner, scheme):
    p = rc.params
    spec = p.coupling.spec()
    omega, lam = _coupling_cols(spec)
    rows = []
    for eb in p.ebn0_db:
        cfg = p.system(eb)
        if rc.trials == 0:
            continue
        try:
            if scheme == "cdma":
                kind = DenoiserKind.parse(p.denoiser)
                _, t_final, hist = se_fixed_point(cfg, spec, kind, tol=p.se_tol, t_max=p.t_max,
                                                  mc_samples=p.se_mc_samples, seed=p.se_seed,
                                                  return_history=True)
                fn = _cdma_trial
            else:
                kind = p.denoiser
                _, t_final, hist = scalar_se_run(cfg, spec, kind, tol=p.se_tol, t_max=p.t_max,
                                                 mc_samples=p.se_mc_samples, seed=p.se_seed,
                                                 return_history=True)
                fn = _sparc_trial
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise _diverged(f"state evolution at Eb/N0={eb} dB", exc) from None
        tasks = [(cfg, spec, kind, hist, p.dtype, rc.seed, i) for i in range(rc.trials)]
        for i, e in enumerate(runner.map(fn, tasks)):
            rows.append([scheme, rc.seed, i, eb, cfg.L, cfg.n, cfg.k, cfg.alpha, omega, lam,
                         str(kind), t_final, e.p_md, e.p_fa, e.p_aue, e.combined])
    return TRIAL_COLUMNS, rows, {}


# ---------------------------------------------------------------- state evolution


def _se_cdma_point(task):
    cfg, spec, kind, p, seed = task
    try:
        st, t_final, hist = se_fixed_point(cfg, spec, kind, tol=p["tol"], t_max=p["t_max"],
                                           mc_samples=p["mc_samples"], seed=seed,
                                           return_history=True)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise _diverged(f"matrix SE at Eb/N0={cfg.ebn0_db} dB", exc) from None
    pred = predict_errors(st, cfg, kind, mc_samples=p["predict_samples"], seed=seed,
                          rel_se=p["rel_se"])
    return t_final, pred, hist if p["trajectory"] else None


def _se_cdma(rc, runner):
    p = rc.params
    spec = p.coupling.spec()
    kind = DenoiserKind.parse(p.denoiser)
    knobs = p.model_dump()
    omega, lam = _coupling_cols(spec)
    tasks = [(p.system(eb), spec, kind, knobs, rc.seed) for eb in p.ebn0_db]
    cols = ["EbN0_dB", "k", "alpha", "mu", "omega", "lambda", "denoiser", "t_final", "p_md",
            "p_fa", "p_aue", "combined", "se_p_md", "se_p_fa", "se_p_aue", "se_combined",
            "mc_samples"]
    rows, extra = [], {}
    for i, ((cfg, *_), (t_final, pred, hist)) in enumerate(zip(tasks, runner.map(_se_cdma_point,
                                                                                 tasks))):
        tri, se = pred.triple, pred.se
        rows.append([cfg.ebn0_db, cfg.k, cfg.alpha, cfg.mu, omega, lam, str(kind), t_final,
                     tri.p_md, tri.p_fa, tri.p_aue, tri.combined, se.p_md, se.p_fa, se.p_aue,
                     pred.combined_se, pred.samples])
        if hist is not None:
            extra[f"trajectory_{i:03d}"] = hist
    return cols, rows, extra


def _se_sparc_point(task):
    cfg, spec, kind, p, seed = task
    try:
        st, t_final = scalar_se_run(cfg, spec, kind, tol=p["tol"], t_max=p["t_max"],
                                    mc_samples=p["mc_samples"], seed=seed)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise _diverged(f"scalar SE at Eb/N0={cfg.ebn0_db} dB", exc) from None
    if cfg.alpha == 1.0:
        return t_final, None, float(np.mean([pupe_alpha1(float(t), cfg) for t in st.tau]))
    return t_final, blockwise_error_triple(st.tau, cfg), None


def _se_sparc(rc, runner):
    p = rc.params
    if p.alpha == 0.0:
        raise ValueError("se-sparc needs alpha > 0")
    spec = p.coupling.spec()
    omega, lam = _coupling_cols(spec)
    knobs = p.model_dump()
    tasks = [(p.system(eb), spec, p.denoiser, knobs, rc.seed) for eb in p.ebn0_db]
    cols = ["EbN0_dB", "k", "alpha", "mu", "omega", "lambda", "denoiser", "t_final", "p_md",
            "p_fa", "p_aue", "combined", "pupe"]
    rows = []
    for (cfg, *_), (t_final, tri, pupe) in zip(tasks, runner.map(_se_sparc_point, tasks)):
        vals = [None] * 4 if tri is None else [tri.p_md, tri.p_fa, tri.p_aue, tri.combined]
        rows.append([cfg.ebn0_db, cfg.k, cfg.alpha, cfg.mu, omega, lam, p.denoiser, t_final,
                     *vals, pupe])
    return cols, rows, {}


# ---------------------------------------------------------------- potentials and bounds


def _potential_point(task):
    cfg, kind, grid, kw = task
    return evaluate_potential(kind, cfg.mu, cfg, grid=grid, **kw)


def _potential(rc, runner):
    p = rc.params
    kw = {**p.mi_kwargs(), **({"seed": rc.seed} if p.kind == "bayes" else {})}
    tasks = [(p.system(eb), p.kind, p.grid, kw) for eb in p.ebn0_db]
    cols = ["EbN0_dB", "kind", "mu", "point", "psi", "psi_over_E", "F"]
    rows = []
    for (cfg, *_), ev in zip(tasks, runner.map(_potential_point, tasks)):
        E = cfg.E
        for psi, F in zip(ev.psi_grid, ev.values):
            rows.append([cfg.ebn0_db, p.kind, cfg.mu, "grid", psi, psi / E, F])
        for psi, F in ev.local_minima:
            tag = "largest_min" if psi == ev.minimizer else "local_min"
            rows.append([cfg.ebn0_db, p.kind, cfg.mu, tag, psi, psi / E, F])
    return cols, rows, {}


def _bound_point(task):
    cfg, p, kw = task
    return asymptotic_bound(p["kind"], cfg, theta=p["theta"], eps=p["eps"], delta=p["delta"],
                            grid=p["grid"], **kw)


def _asymptotic_bounds(rc, runner):
    p = rc.params
    kw = {**p.mi_kwargs(), **({"seed": rc.seed} if p.kind == "bayes" else {})}
    knobs = p.model_dump()
    tasks = [(p.system(eb), knobs, kw) for eb in p.ebn0_db]
    cols = ["EbN0_dB", "k", "alpha", "mu", "kind", "theta", "tau_bar", "p_md", "p_fa", "p_aue",
            "combined", "pupe"]
    rows = []
    for (cfg, *_), (res, tb) in zip(tasks, runner.map(_bound_point, tasks)):
        if isinstance(res, float):
            vals, pupe = [None] * 4, res
        else:
            vals, pupe = [res.p_md, res.p_fa, res.p_aue, res.combined], None
        rows.append([cfg.ebn0_db, cfg.k, cfg.alpha, cfg.mu, p.kind, p.theta, tb, *vals, pupe])
    return cols, rows, {}


def _finite_point(fbc):
    t0 = time.perf_counter()
    res = compute_bound_triple(fbc)
    return res, time.perf_counter() - t0


def _finite_bounds(rc, runner):
    p = rc.params
    act = p.activity.model(p.L)
    alpha = p.activity.alpha if p.activity.alpha is not None else act.mean / p.L
    fbcs = []
    for eb in p.ebn0_db:
        kw = dict(pprime_policy=p.pprime_policy, pprime_frac=p.pprime_frac)
        if p.pbar is not None:
            fbcs.append(FiniteBoundConfig.from_tail(p.n, p.L, p.k, eb, act, p.pbar, p.rl, p.ru,
                                                    **kw))
        else:
            fbcs.append(FiniteBoundConfig(p.n, p.L, p.k, eb, act, p.kl, p.ku, p.rl, p.ru, **kw))
    cols = ["ebn0_dB", "L", "n", "k", "alpha", "rl", "ru", "kl", "ku", "pprime_policy",
            "eps_md", "eps_fa", "eps_aue", "bar_md", "bar_fa", "bar_aue", "pprime",
            "wall_seconds"]
    rows = []
    for f, (res, wall) in zip(fbcs, runner.map(_finite_point, fbcs)):
        rows.append([f.ebn0_db, f.L, f.n, f.k, alpha, f.rl, f.ru, f.kl, f.ku, f.pprime_policy,
                     res.eps.p_md, res.eps.p_fa, res.eps.p_aue, *res.floors, res.pprime, wall])
    return cols, rows, {}


def _sweep_point(task):
    template, target, eb, mus, kind, rel_tol, kw = task
    return sweep_achievable_region(template, target, [eb], mus, kind, rel_tol=rel_tol, **kw)[0]


def _sweep_region(rc, runner):
    p = rc.params
    kw = p.mi_kwargs()
    if p.kind == "bayes":
        kw["seed"] = rc.seed
    template = SystemConfig(k=p.k, alpha=p.alpha, ebn0_db=float(p.ebn0_db[0]), sigma2=p.sigma2)
    mus = p.mu_values()
    tasks = [(template, p.target, eb, mus, p.kind, p.rel_tol, kw) for eb in p.ebn0_db]
    cols = ["ebn0_dB", "mu_a_max", "kind", "alpha", "k", "target", "status"]
    rows = [[r.ebn0_db, r.mu_a_max, r.kind, r.alpha, r.k, r.target, r.status]
            for r in runner.map(_sweep_point, tasks)]
    return cols, rows, {}


_COMMANDS = {
    "simulate-cdma": lambda rc, r: _simulate(rc, r, "cdma"),
    "simulate-sparc": lambda rc, r: _simulate(rc, r, "sparc"),
    "se-cdma": _se_cdma,
    "se-sparc": _se_sparc,
    "potential": _potential,
    "asymptotic-bounds": _asymptotic_bounds,
    "finite-bounds": _finite_bounds,
    "sweep-region": _sweep_region,
}


# ---------------------------------------------------------------- run and aggregate


def _csv_path(rc, out_dir) -> Path:
    name = rc.output_path or f"{rc.command}.csv"
    path = Path(name)
    return path if path.is_absolute() else Path(out_dir) / path


def run_config(rc, out_dir=".", threads: int = 1) -> Path:
    """Execute a validated :class:`~maclab.runconfig.RunConfig`; returns the CSV path.

    Raises :class:`Divergence` on numerical divergence.
    """
    t0 = time.perf_counter()
    resolved = rc.resolved()
    path = _csv_path(rc, out_dir)
    with _Runner(threads) as runner:
        cols, rows, extra = _COMMANDS[rc.command](rc, runner)
    header = "config: " + json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    write_csv(path, cols, rows, comments=[header])
    for tag, hist in extra.items():
        write_trajectory_csv(hist, path.with_name(f"{path.stem}_{tag}.csv"))
    meta = {"command": rc.command, "config_hash": config_hash(resolved), "seed": rc.seed,
            "git_revision": _git_revision(), "wall_seconds": time.perf_counter() - t0,
            "threads": threads, "maclab_version": __version__, "rows": len(rows),
            "csv": path.name, "config": resolved}
    _atomic_write(path.with_name(path.stem + ".meta.json"),
                  json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _read_table(path):
    """(resolved config or None, header, rows) of a CSV written by this tool."""
    cfg, lines = None, []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("config:"):
                    cfg = json.loads(body[len("config:"):])
            elif line.strip():
                lines.append(line)
    table = list(csv.reader(lines))
    if not table:
        raise ValueError(f"{path}: no header row")
    return cfg, table[0], table[1:]


def aggregate(paths):
    """Per-configuration means and standard errors of the error metrics.

    Rows are grouped by configuration hash (seed excluded) plus every
    non-metric column other than ``seed`` and ``trial``. The standard error
    is the sample standard deviation over rows divided by the square root of
    the row count; it is NaN for a single row.

    Returns ``(columns, rows)``.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("aggregate needs at least one CSV file")
    header, groups = None, {}
    for path in paths:
        cfg, h, rows = _read_table(path)
        if header is None:
            header = h
            metrics = [c for c in header if c in METRICS]
            if not metrics:
                raise ValueError(f"{path}: no metric columns among {header}")
            keys = [c for c in header if c not in METRICS and c not in ("seed", "trial")]
            mi = [header.index(c) for c in metrics]
            ki = [header.index(c) for c in keys]
        elif h != header:
            raise ValueError(f"{path}: schema mismatch; expected {header}, found {h}")
        chash = config_hash(cfg) if cfg is not None else ""
        for r in rows:
            if len(r) != len(header):
                raise ValueError(f"{path}: ragged row {r}")
            key = (chash, *(r[i] for i in ki))
            groups.setdefault(key, []).append([float(r[i]) if r[i] else math.nan for i in mi])
    cols = ["config_hash", *keys, "n_rows"]
    for m in metrics:
        cols += [f"mean_{m}", f"se_{m}"]
    out = []
    for key, vals in groups.items():
        a = np.asarray(vals)
        n = a.shape[0]
        row = [*key, n]
        for j in range(a.shape[1]):
            mean = float(np.sum(a[:, j]) / n)
            se = float(np.std(a[:, j], ddof=1) / math.sqrt(n)) if n > 1 else math.nan
            row += [mean, se]
        out.append(row)
    return cols, out


# ---------------------------------------------------------------- argument parsing


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _threads(arg) -> int:
    src = arg if arg is not None else os.environ.get("MACLAB_THREADS", "1")
    try:
        v = int(src)
    except ValueError:
        raise ConfigError(f"invalid thread count {src!r}") from None
    if v < 1:
        raise ConfigError(f"thread count must be positive, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maclab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"maclab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    for name in PARAMETER_MODELS:
        sp = sub.add_parser(name, help=f"run a {name} configuration")
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=_u64, help="override the configuration seed")
        sp.add_argument("--out", default=".", help="output directory (default: .)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $MACLAB_THREADS or 1)")
    sp = sub.add_parser("aggregate", help="summarise trial CSVs per configuration")
    sp.add_argument("paths", nargs="*", help="CSV files written by this tool")
    sp.add_argument("--out", default=".", help="output directory (default: .)")
    sp.add_argument("--name", default="aggregate.csv", help="output file name")
    sp = sub.add_parser("schema", help="print the JSON schema of a configuration")
    sp.add_argument("target", nargs="?", choices=sorted(PARAMETER_MODELS),
                    help="command whose parameters to describe (default: the envelope)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "schema":
            print(json.dumps(json_schema(args.target), indent=2))
            return EXIT_OK
        if args.command == "aggregate":
            cols, rows = aggregate(args.paths)
            path = Path(args.out) / args.name
            write_csv(path, cols, rows, comments=["aggregate of: " + " ".join(args.paths)])
            print(path)
            return EXIT_OK
        threads = _threads(args.threads)
        rc = load_config(args.config, command=args.command, seed=args.seed)
        print(run_config(rc, args.out, threads))
        return EXIT_OK
    except Divergence as exc:
        print(f"maclab: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, OSError) as exc:
        print(f"maclab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"maclab: internal error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
