"""Command-line runner: ``roughscheme {fbm,constants,simulate,rate,clt,check}``.

Every run writes its CSVs and a ``summary.json`` into the output directory,
then ``manifest.json`` last, listing each file with its SHA-256.

Exit codes: 0 success, 1 engineering error (bad config, I/O, numerical
failure), 2 a scientific threshold failed in ``check``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_PREFIX, ConfigError, ExperimentConfig, as_dict, build_config
from .fields import make_field

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are engineering errors; 2 is reserved for threshold failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _csv_float(x) -> str:
    return f"{float(x):.17g}"


def _y0(coeffs):
    # the geometric field needs a nonzero start; the rotation field starts at the origin
    return np.ones(coeffs.dim_d) if coeffs.name == "geometric" else np.zeros(coeffs.dim_d)


# ---------------------------------------------------------------- pipelines
# each returns (files: dict name -> text, summary: dict, exit code)


def run_fbm(cfg: ExperimentConfig, log):
    from .fbm_core import generate_fbm_batch

    n = cfg.ns[0]
    paths = generate_fbm_batch(cfg.hurst, n, cfg.horizon_T, cfg.components_m, cfg.seed, range(cfg.mc_reps))
    files = {}
    if len(paths) == 1:
        files["fbm.csv"] = paths[0].to_csv()
    else:
        width = len(str(len(paths) - 1))
        for p in paths:
            files[f"fbm_r{p.replicate:0{width}d}.csv"] = p.to_csv()
    log(f"wrote {len(paths)} fBm path(s): H={cfg.hurst}, n={n}, m={cfg.components_m}")
    return files, {"paths": len(paths), "n": n}, EXIT_OK


def run_constants(cfg: ExperimentConfig, log):
    from .constants import qp_sum

    tab = qp_sum(cfg.hurst, cfg.k_max, cfg.quad_n)
    summary = {"hurst": cfg.hurst, "Q": tab.q_sum, "P": tab.p_sum, "Q_greater_than_P": tab.q_sum > tab.p_sum,
               "tail_estimate": tab.tail_estimate}
    log(f"H={cfg.hurst}: Q={tab.q_sum:.10g}  P={tab.p_sum:.10g}")
    return {"constants.csv": tab.to_csv()}, summary, EXIT_OK


def run_simulate(cfg: ExperimentConfig, log):
    from .fbm_core import generate_fbm, lift_geometric
    from .schemes import REFERENCE_MIN_REFINEMENT, reference_solution, run_scheme

    coeffs = make_field(cfg.field, **cfg.field_params)
    n = cfg.ns[0]
    path = generate_fbm(cfg.hurst, n * cfg.refinement, cfg.horizon_T, coeffs.dim_m, cfg.seed)
    lift = lift_geometric(path, n)
    y0 = _y0(coeffs)
    h = cfg.horizon_T / n
    files, summary = {}, {"n": n, "hurst": cfg.hurst, "field": cfg.field, "sup_error": {}}
    trajs = {s: run_scheme(s, lift.delta_b, h, coeffs, y0, hurst=cfg.hurst, bb=lift.bb) for s in cfg.schemes}
    for s, tr in trajs.items():
        files[f"trajectory_{s}.csv"] = tr.to_csv()
    if cfg.refinement >= REFERENCE_MIN_REFINEMENT:
        ref = reference_solution(path, coeffs, y0, n)
        files["reference.csv"] = ref.to_csv()
        summary["reference_gap"] = ref.gap
        for s, tr in trajs.items():
            err = float(np.linalg.norm(tr.values - ref.values, axis=-1).max())
            summary["sup_error"][s] = err
            log(f"{s:>12}: sup error vs reference {err:.6g}")
    return files, summary, EXIT_OK


def run_rate(cfg: ExperimentConfig, log):
    from .analysis import rate_fit, rate_harness

    rows = ["scheme,n,H,mean_err,stderr,reps"]
    slopes = ["scheme,slope,slope_stderr"]
    summary = {"hurst": cfg.hurst, "slopes": {}}
    if cfg.synthetic_exponent is not None:
        # fixture: errors exactly proportional to n^p, no simulation
        errs = [float(n) ** cfg.synthetic_exponent for n in cfg.ns]
        rep = rate_fit(cfg.ns, errs)
        rows += [f"synthetic,{n},{_csv_float(cfg.hurst)},{_csv_float(e)},0,0" for n, e in zip(cfg.ns, errs)]
        reports = {"synthetic": rep}
    else:
        coeffs = make_field(cfg.field, **cfg.field_params)
        res = rate_harness(coeffs, hurst=cfg.hurst, ns=cfg.ns, reps=cfg.mc_reps, horizon_T=cfg.horizon_T,
                           y0=_y0(coeffs), refinement=cfg.refinement, seed=cfg.seed, schemes=cfg.schemes,
                           threads=cfg.threads)
        rows += [f"{s},{n},{_csv_float(h)},{_csv_float(e)},{_csv_float(se)},{r}" for s, n, h, e, se, r in res.rows()]
        reports = res.reports
        summary["reference_gap"] = res.mean_gap()
        summary["gate_ratio"] = {s: res.gate_ratio(s) for s in reports}
    for s, rep in reports.items():
        slopes.append(f"{s},{_csv_float(rep.fitted_slope)},{_csv_float(rep.slope_stderr)}")
        summary["slopes"][s] = rep.fitted_slope
        log(f"{s:>12}: slope {rep.fitted_slope:+.4f} +/- {rep.slope_stderr:.4f}")
    files = {"rate.csv": "\n".join(rows) + "\n", "slopes.csv": "\n".join(slopes) + "\n"}
    return files, summary, EXIT_OK


def run_clt(cfg: ExperimentConfig, log):
    from .analysis import clt_error_harness
    from .constants import qp_sum

    coeffs = make_field(cfg.field, **cfg.field_params)
    table = qp_sum(cfg.hurst, cfg.k_max, cfg.quad_n)
    rep = clt_error_harness(coeffs, table, hurst=cfg.hurst, n=cfg.ns[0], reps=cfg.mc_reps,
                            horizon_T=cfg.horizon_T, y0=_y0(coeffs), refinement=cfg.refinement,
                            seed=cfg.seed, threads=cfg.threads)
    rows = ["replicate,coordinate,scaled_error,limit_U"]
    for r in range(rep.reps):
        for c in range(coeffs.dim_d):
            rows.append(f"{r},{c + 1},{_csv_float(rep.errors[r, c])},{_csv_float(rep.limits[r, c])}")
    for c in range(coeffs.dim_d):
        log(f"coordinate {c + 1}: KS {rep.ks[c]:.4f}, variance gap {rep.variance_gap[c]:.4f}")
    return {"clt.csv": "\n".join(rows) + "\n"}, rep.summary(), EXIT_OK


def run_check(cfg: ExperimentConfig, log, only=None):
    from .acceptance import run_suite

    results, files = run_suite(cfg.seed, cfg.threads, only=only, log=log)
    failed = [r.number for r in results if not r.passed]
    log(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    summary = {
        "seed": cfg.seed,
        "criteria": [
            {"number": r.number, "name": r.name, "passed": r.passed, "statistic_passed": r.stat_passed,
             "runtime_s": r.runtime, "budget_s": r.budget, "note": r.note,
             "values": {k: float(v) for k, v in r.values.items()}}
            for r in results
        ],
        "failed": failed,
    }
    return files, summary, EXIT_THRESHOLD if failed else EXIT_OK


PIPELINES = {"fbm": run_fbm, "constants": run_constants, "simulate": run_simulate,
             "rate": run_rate, "clt": run_clt, "check": run_check}


# ---------------------------------------------------------------- manifest


def _git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, log=print, **kwargs) -> tuple[dict, int]:
    """Run the pipeline named by ``cfg.command``; return ``(manifest, exit_code)``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start, stamp = time.perf_counter(), datetime.now(timezone.utc).isoformat(timespec="seconds")
    files, summary, code = PIPELINES[cfg.command](cfg, log, **kwargs)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    listed = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config": as_dict(cfg),
        "version": __version__,
        "git": _git_stamp(),
        "started_utc": stamp,
        "wall_clock_s": time.perf_counter() - start,
        "exit_code": code,
        "files": {name: _sha256(out / name) for name in listed},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest, code


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roughscheme", description=__doc__.split("\n")[0],
                epilog=f"Any config key can also be set via the environment as {ENV_PREFIX}<KEY>.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "fbm": "sample fBm paths to CSV",
        "constants": "tabulate Q(k), P(k) and their sums",
        "simulate": "run schemes on one path and compare with the reference",
        "rate": "strong-rate Monte Carlo study (or the synthetic fixture)",
        "clt": "compare renormalised errors with samples of the limit U",
        "check": "run the acceptance suite",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, help="INI file with a section named after the command")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--threads", type=int, help="worker processes for replicate loops")
        if name == "check":
            sp.add_argument("--only", type=lambda s: [int(x) for x in s.split(",")],
                            help="comma-separated criterion numbers (default: all)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else None
        cfg = build_config(args.command, text,
                           overrides={"seed": args.seed, "output_dir": args.out, "threads": args.threads})
        kwargs = {"only": args.only} if args.command == "check" else {}
        _, code = run_experiment(cfg, **kwargs)
        return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
