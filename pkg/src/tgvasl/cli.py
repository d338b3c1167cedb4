"""Command-line entry point: phantom, fit, eval, replica, plotdata.

Exit codes: 0 success, 1 solver failure, 2 I/O or configuration error.
``TGVASL_NUM_THREADS`` sets the default number of worker processes.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as vio
from . import pipeline
from .config import PRESETS, ConfigError, RunConfig
from .evaluation import (StatsReport, boxplot_table, diffmap_table, read_report_csv,
                         write_csv)
from .io import VolumeFormatError
from .phantom import CASES
from .solver import SolverStateError, StepFailure

EXIT_OK, EXIT_SOLVER, EXIT_IO = 0, 1, 2
THREADS_ENV = "TGVASL_NUM_THREADS"

log = logging.getLogger("tgvasl")


def _threads(default):
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.phantom.seed = args.seed
        cfg.baseline.seed = args.seed
    return cfg


def cmd_phantom(args) -> int:
    cfg = _load_config(args)
    data = pipeline.simulate(cfg, case=args.case, sigma=args.sigma)
    paths = pipeline.write_phantom(args.out_dir, data, raw=args.raw)
    info = {"case": args.case or cfg.phantom.case, "seed": cfg.phantom.seed,
            "noise_sigma": data.noise_sigma, "grid": list(data.m0.shape),
            "n_frames": int(data.pwi.shape[0]), "config_sha256": cfg.digest(), "files": paths}
    Path(args.out_dir, "phantom.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"wrote {len(paths)} volumes to {args.out_dir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    d, proto, vs = vio.load_series(args.input)

    def progress(step, it, value, tau, beta):
        log.info("GN %d iter %d objective %.6g tau %.3g beta %.3g", step, it, value, tau, beta)

    maps, info = pipeline.fit(d, proto, args.method, cfg, callback=progress)
    paths = pipeline.write_fit(args.out_dir, maps, info, cfg, input_path=args.input, vs=vs)
    print(f"{args.method}: wrote {', '.join(Path(p).name for p in paths.values())} "
          f"in {info['wall_time_s']:.1f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref, masks = pipeline.load_reference(args.reference)
    maps = pipeline.load_maps(args.maps)
    if maps.grid != ref.grid:
        raise VolumeFormatError(args.maps, 0, f"map grid {maps.grid} differs from reference {ref.grid}")
    report, diffs = pipeline.evaluate(maps, ref, masks, label=args.label)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "stats.json")
    report.to_csv(out / "stats.csv")
    vs = pipeline.voxel_size(ref.grid)
    for q, vol in diffs.items():
        vio.write_volume(out / f"reldiff_{q}.nii", vol, vs, f"relative difference {q}; NaN outside")
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_replica(args) -> int:
    cfg = _load_config(args)
    jobs = _threads(cfg.replica.jobs) if args.jobs is None else args.jobs
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, report, gt = pipeline.run_replica(
        cfg, args.method, case=args.case, n=args.n, seed_base=args.seed, jobs=jobs,
        out_dir=out / "realizations",
        progress=lambda i, n: log.info("realization %d/%d done", i, n))
    vs = pipeline.voxel_size(gt.maps.grid)
    vio.write_volume(out / "median_cbf.nii", summary.median.cbf_external, vs, "CBF ml/100g/min")
    vio.write_volume(out / "median_att.nii", summary.median.att, vs, "ATT s")
    vio.write_volume(out / "iqr_cbf.nii", summary.iqr.cbf_external, vs, "CBF IQR ml/100g/min")
    vio.write_volume(out / "iqr_att.nii", summary.iqr.att, vs, "ATT IQR s")
    for q, vol in summary.relative_iqr(gt.maps).items():
        vio.write_volume(out / f"rel_iqr_{q}.nii", vol, vs, "IQR / truth in %; NaN outside")
    report.to_json(out / "stats.json")
    report.to_csv(out / "stats.csv")
    meta = {"method": args.method, "n_ok": summary.n_ok, "failed": summary.failed,
            "config_sha256": cfg.digest(), "units": pipeline.UNITS}
    (out / "replica.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"{summary.n_ok} realizations aggregated, {len(summary.failed)} failed")
    print(report.to_csv(), end="")
    return EXIT_OK if summary.n_ok else EXIT_SOLVER


def cmd_plotdata(args) -> int:
    reports = []
    for p in args.reports:
        p = Path(p)
        if p.suffix == ".csv":
            reports.extend(read_report_csv(p))
        else:
            reports.append(StatsReport.from_json(p))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "boxplot.csv", "w") as fh:
        write_csv(fh, boxplot_table(reports))
    rows = []
    for p in args.diff or []:
        rows.extend(diffmap_table(vio.read_volume(p), axis=2, index=args.slice, name=Path(p).stem))
    with open(out / "diffmap.csv", "w") as fh:
        write_csv(fh, rows, fieldnames=("name", "row", "col", "value"))
    print(f"wrote boxplot.csv ({len(reports)} reports) and diffmap.csv ({len(rows)} cells)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgvasl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="calibrated settings the config file is layered over (default: desk)")
        sp.add_argument("--out-dir", required=True)
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("phantom", help="simulate ground truth and a PWI series")
    common(sp)
    sp.add_argument("--case", choices=CASES, default=None)
    sp.add_argument("--sigma", type=float, default=None,
                    help="per-channel noise std; 0 for noiseless data (default: from target tSNR)")
    sp.add_argument("--raw", action="store_true", help="also write |control| and |label| series")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("fit", help="fit CBF/ATT maps to a PWI series")
    common(sp)
    sp.add_argument("input", help="4-D series (.nii) with a .json sidecar next to it")
    sp.add_argument("--method", choices=pipeline.METHODS, default="tgv")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("eval", help="region statistics against a phantom's ground truth")
    sp.add_argument("--maps", required=True, help="directory with cbf.nii and att.nii")
    sp.add_argument("--reference", required=True, help="phantom output directory")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--label", default="")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("replica", help="pseudo-replica study")
    common(sp)
    sp.add_argument("--method", choices=pipeline.METHODS, default="tgv")
    sp.add_argument("--case", choices=CASES, default=None)
    sp.add_argument("--n", type=int, default=None, help="number of realizations")
    sp.add_argument("--jobs", type=int, default=None)
    sp.set_defaults(func=cmd_replica)

    sp = sub.add_parser("plotdata", help="CSV tables for external plotting")
    sp.add_argument("reports", nargs="*", help="stats.json or stats.csv files")
    sp.add_argument("--diff", nargs="*", help="relative-difference volumes")
    sp.add_argument("--slice", type=int, default=None, help="slice index along the last axis")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StepFailure, SolverStateError) as exc:
        diag = getattr(exc, "diagnostics", None)
        print(f"solver failure: {exc}" + (f" {diag}" if diag else ""), file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
