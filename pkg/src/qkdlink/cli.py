"""Phase-encoded BB84 link simulator and key-rate calculator.

Exit codes: 0 success, 1 I/O error, 2 invalid input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
from pathlib import Path

import numpy as np

from . import __version__, security, timing
from .errors import (CalibrationError, ConfigError, CorrectionFailure, DomainError, FitError,
                     ThresholdError)
from .experiment import (MODES, SWEEP_VARIABLES, ResultsTable, SweepSpec,
                         calibrate, load_config, load_targets, report, run, to_csv)

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_NUMERIC = 3


def _override_run(cfg, args):
    changes = {}
    for name in ("seed", "mode", "n_slots"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if changes:
        cfg = cfg.replace(run=dataclasses.replace(cfg.run, **changes))
    return cfg


def _emit(table, out, dat):
    if out is None:
        sys.stdout.write(to_csv(table))
    else:
        for path in report(table, out, dat=dat):
            print(f"wrote {path}", file=sys.stderr)


def cmd_run(args):
    cfg = _override_run(load_config(args.config), args)
    _emit(run(cfg, workers=args.workers), args.out, args.dat)


def cmd_sweep(args):
    cfg = _override_run(load_config(args.config), args)
    scale = args.scale or ("log" if args.var == "mu" else "linear")
    cfg = cfg.replace(sweep=SweepSpec(args.var, args.start, args.stop, args.points, scale))
    _emit(run(cfg, workers=args.workers), args.out, args.dat)


def cmd_calibrate(args):
    cfg = load_config(args.config)
    targets, parameters = load_targets(args.targets)
    result = calibrate(targets, parameters, max_residual=args.max_residual)
    print(result.summary())
    dest = args.out or args.config
    if dest in security.CANONICAL:
        print("shipped scenario left unchanged; pass --out to save the calibrated config",
              file=sys.stderr)
        return
    result.apply(cfg).save(dest)
    print(f"calibrated config written to {dest}", file=sys.stderr)


def read_histogram(path, bin_width_ns=4.0):
    """Histogram from a CSV of bin centres (``time_ns,counts``) or raw
    click offsets (a single ``time_ns`` column)."""
    text = Path(path).read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not rows:
        raise ConfigError("histogram file is empty", str(path))
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"non-numeric value: {exc}", str(path)) from None
    if "time_ns" not in header:
        raise ConfigError("needs a time_ns column", str(path))
    t = data[:, header.index("time_ns")] if len(data) else np.empty(0)
    if "counts" in header:
        counts = data[:, header.index("counts")]
        if len(t) < 2:
            raise ConfigError("need at least two bins", str(path))
        width = float(np.median(np.diff(t)))
        if not np.allclose(np.diff(t), width, rtol=1e-6):
            raise ConfigError("bins must be evenly spaced", str(path))
        return timing.TimingHistogram(width * 1e-9, (t[0] - width / 2) * 1e-9,
                                      np.rint(counts).astype(np.int64))
    if not len(t):
        raise ConfigError("no click times", str(path))
    return timing.build_histogram(t / 1e9, bin_width=bin_width_ns / 1e9)


def cmd_fit_histogram(args):
    hist = read_histogram(args.input, args.bin_width_ns)
    fit = timing.fit_peaks(hist, bit_delay=args.bit_delay_ns / 1e9)
    row = {
        "bit0_center_ns": fit.primary_peak_centers[0] * 1e9,
        "bit1_center_ns": fit.primary_peak_centers[1] * 1e9,
        "fwhm_ns": fit.shared_fwhm * 1e9,
        "path_ratio": fit.path_ratio,
        "raman_detected": fit.raman_detected,
        "raman_delay_ns": fit.raman_delay * 1e9 if fit.raman_detected else float("nan"),
        "raman_ratio": fit.raman_ratio if fit.raman_detected else float("nan"),
        "pedestal": fit.pedestal,
        "residual_norm": fit.residual_norm,
    }
    if args.out:
        table = ResultsTable({k: [v] for k, v in row.items()},
                             {"source": str(args.input), "code_version": __version__})
        report(table, args.out)
    for k, v in row.items():
        print(f"{k} = {v:.6g}" if isinstance(v, float) else f"{k} = {v}")


def cmd_show(args):
    sys.stdout.write(load_config(args.name).to_string())


def _add_run_overrides(p):
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--mode", choices=MODES, help="override run.mode")
    p.add_argument("--n-slots", dest="n_slots", type=int, help="override run.n_slots")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--dat", action="store_true", help="also write a gnuplot .dat file")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for sweeps")


def build_parser():
    parser = argparse.ArgumentParser(prog="qkdlink", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="evaluate a configured scenario or sweep")
    p.add_argument("--config", required=True, help="config file or shipped scenario name")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one variable of a scenario")
    p.add_argument("--var", required=True, choices=sorted(SWEEP_VARIABLES))
    p.add_argument("--from", dest="start", type=float, required=True,
                   help="start value (km for distance, ns for window)")
    p.add_argument("--to", dest="stop", type=float, required=True)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--scale", choices=("linear", "log"),
                   help="spacing (default: log for mu, else linear)")
    p.add_argument("--config", default="electrical_sync_50km",
                   help="config file or shipped scenario name")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit link parameters to measured targets")
    p.add_argument("--config", required=True, help="config to update with the fitted values")
    p.add_argument("--targets", required=True, help="targets file")
    p.add_argument("--out", help="write the calibrated config here instead")
    p.add_argument("--max-residual", type=float, default=0.2,
                   help="largest accepted relative residual")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit-histogram", help="fit the arrival-time peak model")
    p.add_argument("--in", dest="input", required=True, help="histogram or click-time CSV")
    p.add_argument("--bit-delay-ns", type=float, default=320.0)
    p.add_argument("--bin-width-ns", type=float, default=4.0,
                   help="bin width when the file holds raw click times")
    p.add_argument("--out", help="write the fit as a one-row CSV")
    p.set_defaults(func=cmd_fit_histogram)

    p = sub.add_parser("show-config", help="print a shipped or user config in full")
    p.add_argument("name")
    p.set_defaults(func=cmd_show)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, DomainError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CalibrationError, ThresholdError, FitError, CorrectionFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
