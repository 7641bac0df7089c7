"""Command-line entry point: ``xymbl {quench,spectrum,gapratio,sweep,fit} ...``.

Exit status is 0 on success. Failures print a one-line JSON object
(``{"error": ..., "message": ...}``) to stderr and exit with 2 for invalid
input, 3 for failed realization tasks and 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (curve_crossing, ergodic_boundary, extract_w_star, fit_beta_vs_size, fit_decay_law,
                       fit_power_law)
from .dynamics import ImbalanceTrace
from .experiment import SpecError, TaskFailure, load_spec, run_experiment

EXIT_INPUT, EXIT_TASKS, EXIT_OTHER = 2, 3, 1
_MODE_OF = {"quench": "Quench", "spectrum": "Spectrum", "gapratio": "GapRatio"}


class InputError(ValueError):
    pass


def read_columns(path, required: list[str], optional: list[str] = ()) -> dict[str, np.ndarray]:
    """Numeric CSV columns by header name; errors carry ``file:line``."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}:1: empty file")
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}:1: missing column(s) {missing}; header is {header}")
        wanted = [c for c in [*required, *optional] if c in header]
        cols = {c: [] for c in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for c in wanted:
                try:
                    cols[c].append(float(row[header.index(c)]))
                except ValueError:
                    raise InputError(f"{path}:{lineno}: column {c!r}: not a number: {row[header.index(c)]!r}")
    return {c: np.array(v) for c, v in cols.items()}


def _table(rows: list[tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _emit(report: dict, table: list[tuple[str, object]], args) -> None:
    text = json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"fit_{args.kind}.json").write_text(text)
        print(_table(table))
    else:
        sys.stdout.write(text)


def _cmd_fit(args) -> int:
    kind = args.kind
    if kind == "power":
        src = Path(args.inputs[0])
        try:
            trace = ImbalanceTrace.from_csv(src.read_text(), str(src))
        except OSError as exc:
            raise InputError(f"{src}: {exc.strerror}") from None
        except ValueError as exc:
            raise InputError(str(exc)) from None
        fit = fit_power_law(trace, args.t_lo, args.t_hi)
        report = {"kind": "PowerLawFit", "input": str(src), **fit.to_dict()}
        table = [("beta", fit.beta), ("beta_stderr", fit.beta_stderr), ("amplitude", fit.amplitude),
                 ("window_ns", fit.fit_window), ("points", fit.n_points)]
    elif kind == "size":
        c = read_columns(args.inputs[0], ["L", "beta"], ["beta_stderr"])
        err = c.get("beta_stderr", np.zeros_like(c["beta"]))
        slope, intercept, se = fit_beta_vs_size(np.column_stack([c["L"], c["beta"], err]))
        report = {"kind": "BetaVsSize", "input": args.inputs[0], "slope": slope, "intercept": intercept,
                  "slope_stderr": se}
        table = [("slope", slope), ("slope_stderr", se), ("intercept", intercept)]
    elif kind == "decay":
        c = read_columns(args.inputs[0], ["W_MHz", "beta"], ["beta_stderr"])
        err = c.get("beta_stderr", np.zeros_like(c["beta"]))
        decay = fit_decay_law(np.column_stack([c["W_MHz"], c["beta"], err]))
        ws = extract_w_star(decay, args.threshold, args.n_rep, args.seed)
        report = {"kind": "DecayLawFit", "input": args.inputs[0], "decay": decay.to_dict(),
                  "w_star": ws.to_dict()}
        table = [("C", decay.c), ("gamma", decay.gamma), ("gamma_stderr", decay.gamma_stderr),
                 ("W*_MHz", ws.w_star), ("W*_std_MHz", ws.w_star_std), ("rejected", ws.rejected_fraction)]
    elif kind == "boundary":
        c = read_columns(args.inputs[0], ["W_MHz", "mean_r"])
        b = ergodic_boundary(np.column_stack([c["W_MHz"], c["mean_r"]]), args.threshold_r)
        report = {"kind": "ErgodicBoundary", "input": args.inputs[0], "threshold_r": args.threshold_r,
                  **b.to_dict()}
        table = [("W_E_MHz", b.w), ("flag", b.flag)]
    else:  # crossing
        if len(args.inputs) != 2:
            raise InputError("crossing needs exactly two gap-ratio CSV files")
        curves = []
        for p in args.inputs:
            c = read_columns(p, ["W_MHz", "mean_r"])
            curves.append(np.column_stack([c["W_MHz"], c["mean_r"]]))
        wc = curve_crossing(*curves)
        report = {"kind": "CurveCrossing", "inputs": list(args.inputs), "w_c": wc, "crossing": wc is not None}
        table = [("W_c_MHz", wc if wc is not None else "no crossing")]
    _emit(report, table, args)
    return 0


def _cmd_run(args) -> int:
    spec = load_spec(args.config)
    changes = {}
    if args.command in _MODE_OF:
        changes["mode"] = _MODE_OF[args.command]
    if args.seed is not None:
        changes["seed_base"] = args.seed
    if args.out is not None:
        changes["output"] = str(args.out)
    if changes:
        try:
            spec = spec.replace(**changes)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None
    manifest = run_experiment(spec, spec.output, workers=args.workers, resume=args.resume)
    summary = json.loads((Path(spec.output) / "summary.json").read_text())
    print(json.dumps({"status": manifest.status, "output": spec.output, "tasks": len(manifest.tasks),
                      "warnings": summary.get("warnings", [])}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xymbl", description="Disordered XY model ensembles and fits.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("quench", "imbalance dynamics over a disorder ensemble"),
                        ("spectrum", "interior eigenvalues per realization"),
                        ("gapratio", "mean gap ratio versus disorder"),
                        ("sweep", "run the mode named in the configuration")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path, help="JSON experiment file")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--workers", type=int, help="worker processes (default: $XYMBL_WORKERS or CPU count)")
        p.add_argument("--seed", type=int, help="seed_base override (unsigned 64-bit)")
        p.add_argument("--resume", action="store_true", help="skip tasks the manifest records as done")
        p.set_defaults(func=_cmd_run)
    f = sub.add_parser("fit", help="fit previously written CSV files")
    f.add_argument("kind", choices=["power", "size", "decay", "boundary", "crossing"])
    f.add_argument("inputs", nargs="+", help="input CSV file(s)")
    f.add_argument("--t-lo", type=float, default=250.0, help="fit window start, ns")
    f.add_argument("--t-hi", type=float, default=1000.0, help="fit window end, ns")
    f.add_argument("--threshold", type=float, default=1e-2, help="beta threshold for W*")
    f.add_argument("--threshold-r", type=float, default=0.525, help="gap-ratio threshold for W_E")
    f.add_argument("--n-rep", type=int, default=5000, help="resampling draws for the W* spread")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", type=Path, help="write JSON here and print a table instead")
    f.set_defaults(func=_cmd_fit)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TaskFailure as exc:
        code, payload = EXIT_TASKS, {"error": "TaskFailure", "message": str(exc), "failed": exc.failed}
    except (SpecError, InputError, ValueError, KeyError) as exc:
        code, payload = EXIT_INPUT, {"error": type(exc).__name__, "message": str(exc)}
    except Exception as exc:
        code, payload = EXIT_OTHER, {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
