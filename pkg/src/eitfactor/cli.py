"""Command line entry point ``eitfactor``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 incompatible inputs. Failures print a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ExperimentConfig
from .errors import ConfigError, EitError
from .facto import ReconstructionReport
from .fem import DataMatrix
from .linalg import thread_cap

logger = logging.getLogger("eitfactor")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eitfactor", description="Factorization-method EIT toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "simulate reference, inclusion and difference data"),
                       ("reconstruct", "compute the indicator and its thresholded components"),
                       ("evaluate", "tabulate localisation errors (runs sweeps when configured)")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path, help="output directory (default from the config)")
        s.add_argument("--seed", type=int, help="noise seed")
        s.add_argument("--mode", choices=("exact", "free_space", "ntd_shortcut"))
        s.add_argument("--iso", type=float, help="iso level in (0, 1)")
        s.add_argument("--delta", type=float, help="relative noise level")
        s.add_argument("--gamma", type=float, help="background perturbation level")
        s.add_argument("--allow-inverse-crime", action="store_true")
        s.add_argument("--cache", type=Path, help="directory for cached dipole projections")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "reconstruct":
            s.add_argument("--data", type=Path, help="difference data JSON (default <out>/diff.json)")
        if name == "evaluate":
            s.add_argument("--report", type=Path, action="append", default=[],
                           help="report JSON to tabulate (repeatable)")
    return p


def _configure(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, allow_inverse_crime=args.allow_inverse_crime)
    cfg = cfg.with_overrides(seed=args.seed, mode=args.mode, iso_level=args.iso, delta=args.delta,
                             gamma=args.gamma)
    return cfg


def _run(args) -> int:
    from . import pipeline

    cfg = _configure(args)
    out = args.out if args.out is not None else cfg.output_path
    cache = args.cache if args.cache is not None else cfg.cache_dir
    if args.command == "simulate":
        sim = pipeline.run_simulate(cfg, out)
        print(f"wrote {out}/ref.json, meas.json, diff.json ({sim.diff.shape[0]}x{sim.diff.shape[1]}, "
              f"delta={cfg.delta:g})")
    elif args.command == "reconstruct":
        data_path = args.data if args.data is not None else Path(out) / "diff.json"
        if not data_path.is_file():
            raise ConfigError(f"data file {data_path} does not exist; run simulate first")
        data = DataMatrix.load(data_path)
        res = pipeline.run_reconstruct(cfg, data, out, cache_dir=cache)
        rep = res.report
        msg = f"{len(rep.components)} component(s) at iso {rep.iso_level:g}"
        if rep.errors.get("full"):
            msg += f", E_c = {rep.errors['full']['mean']:.6g}"
        if rep.degenerate:
            msg += " (degenerate normalisation)"
        print(msg)
    else:
        reports = {}
        for path in args.report:
            reports[str(path)] = ReconstructionReport.load(path)
        if cfg.sweep:
            rows = pipeline.run_sweep(cfg, out, cache)
        else:
            if not reports and (Path(out) / "report.json").is_file():
                reports[cfg.name] = ReconstructionReport.load(Path(out) / "report.json")
            rows = pipeline.evaluate(reports)
        pipeline.write_metrics(rows, out)
        sys.stdout.write(pipeline.format_table(rows))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_cap()):
            return _run(args)
    except EitError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code,
               "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": 2, "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
