"""Command-line front end.

Exit codes: 0 success, 1 user error (bad arguments, config or input file),
2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import io as fio
from .channel_algebra import NonInvertibleChannelError
from .dynamics import NumericalError
from .io import TrajectoryFormatError, validate_trajectory_file
from .nm_measures import EndingTimeNotReached, InsufficientDataError, analyze, ending_time
from .sweep import (
    ConfigError, PointRunner, RunSettings, convergence_study, grid_from_config, load_config,
    params_from_config, parse_assignment, prefix_sizes, provenance, run_sweep, save_point,
    settings_from_config,
)

CONFIG_ENV = "RMTQUBIT_CONFIG"
VERBS = ("point", "sweep", "measures", "criteria", "endtime", "converge")

__all__ = ["main", "validate_trajectory_file"]


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rmtqubit", description="Qubit coupled to a random-matrix environment: "
                "channel simulation and non-Markovianity measures.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                   help=f"flat key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--output", "-o", help="output file, or directory for point/sweep")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--threads", type=int, help="worker threads for realizations")
    p.add_argument("--blp-R", dest="blp_R", type=float, choices=(1.0, 2.0),
                   help="Bloch-vector length of the state pair (2: orthogonal pure states)")
    p.add_argument("--delta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--env-dim", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--traj", help="trajectory CSV (measures, criteria, endtime)")
    p.add_argument("--prefixes", help="comma-separated prefix sizes (converge)")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints (sweep)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> dict:
    cfg = {}
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg.update(load_config(args.config))
    for item in args.overrides:
        key, value = parse_assignment(item)
        cfg[key] = value
    flags = {"threads": args.threads, "blp_R": args.blp_R, "delta": args.delta, "lambda": args.lam,
             "env_dim": args.env_dim, "n_samples": args.n_samples, "seed": args.seed,
             "prefixes": args.prefixes}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _emit(text: str, output) -> None:
    if output:
        fio.atomic_write(output, text)
    else:
        sys.stdout.write(text)


def _load_traj(args):
    if not args.traj:
        raise UserError(f"{args.verb} needs --traj <file>")
    return validate_trajectory_file(args.traj)


def _traj_provenance(settings: RunSettings, traj) -> dict:
    out = provenance(settings)
    out["dt"] = float(traj.t[1] - traj.t[0]) if traj.t.size > 1 else None
    return out


def cmd_point(args, cfg):
    params = params_from_config(cfg)
    settings = settings_from_config(cfg)
    result = PointRunner(params, settings).run()
    out_dir = Path(args.output or ".")
    save_point(out_dir, params, result, settings)
    print(json.dumps(result.report.to_dict(), sort_keys=True))
    return 0


def cmd_sweep(args, cfg):
    grid = grid_from_config(cfg)
    settings = settings_from_config(cfg)
    records = run_sweep(grid, Path(args.output or "sweep_out"), settings, resume=not args.no_resume)
    failed = [r for r in records if any(f.startswith("failed:") for f in r.flags)]
    print(f"{len(records)} points, {len(failed)} failed")
    return 2 if failed else 0


def cmd_measures(args, cfg):
    traj = _load_traj(args)
    settings = settings_from_config(cfg)
    report = analyze(traj, settings.measure).report
    _emit(fio.report_text(report.to_dict(), _traj_provenance(settings, traj)), args.output)
    return 0


def cmd_criteria(args, cfg):
    traj = _load_traj(args)
    settings = settings_from_config(cfg)
    a = analyze(traj, settings.measure)
    p = traj.params
    header = (f"delta={p.delta!r} lambda={p.lam!r} N={p.env_dim} N_sam={traj.n_accumulated} "
              f"seed={p.master_seed} blp_R={settings.measure.blp_R:g} t_end={a.report.t_end!r}")
    _emit(fio.criteria_text(a.criteria_table(), header), args.output)
    return 0


def cmd_endtime(args, cfg):
    traj = _load_traj(args)
    settings = settings_from_config(cfg)
    t_end = ending_time(traj, settings.measure.purity_threshold)
    _emit(f"{t_end!r}\n", args.output)
    return 0


def cmd_converge(args, cfg):
    params = params_from_config(cfg)
    settings = settings_from_config(cfg)
    if "prefixes" in cfg:
        try:
            sizes = [int(x) for x in str(cfg["prefixes"]).split(",") if x.strip()]
        except ValueError:
            raise UserError(f"bad prefix list {cfg['prefixes']!r}") from None
    else:
        sizes = list(prefix_sizes(params.n_samples))
    series = convergence_study(params, sizes, settings)
    buf = io.StringIO()
    buf.write(f"# delta={params.delta!r} lambda={params.lam!r} N={params.env_dim} "
              f"seed={params.master_seed} blp_R={settings.measure.blp_R:g}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_samples", "t_end", "nm_rhp", "nm_blp", "nm_mdr", "flags"])
    for k, rep in zip(series.sample_prefix_sizes, series.reports):
        w.writerow([int(k), repr(rep.t_end), repr(rep.nm_rhp), repr(rep.nm_blp), repr(rep.nm_mdr),
                    ";".join(rep.flags)])
    _emit(buf.getvalue(), args.output)
    return 0


COMMANDS = {
    "point": cmd_point, "sweep": cmd_sweep, "measures": cmd_measures,
    "criteria": cmd_criteria, "endtime": cmd_endtime, "converge": cmd_converge,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.verb](args, cfg)
    except (ConfigError, TrajectoryFormatError, UserError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, EndingTimeNotReached, NonInvertibleChannelError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
