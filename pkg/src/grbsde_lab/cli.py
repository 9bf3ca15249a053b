"""Command-line front end: ``grbsde-lab run|converge|list``.

Exit codes: 0 when every check passes, 1 when a check fails (the report is
still written), 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .errors import BarrierCrossingError, ConfigurationError, LabError
from .scenarios import (
    bundled_paths,
    convergence_monotone,
    convergence_ratios,
    list_scenarios,
    load_scenario,
    run_convergence,
    run_scenario,
    validate,
)

logger = logging.getLogger("grbsde_lab")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2


def _fmt(v: float) -> str:
    return "%.17g" % v


def _setup_logging(verbose: bool):
    level = logging.DEBUG if verbose else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    color = sys.stderr.isatty() and not os.environ.get("NO_COLOR")
    if color:
        fmt = "\033[2m%(levelname)s\033[0m %(message)s"
    else:
        fmt = "%(levelname)s %(message)s"
    handler.setFormatter(logging.Formatter(fmt))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def write_panel_csv(path: Path, panel, n_paths: int):
    """Long-format panel: one row per (node, path) for the first ``n_paths`` paths.

    ``Z`` and the ``K`` increments belong to the step starting at the node and
    are empty at the terminal node.
    """
    n, N1 = panel.Y.shape
    d = panel.Z.shape[2]
    k = min(n_paths, n)
    times = panel.mesh.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "path", "Y"] + [f"Z_{j + 1}" for j in range(d)] + ["dK_plus", "dK_minus"])
        for i in range(N1):
            last = i == N1 - 1
            for p in range(k):
                row = [_fmt(times[i]), str(p), _fmt(panel.Y[p, i])]
                if last:
                    row += [""] * (d + 2)
                else:
                    row += [_fmt(z) for z in panel.Z[p, i]]
                    row += [_fmt(panel.K_plus_increments[p, i]), _fmt(panel.K_minus_increments[p, i])]
                w.writerow(row)


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["ensemble"]["seed"] = int(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_scenario(args.config), args)
    if args.dry_run:
        validate(cfg)
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    out_dir = Path(args.out_dir)
    result = run_scenario(cfg, threads=args.threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg["name"]
    write_panel_csv(out_dir / f"{name}_panel.csv", result.panel, int(cfg["panel_paths"]))
    with open(out_dir / f"{name}_report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.report(), fh, indent=2)
        fh.write("\n")
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.6g} tolerance={c.tolerance:.3g}")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def _parse_steps(text: str) -> List[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--steps must be a comma-separated list of integers, got {text!r}") from None
    if not steps or any(s < 1 for s in steps):
        raise ConfigurationError("--steps needs positive integers")
    return steps


def cmd_converge(args) -> int:
    cfg = _apply_overrides(load_scenario(args.config), args)
    steps = _parse_steps(args.steps)
    if "oracle" not in cfg:
        raise ConfigurationError(f"scenario {cfg['name']!r} has no oracle to converge against")
    if args.dry_run:
        validate(cfg)
        print(json.dumps({"scenario": cfg, "steps": steps}, indent=2, sort_keys=True))
        return EXIT_OK
    rows = run_convergence(cfg, steps, threads=args.threads)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{cfg['name']}_convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_steps", "Y0_error", "skorokhod_residual", "runtime_s"])
        for r in rows:
            w.writerow([r.n_steps, _fmt(r.Y0_error), _fmt(r.skorokhod_residual), _fmt(r.runtime_s)])
    for r in rows:
        print(f"n_steps={r.n_steps} Y0_error={r.Y0_error:.6g} skorokhod={r.skorokhod_residual:.3g} runtime_s={r.runtime_s:.3f}")
    ratios = convergence_ratios(rows)
    if ratios:
        print("error ratios: " + ", ".join(f"{q:.3f}" for q in ratios))
    ok = convergence_monotone(rows)
    print(("PASS" if ok else "FAIL") + " monotone error decay")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_list(args) -> int:
    for name, desc in list_scenarios():
        print(f"{name}\t{desc}")
    return EXIT_OK


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands reuse the options with suppressed defaults so a flag given
    # before the subcommand is not reset by the subparser.
    def d(v):
        return argparse.SUPPRESS if suppress else v

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(None), help="override the ensemble seed")
    common.add_argument("--out-dir", default=d("."), help="directory for CSV and JSON outputs")
    common.add_argument("--threads", type=int, default=d(1), help="threads for path generation")
    common.add_argument("--dry-run", action="store_true", default=d(False), help="validate and print the resolved scenario only")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grbsde-lab", description=__doc__.splitlines()[0], parents=[_common_options(False)]
    )
    common = _common_options(True)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one scenario and its checks")
    p.add_argument("config", help="scenario JSON file or bundled scenario name")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("converge", parents=[common], help="Y0 error under mesh refinement")
    p.add_argument("config", help="scenario JSON file or bundled scenario name")
    p.add_argument("--steps", default="10,20,40", help="comma-separated n_steps values")
    p.set_defaults(func=cmd_converge)
    p = sub.add_parser("list", parents=[common], help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def _resolve_config_arg(args):
    cfg = getattr(args, "config", None)
    if cfg is None or os.path.exists(cfg):
        return
    for p in bundled_paths():
        if p.stem == cfg:
            args.config = str(p)
            return


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    _resolve_config_arg(args)
    if args.threads < 1:
        logger.error("configuration error: --threads must be at least 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except BarrierCrossingError as exc:
        logger.error("configuration error: barrier order invariant L <= U (or L_T <= xi <= U_T) violated: %s", exc)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except LabError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
