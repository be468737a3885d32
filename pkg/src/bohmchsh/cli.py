"""Command line entry point: ``bohmchsh {analytic,run,counterfactual,equivariance}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from . import harness
from . import spin_analytic as sa
from .field_engine import BoundaryError, EmptyBranchError, GridSpec, PhysParams

log = logging.getLogger("bohmchsh")


def _angles(text: str) -> tuple:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated angles in degrees")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pair(text: str) -> str:
    if text not in harness.PAIRS:
        raise argparse.ArgumentTypeError(f"pair must be one of {', '.join(harness.PAIRS)}")
    return text


def _add_physics(p: argparse.ArgumentParser) -> None:
    p.add_argument("--angles", type=_angles, default=harness.DEFAULT_ANGLES_DEG,
                   help="a,a',b,b' in degrees (default 90,0,45,135)")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=512, help="points per axis (power of two)")
    p.add_argument("--extent", type=float, default=40.0, help="half extent L")
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--dp", type=float, default=5.0)
    p.add_argument("--drift-t", type=float, default=2.0)
    p.add_argument("--substeps", type=int, default=64)
    p.add_argument("--out", default="report.json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bohmchsh", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analytic", help="exact singlet correlators, CHSH and valuation table")
    an.add_argument("--angles", type=_angles, default=harness.DEFAULT_ANGLES_DEG)
    an.add_argument("--optimize", action="store_true", help="also search CHSH-optimal angles")

    run = sub.add_parser("run", help="simulate one experiment configuration")
    run.add_argument("--experiment", choices=("config1", "config2", "config3"), default="config2")
    _add_physics(run)
    run.add_argument("--densities", default=None, help="directory for density snapshot CSVs")
    run.add_argument("--trajectories", default=None, help="trajectory CSV path (records.csv beside it)")
    run.add_argument("--pair", type=_pair, default=None, help="config3 pair; all four if omitted")

    cf = sub.add_parser("counterfactual", help="screened vs unscreened runs per initial configuration")
    cf.add_argument("--pair", type=_pair, default="ab'")
    _add_physics(cf)
    cf.set_defaults(samples=1000)

    eq = sub.add_parser("equivariance", help="|psi|^2 checks on the unscreened one-apparatus run")
    _add_physics(eq)
    return ap


def _config(args, kind: str) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        kind=kind,
        angles_deg=args.angles,
        phys=PhysParams(sigma0=args.sigma0, dp=args.dp, drift_T=args.drift_t, substeps=args.substeps),
        grid=GridSpec(args.grid, args.extent),
        n_samples=args.samples,
        seed=args.seed,
        pair=getattr(args, "pair", None) if kind == "config3" else None,
    )


def cmd_analytic(args) -> int:
    angles = [math.radians(a) for a in args.angles]
    summary = sa.analytic_summary(angles)
    table = sa.valuation_table()
    doc = {
        "state": "singlet",
        "combination": harness.COMBINATION,
        "angles_deg": list(args.angles),
        "correlators": summary["correlators"],
        "S": summary["S"],
        "abs_S": abs(summary["S"]),
        "tsirelson": sa.TSIRELSON,
        "valuation_table": [row._asdict() for row in table],
        "valuation_all_pm2": all(r.combination in (-2, 2) for r in table),
    }
    if args.optimize:
        best, value = sa.chsh_optimal_angles(sa.singlet())
        doc["optimal"] = {"angles_deg": [math.degrees(d.theta) for d in best], "S": value}
    print(json.dumps(doc, indent=2))
    return 0 if doc["valuation_all_pm2"] else 1


def _finish(doc, out) -> int:
    harness.emit_report(doc, out)
    passed = doc.passed if hasattr(doc, "passed") else doc["passed"]
    log.info("wrote %s (passed=%s)", out, passed)
    return 0 if passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "analytic":
        return cmd_analytic(args)
    harness.verify_default_angles()
    try:
        if args.command == "run":
            cfg = _config(args, args.experiment)
            rep = harness.run_experiment(cfg, densities=args.densities, trajectories=args.trajectories)
            return _finish(rep, args.out)
        if args.command == "counterfactual":
            cfg = _config(args, "config2")
            return _finish(harness.counterfactual_comparison(cfg, args.pair), args.out)
        if args.command == "equivariance":
            return _finish(harness.equivariance_report(_config(args, "config2")), args.out)
    except (harness.InvariantError, BoundaryError, EmptyBranchError, FileNotFoundError, ValueError) as exc:
        print(f"bohmchsh: error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
