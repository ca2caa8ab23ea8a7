"""Command-line entry point: ``python -m app.cli <command> ...``."""

import argparse
import sys
from typing import Dict, List

import pandas as pd

from app.brw.errors import CalibrationError, ConfigError
from app.brw.model import Family, Regime, calibrate
from app.harness.acceptance import CHECKS, verify
from app.harness.config import AnalysisBlock, ModelBlock, load_config
from app.harness.core import ExperimentRunner, StageResult, phi_report, run_fit
from app.harness.exporter import ExporterTool


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", default=None, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--replicas", type=int, default=None, help="engine replicas")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--output-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brw", description="Killed branching random walk toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    phi = sub.add_parser("phi", help="calibrate a model and print its Biggins transform")
    phi.add_argument("--family", choices=[f.value for f in Family], default=Family.LATTICE_BINARY.value)
    phi.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.BOUNDARY.value)
    phi.add_argument("--sigma2", type=float, default=None)
    phi.add_argument("--a", type=float, default=None)
    phi.add_argument("--gamma", type=float, default=None)
    phi.add_argument("--rho", type=float, default=None)
    phi.add_argument("--theta", type=float, nargs="+", default=[0.0, 0.5, 1.0, 1.5, 2.0])

    for name, text in (
        ("renewal", "tabulate the renewal function"),
        ("simulate", "run the martingale engine"),
        ("spine-tail", "importance-sampled tails next to naive estimates"),
        ("perpetuity", "perpetuity samples, moment probe and excursions"),
    ):
        _add_config_args(sub.add_parser(name, help=text))

    explore = sub.add_parser("explore-conjecture", help="exploratory tail ratio across x")
    _add_config_args(explore)
    explore.add_argument("--y", type=float, required=True)

    defaults = AnalysisBlock()
    fit = sub.add_parser("fit", help="fit the tail of one CSV column")
    fit.add_argument("--input", required=True)
    fit.add_argument("--column", default=defaults.column)
    fit.add_argument("--kind", choices=["exponential", "power"], default=defaults.kind.value)
    fit.add_argument("--q-lo", type=float, default=None)
    fit.add_argument("--q-hi", type=float, default=None)
    fit.add_argument("--bootstrap", type=int, default=defaults.bootstrap)
    fit.add_argument("--min-samples", type=int, default=defaults.min_samples)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--output-dir", default="outputs")

    check = sub.add_parser("verify", help="run one acceptance criterion")
    check.add_argument("criterion", choices=sorted(CHECKS, key=lambda k: int(k[2:])))
    check.add_argument("--scale", type=float, default=1.0)
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--workers", type=int, default=1)
    check.add_argument("--output-dir", default="outputs")

    serve = sub.add_parser("serve", help="serve the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _report(result: StageResult) -> int:
    if not result.ok:
        print(f"error in stage {result.message}", file=sys.stderr)
        return 1
    for name, path in result.outputs.items():
        print(f"{name}: {path}")
    return 0


def _phi(args: argparse.Namespace) -> int:
    free: Dict[str, float] = {}
    if args.sigma2 is not None:
        free["sigma2"] = args.sigma2
    if args.a is not None:
        free["a"] = args.a
    try:
        calibrate(args.family, free, args.regime, gamma=args.gamma, rho=args.rho)
    except CalibrationError as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        for key, value in e.residuals.items():
            print(f"  {key} = {value:.6g}", file=sys.stderr)
        return 1
    block = ModelBlock(family=args.family, regime=args.regime, sigma2=args.sigma2, a=args.a,
                       gamma=args.gamma, rho=args.rho)
    report = phi_report(block, args.theta)
    model = report.model
    print(f"family {model.family.value}, regime {model.regime.value}, hash {report.model_hash}")
    for key, value in model.displacement_params.items():
        print(f"  {key} = {value:.10g}")
    if model.kappa is not None:
        print(f"  kappa = {model.kappa:.10g}, gamma = {model.gamma:.6g}, rho = {model.rho:.6g}")
    for key, value in report.residuals.items():
        print(f"  {key} = {value:.3e}")
    table = pd.DataFrame([row.model_dump() for row in report.rows])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.12g}"))
    return 0


def _runner(args: argparse.Namespace) -> ExperimentRunner:
    overrides = {
        "seed": args.seed, "engine.replicas": args.replicas,
        "workers": args.workers, "output_dir": args.output_dir,
    }
    return ExperimentRunner(load_config(args.config, overrides))


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "phi":
        return _phi(args)

    if args.command == "serve":
        import uvicorn

        uvicorn.run("app.main:app", host=args.host, port=args.port)
        return 0

    if args.command == "fit":
        q_range = None
        if args.q_lo is not None or args.q_hi is not None:
            if args.q_lo is None or args.q_hi is None:
                print("error: --q-lo and --q-hi go together", file=sys.stderr)
                return 2
            q_range = (args.q_lo, args.q_hi)
        return _report(run_fit(args.input, args.column, args.kind, args.output_dir, q_range,
                               args.bootstrap, args.seed, args.min_samples))

    if args.command == "verify":
        try:
            result = verify(args.criterion, args.scale, args.seed, args.workers, args.output_dir)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        path = ExporterTool.export_json(result, args.output_dir, f"verify_{result.criterion}")
        print(f"{result.criterion}: {'PASS' if result.passed else 'FAIL'} "
              f"({result.seconds:.1f}s, budget {result.budget_seconds:.0f}s) -> {path}")
        return 0 if result.passed else 1

    try:
        runner = _runner(args)
    except ConfigError as e:
        print(f"error in stage config: {e}", file=sys.stderr)
        return 1
    stages = {
        "renewal": runner.run_renewal,
        "simulate": runner.run_simulate,
        "spine-tail": runner.run_spine_tail,
        "perpetuity": runner.run_perpetuity,
        "explore-conjecture": lambda: runner.run_conjecture(args.y),
    }
    return _report(stages[args.command]())


if __name__ == "__main__":
    sys.exit(main())
