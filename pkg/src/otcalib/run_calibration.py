import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from otcalib.calib import CalibrationReport, CalibrationResult, EpochRecord, calibrate, smooth_and_recalibrate
from otcalib.errors import ConfigError, ConvergenceError, NumericalError
from otcalib.hjb import dump_slices
from otcalib.market import CalibrationProblem, Instrument, build_problem
from otcalib.models import ScenarioConfig, load_scenario
from otcalib.pricing import ModelSurfaces, price_instruments, quote_implied_vol
from otcalib.validate import (
    Constant,
    bump_ladder,
    discounted_fp_residual,
    discounted_mass,
    estimate_density,
    euler_simulate,
    mc_price,
    quarter_times,
    write_density_check,
    write_paths_sample,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_BAD_CONFIG = 3
EXIT_NUMERICAL = 4

FLOAT_FORMAT = "%.17g"
MARKET_COLUMNS = ["maturity_days", "strike", "price", "implied_vol"]
PRICE_COLUMNS = ["maturity_days", "strike", "market_price", "model_price", "market_iv", "model_iv", "abs_iv_error"]


@dataclass(frozen=True)
class RunConfig:
    config_path: Path
    scenario: ScenarioConfig
    out_dir: Path
    surfaces: str | None
    market_path: Path


def parse_grid(text: str) -> tuple[int, int]:
    try:
        n_z, n_r = (int(part) for part in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"grid must look like NxM, got {text!r}") from e
    return n_z, n_r


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to scenario TOML file")
    common.add_argument("--out", default=None, help="Output directory (default ./out or $OTCALIB_OUT_DIR)")
    common.add_argument("--grid", type=parse_grid, default=None, help="Override the spatial grid, e.g. 50x50")
    common.add_argument("--epochs", type=int, default=None, help="Override the number of smoothing epochs")
    common.add_argument("--seed", type=int, default=None, help="Override the Monte-Carlo seed")
    common.add_argument("--surfaces", default=None,
                        help="Directory of beta11_t{k}.csv slices, or 'generating' / 'reference' (default OUT/surfaces)")
    common.add_argument("--market", default=None, help="Market file (default OUT/market.csv)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="Log per-step solver diagnostics")

    parser = argparse.ArgumentParser(prog="otcal", description="Optimal-transport calibration under Hull-White rates")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Price the instruments under the generating model")
    sub.add_parser("calibrate", parents=[common], help="Calibrate to the market file")
    sub.add_parser("price", parents=[common], help="Price the instruments under stored surfaces")
    sub.add_parser("simulate", parents=[common], help="Simulate paths and check the discounted density")
    sub.add_parser("report", parents=[common], help="Implied-volatility skews across a strike ladder")
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        level = logging.WARNING
    elif args.verbose:
        level = logging.DEBUG
    else:
        level = getattr(logging, os.getenv("OTCALIB_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_run(args: argparse.Namespace) -> RunConfig:
    scenario = load_scenario(args.config)
    scenario = scenario.with_overrides(grid=args.grid, epochs=args.epochs, seed=args.seed)
    out_dir = Path(args.out or os.getenv("OTCALIB_OUT_DIR", "out"))
    market_path = Path(args.market) if args.market else out_dir / "market.csv"
    return RunConfig(Path(args.config), scenario, out_dir, args.surfaces, market_path)


# ---------- Market file ----------


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("CLI - wrote %s (%d rows)", path, len(frame))


def read_market(run: RunConfig) -> list[Instrument]:
    """Market prices for the configured instruments, in configuration order."""
    if not run.market_path.exists():
        raise FileNotFoundError(f"market file not found: {run.market_path} (run gen-data first)")
    frame = pd.read_csv(run.market_path, float_precision="round_trip")
    missing_columns = {"maturity_days", "strike", "price"} - set(frame.columns)
    if missing_columns:
        raise ConfigError(f"{run.market_path}: missing columns {sorted(missing_columns)}")
    quotes = {(float(row.maturity_days), float(row.strike)): float(row.price) for row in frame.itertuples()}
    instruments = []
    for cfg in run.scenario.instruments:
        key = (float(cfg.maturity_days), float(cfg.strike))
        if key not in quotes:
            raise ConfigError(f"{run.market_path}: no quote for {cfg.maturity_days:g}d K={cfg.strike:g}")
        instruments.append(Instrument(cfg.maturity_days, cfg.strike, price=quotes[key]))
    return instruments


def load_surfaces(run: RunConfig, problem: CalibrationProblem) -> ModelSurfaces:
    source = run.surfaces or str(run.out_dir / "surfaces")
    if source == "generating":
        return ModelSurfaces.from_generating(problem)
    if source == "reference":
        return ModelSurfaces.from_reference(problem)
    return ModelSurfaces.from_csv(problem, source)


# ---------- Commands ----------


def cmd_gen_data(run: RunConfig) -> int:
    problem = build_problem(run.scenario)
    surfaces = ModelSurfaces.from_generating(problem)
    prices = price_instruments(surfaces, problem.instruments, problem)
    rows = [
        {"maturity_days": inst.maturity_days, "strike": inst.strike, "price": price,
         "implied_vol": quote_implied_vol(price, inst, problem)}
        for inst, price in zip(problem.instruments, prices)
    ]
    write_frame(pd.DataFrame(rows, columns=MARKET_COLUMNS), run.out_dir / "market.csv")
    return EXIT_OK


def write_calibration(run: RunConfig, result: CalibrationResult, records: list[EpochRecord], started: float) -> None:
    report = CalibrationReport.build(result, records, time.perf_counter() - started)
    report.write(run.out_dir)
    result.surfaces.to_csv(result.problem, run.out_dir / "surfaces")
    if run.scenario.settings.dump_slices:
        dump_slices(result.solution, result.problem, run.out_dir / "slices")


def cmd_calibrate(run: RunConfig) -> int:
    started = time.perf_counter()
    problem = build_problem(run.scenario, read_market(run))
    try:
        result = calibrate(problem)
    except ConvergenceError as e:
        if not isinstance(e.partial, CalibrationResult):
            raise
        write_calibration(run, e.partial, [], started)
        print(f"Error: {e}; partial report in {run.out_dir}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    epochs = run.scenario.settings.smoothing_epochs if result.converged else 0
    result, records = smooth_and_recalibrate(result, epochs)
    write_calibration(run, result, records, started)
    if not result.converged:
        print(f"Error: calibration did not converge, |grad|={result.grad_supnorm:.3e}; partial report in {run.out_dir}",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    logger.info("CLI - calibrated %d instruments, |grad|=%.3e", len(problem.instruments), result.grad_supnorm)
    return EXIT_OK


def cmd_price(run: RunConfig) -> int:
    market = read_market(run) if run.market_path.exists() else None
    problem = build_problem(run.scenario, market)
    surfaces = load_surfaces(run, problem)
    prices = price_instruments(surfaces, problem.instruments, problem)
    rows = []
    for inst, price in zip(problem.instruments, prices):
        model_iv = quote_implied_vol(price, inst, problem)
        market_iv = quote_implied_vol(inst.price, inst, problem) if inst.price is not None else None
        rows.append({
            "maturity_days": inst.maturity_days,
            "strike": inst.strike,
            "market_price": inst.price,
            "model_price": price,
            "market_iv": market_iv,
            "model_iv": model_iv,
            "abs_iv_error": None if model_iv is None or market_iv is None else abs(model_iv - market_iv),
        })
    write_frame(pd.DataFrame(rows, columns=PRICE_COLUMNS), run.out_dir / "prices.csv")
    return EXIT_OK


def cmd_simulate(run: RunConfig) -> int:
    problem = build_problem(run.scenario)
    model = problem.generating if run.surfaces == "generating" else load_surfaces(run, problem)
    batch = euler_simulate(model, problem)
    write_paths_sample(batch, run.out_dir / "paths_sample.csv")

    test_functions = [*bump_ladder(problem), Constant(1.0, name="mass")]
    rows = discounted_fp_residual(batch, model, problem, test_functions, time_indices=quarter_times(batch.n_steps))
    write_density_check(rows, run.out_dir / "density_check.csv")

    mc_rows = []
    for inst in problem.instruments:
        price, se = mc_price(batch, lambda z, r, inst=inst: inst.payoff(z), inst.maturity)
        mc_rows.append({"maturity_days": inst.maturity_days, "strike": inst.strike, "mc_price": price, "mc_se": se})
    write_frame(pd.DataFrame(mc_rows, columns=["maturity_days", "strike", "mc_price", "mc_se"]), run.out_dir / "mc_prices.csv")

    k = batch.n_steps
    mass, se = discounted_mass(batch, k)
    bond = problem.discount_factor(batch.times[k])
    logger.info("CLI - discounted mass at t=%.4f: %.6f +- %.6f, bond %.6f", batch.times[k], mass, se, bond)
    write_frame(estimate_density(batch, k, problem.grid, problem.hw.rescale).to_frame(), run.out_dir / "density.csv")
    return EXIT_OK


def strike_ladder(s0: float) -> np.ndarray:
    return np.round(np.arange(math.floor(0.75 * s0), math.ceil(1.5 * s0) + 1, 1.0), 10)


def cmd_report(run: RunConfig) -> int:
    problem = build_problem(run.scenario)
    surfaces = {
        "generating_iv": ModelSurfaces.from_generating(problem),
        "reference_iv": ModelSurfaces.from_reference(problem),
    }
    if run.surfaces is not None or (run.out_dir / "surfaces").exists():
        surfaces["calibrated_iv"] = load_surfaces(run, problem)
    maturities = sorted({inst.maturity_days for inst in problem.instruments})
    for days in maturities:
        ladder = [Instrument(days, float(k)) for k in strike_ladder(problem.s0)]
        frame = pd.DataFrame({"strike": [inst.strike for inst in ladder]})
        for column, surface in surfaces.items():
            prices = price_instruments(surface, ladder, problem)
            frame[column] = [quote_implied_vol(p, inst, problem) for inst, p in zip(ladder, prices)]
        write_frame(frame, run.out_dir / f"skew_{days:g}.csv")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "calibrate": cmd_calibrate,
    "price": cmd_price,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> None:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args)
    try:
        run = load_run(args)
        code = COMMANDS[args.command](run)
    except (ValidationError, ConfigError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_BAD_CONFIG)
    except ConvergenceError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_NOT_CONVERGED)
    except NumericalError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL)
    except ValueError as e:
        print(f"Error: invalid input: {e}", file=sys.stderr)
        sys.exit(EXIT_BAD_CONFIG)
    sys.exit(code)


if __name__ == "__main__":
    main()
