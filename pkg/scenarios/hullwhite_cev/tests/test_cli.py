"""Command-line entry point: sub-commands, output files and exit codes."""

import argparse
import sys
from pathlib import Path

import pandas as pd
import pytest

ROOT = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(ROOT))
sys.path.insert(0, str(ROOT / "src"))

from otcalib import run_calibration  # noqa: E402
from otcalib.errors import ConvergenceError, NumericalError  # noqa: E402
from otcalib.run_calibration import (  # noqa: E402
    EXIT_BAD_CONFIG,
    EXIT_NOT_CONVERGED,
    EXIT_NUMERICAL,
    EXIT_OK,
    parse_grid,
    strike_ladder,
)
from scenarios.hullwhite_cev.utils.coarse import GOOD_SCENARIO  # noqa: E402


def write_config(directory: Path, n: int = 16, instruments=((10, 92.0), (20, 99.0))) -> Path:
    """The shipped scenario on a small grid with a short instrument list."""
    head = GOOD_SCENARIO.read_text().split("[[instruments]]")[0]
    head = (
        head.replace("n_z = 100", f"n_z = {n}")
        .replace("n_r = 100", f"n_r = {n}")
        .replace("n_paths = 100000", "n_paths = 2000")
        .replace("smoothing_epochs = 10", "smoothing_epochs = 0")
    )
    if not instruments:
        head = head.replace("steps_per_day = 1", "steps_per_day = 1\nhorizon_days = 5")
    body = "".join(f"\n[[instruments]]\nmaturity_days = {days}\nstrike = {strike}\n" for days, strike in instruments)
    path = directory / "scenario.toml"
    path.write_text(head + body)
    return path


def run(*argv: str) -> int:
    with pytest.raises(SystemExit) as exc:
        run_calibration.main(list(argv))
    return exc.value.code


def test_parse_grid():
    assert parse_grid("50x40") == (50, 40)
    assert parse_grid("30X30") == (30, 30)
    with pytest.raises(argparse.ArgumentTypeError):
        parse_grid("fifty")


def test_strike_ladder_spans_the_skew():
    ladder = strike_ladder(92.0)
    assert ladder[0] == 69.0 and ladder[-1] == 138.0
    assert len(ladder) == 70


def test_gen_data_then_price_reproduces_the_market(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen-data", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    market = pd.read_csv(out / "market.csv")
    assert list(market.columns) == ["maturity_days", "strike", "price", "implied_vol"]
    assert len(market) == 2
    assert market["implied_vol"].between(0.3, 0.7).all()

    assert run("price", "--config", str(config), "--out", str(out), "--surfaces", "generating", "--quiet") == EXIT_OK
    prices = pd.read_csv(out / "prices.csv")
    assert list(prices["model_price"]) == list(market["price"])
    assert (prices["abs_iv_error"] < 1e-12).all()


def test_gen_data_without_instruments_writes_a_header(tmp_path):
    config = write_config(tmp_path, instruments=())
    out = tmp_path / "out"
    assert run("gen-data", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    market = pd.read_csv(out / "market.csv")
    assert market.empty
    assert list(market.columns) == ["maturity_days", "strike", "price", "implied_vol"]


def test_calibrate_writes_report_and_surfaces(tmp_path):
    config = write_config(tmp_path, n=20)
    out = tmp_path / "out"
    assert run("gen-data", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    assert run("calibrate", "--config", str(config), "--out", str(out), "--epochs", "0", "--quiet") == EXIT_OK
    for name in ("report.csv", "summary.csv", "lambda.csv", "trace.csv", "epochs.csv"):
        assert (out / name).exists(), name
    assert (out / "surfaces" / "beta11_t0.csv").exists()
    assert (out / "surfaces" / "beta11_t20.csv").exists()

    assert run("report", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    skew = pd.read_csv(out / "skew_10.csv")
    assert list(skew.columns) == ["strike", "generating_iv", "reference_iv", "calibrated_iv"]
    assert (out / "skew_20.csv").exists()


def test_calibrate_needs_a_market_file(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run("calibrate", "--config", str(config), "--out", str(tmp_path / "empty"), "--quiet") == EXIT_BAD_CONFIG
    assert "gen-data" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path):
    config = write_config(tmp_path)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("simulate", "--config", str(config), "--out", str(out), "--surfaces", "generating", "--quiet") == EXIT_OK
        outputs.append(out)
    for name in ("paths_sample.csv", "density_check.csv", "mc_prices.csv", "density.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes(), name
    sample = pd.read_csv(outputs[0] / "paths_sample.csv")
    assert list(sample.columns) == ["t", "path_id", "S", "r"]


def test_seed_override_changes_the_paths(tmp_path):
    config = write_config(tmp_path)
    for name, seed in (("a", "1"), ("b", "2")):
        assert run("simulate", "--config", str(config), "--out", str(tmp_path / name), "--surfaces", "generating",
                   "--seed", seed, "--quiet") == EXIT_OK
    assert (tmp_path / "a" / "paths_sample.csv").read_bytes() != (tmp_path / "b" / "paths_sample.csv").read_bytes()


def test_bad_configuration_exits_with_code_3(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[reference]\ncorrelation = 1.5\n\n[time]\nhorizon_days = 5\n")
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path)) == EXIT_BAD_CONFIG
    assert capsys.readouterr().err.startswith("Error:")
    assert run("gen-data", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)) == EXIT_BAD_CONFIG


def test_grid_override_is_validated(tmp_path):
    config = write_config(tmp_path)
    assert run("gen-data", "--config", str(config), "--out", str(tmp_path), "--grid", "2x2", "--quiet") == EXIT_BAD_CONFIG


@pytest.mark.parametrize(
    ("error", "code"),
    [
        (ConvergenceError("policy iteration stalled", residual=1e-3), EXIT_NOT_CONVERGED),
        (NumericalError("non-finite value", time_index=3), EXIT_NUMERICAL),
    ],
)
def test_solver_failures_map_to_exit_codes(tmp_path, monkeypatch, capsys, error, code):
    config = write_config(tmp_path)

    def failing(run_config):
        raise error

    monkeypatch.setitem(run_calibration.COMMANDS, "price", failing)
    assert run("price", "--config", str(config), "--out", str(tmp_path), "--quiet") == code
    assert str(error) in capsys.readouterr().err


def test_unconverged_calibration_exits_with_code_2(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen-data", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    text = config.read_text().replace("max_outer_iterations = 200", "max_outer_iterations = 1")
    config.write_text(text.replace("tolerance_iv = 1e-4", "tolerance_iv = 1e-14"))
    assert run("calibrate", "--config", str(config), "--out", str(out), "--epochs", "0", "--quiet") == EXIT_NOT_CONVERGED
    assert (out / "report.csv").exists()


def test_line_search_failure_still_writes_a_report(tmp_path, monkeypatch, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen-data", "--config", str(config), "--out", str(out), "--quiet") == EXIT_OK
    monkeypatch.setattr("otcalib.calib._wolfe_step", lambda *args, **kwargs: None)
    assert run("calibrate", "--config", str(config), "--out", str(out), "--epochs", "0", "--quiet") == EXIT_NOT_CONVERGED
    assert "line search failed" in capsys.readouterr().err
    for name in ("report.csv", "lambda.csv", "trace.csv"):
        assert (out / name).exists(), name
    assert len(pd.read_csv(out / "lambda.csv")) == 2


def test_simulate_checks_the_bump_ladder_at_four_times(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "fresh" / "nested"
    assert run("simulate", "--config", str(config), "--out", str(out), "--surfaces", "generating", "--quiet") == EXIT_OK
    check = pd.read_csv(out / "density_check.csv")
    assert check["t"].nunique() == 4
    assert sorted(check["testfn_id"].unique()) == ["bump_0", "bump_1", "bump_2", "bump_3", "bump_4", "mass"]
    assert len(check) == 24


def test_unwritable_output_exits_with_code_3(tmp_path, capsys):
    config = write_config(tmp_path)
    blocker = tmp_path / "taken"
    blocker.write_text("not a directory")
    assert run("gen-data", "--config", str(config), "--out", str(blocker), "--quiet") == EXIT_BAD_CONFIG
    assert capsys.readouterr().err.startswith("Error:")


def main():
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
