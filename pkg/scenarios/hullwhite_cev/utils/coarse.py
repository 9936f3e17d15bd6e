"""Small versions of the scenario for fast tests and smoke runs."""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Sequence

from otcalib.market import CalibrationProblem, build_problem
from otcalib.models import ScenarioConfig
from otcalib.pricing import ModelSurfaces, price_instruments

SCENARIO_DIR = Path(__file__).resolve().parents[1]
GOOD_SCENARIO = SCENARIO_DIR / "scenario.toml"
BAD_SCENARIO = SCENARIO_DIR / "scenario_bad_reference.toml"


def coarse_config(
    n: int = 30,
    instruments: Sequence[tuple[float, float]] = ((10, 92.0), (20, 99.0)),
    settings: dict[str, Any] | None = None,
    reference: dict[str, Any] | None = None,
    scenario: Path = GOOD_SCENARIO,
) -> ScenarioConfig:
    data = tomllib.loads(scenario.read_text())
    data["grid"].update(n_z=n, n_r=n)
    data["instruments"] = [{"maturity_days": days, "strike": strike} for days, strike in instruments]
    data["settings"].update({"smoothing_epochs": 0, "n_paths": 4000, "path_blocks": 4, **(settings or {})})
    if reference:
        data["reference"].update(reference)
    if not instruments:
        data["time"]["horizon_days"] = 20
    return ScenarioConfig.model_validate(data)


def coarse_problem(**kwargs: Any) -> CalibrationProblem:
    return build_problem(coarse_config(**kwargs))


def priced_problem(model: str = "generating", **kwargs: Any) -> CalibrationProblem:
    """Coarse problem whose market prices come from the generating (or reference) surfaces."""
    problem = coarse_problem(**kwargs)
    surfaces = ModelSurfaces.from_generating(problem) if model == "generating" else ModelSurfaces.from_reference(problem)
    prices = price_instruments(surfaces, problem.instruments, problem)
    return problem.with_instruments([inst.with_price(price) for inst, price in zip(problem.instruments, prices)])
