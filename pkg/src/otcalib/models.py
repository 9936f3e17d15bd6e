from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from otcalib.errors import ConfigError


# ---------- Configuration blocks ----------


class _Block(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SpotConfig(_Block):
    s0: float = Field(92.0, gt=0, description="Initial stock price (price units)")
    r0: float = Field(0.025, description="Initial short rate (1/years, unscaled)")


class GridConfig(_Block):
    z_min: float = 4.0
    z_max: float = 5.0
    r_min: float = Field(0.0, description="Lower rescaled-rate bound (rate x R)")
    r_max: float = Field(5.0, description="Upper rescaled-rate bound (rate x R)")
    n_z: int = Field(100, ge=3)
    n_r: int = Field(100, ge=3)

    @model_validator(mode="after")
    def _ordered(self) -> GridConfig:
        if self.z_max <= self.z_min:
            raise ValueError("grid: z_max must exceed z_min")
        if self.r_max <= self.r_min:
            raise ValueError("grid: r_max must exceed r_min")
        return self


class TimeConfig(_Block):
    horizon_days: Optional[float] = Field(None, gt=0, description="Defaults to the last maturity")
    steps_per_day: int = Field(1, ge=1)


class HullWhiteConfig(_Block):
    a: float = Field(0.4, gt=0, description="Mean-reversion speed (1/years)")
    sigma_r: float = Field(0.05, gt=0, description="Rate volatility (1/sqrt(years))")
    rescale: float = Field(100.0, gt=0, description="Rate rescaling constant R")


class ReferenceConfig(_Block):
    """CEV reference model; `correlation` is the instantaneous stock/rate correlation."""

    sigma: float = Field(0.9, gt=0)
    gamma: float = Field(0.9, ge=0)
    correlation: float = Field(-0.4, gt=-1, lt=1)
    p: float = Field(4.0, gt=2, description="Cost exponent")


class GeneratingModel(_Block):
    """CEV stock with Hull-White rates used to manufacture market prices."""

    sigma: float = Field(0.78, gt=0, description="CEV scale (price^(1-gamma)/sqrt(years))")
    gamma: float = Field(0.9, ge=0, description="CEV elasticity")
    correlation: float = Field(-0.6, ge=-1, le=1)
    smoothing_width: float = Field(0.5, gt=0, description="Payoff smoothing width epsilon (price units)")


class InstrumentConfig(_Block):
    maturity_days: float = Field(..., gt=0)
    strike: float = Field(..., gt=0)


class CalibrationSettings(_Block):
    tolerance_iv: float = Field(1e-4, gt=0, description="epsilon_1: sup-norm of the dual gradient (IV units)")
    policy_tolerance: float = Field(1e-8, gt=0, description="epsilon_2: sup-norm of the policy update")
    max_outer_iterations: int = Field(200, ge=1)
    max_policy_iterations: int = Field(100, ge=1)
    linear_tolerance: float = Field(1e-10, gt=0)
    smoothing_epochs: int = Field(0, ge=0)
    spline_stride: int = Field(4, ge=1)
    lbfgs_memory: int = Field(10, ge=1)
    wolfe_c1: float = Field(1e-4, gt=0, lt=1)
    wolfe_c2: float = Field(0.9, gt=0, lt=1)
    printed_beta_formula: bool = False
    gradient_pricer: Literal["tangent", "adi"] = "tangent"
    iv_days_per_year: float = Field(365.0, gt=0, description="Day count of the clock used to quote implied volatilities")
    smoothing_adjustment: bool = True
    dump_slices: bool = False
    n_paths: int = Field(100_000, ge=1)
    path_blocks: int = Field(8, ge=1)
    seed: int = 20240101

    @model_validator(mode="after")
    def _wolfe(self) -> CalibrationSettings:
        if not self.wolfe_c1 < self.wolfe_c2:
            raise ValueError("settings: wolfe_c1 must be below wolfe_c2")
        return self


class ScenarioConfig(_Block):
    spot: SpotConfig = SpotConfig()
    grid: GridConfig = GridConfig()
    time: TimeConfig = TimeConfig()
    hullwhite: HullWhiteConfig = HullWhiteConfig()
    reference: ReferenceConfig = ReferenceConfig()
    generating: GeneratingModel = GeneratingModel()
    instruments: List[InstrumentConfig] = Field(default_factory=list)
    settings: CalibrationSettings = CalibrationSettings()

    @model_validator(mode="after")
    def _consistent(self) -> ScenarioConfig:
        horizon = self.time.horizon_days
        if horizon is not None:
            late = [i.maturity_days for i in self.instruments if i.maturity_days > horizon]
            if late:
                raise ValueError(f"instruments: maturities {late} exceed time.horizon_days={horizon}")
        if self.instruments:
            min_strike = min(i.strike for i in self.instruments)
            if self.generating.smoothing_width >= 0.1 * min_strike:
                raise ValueError("generating: smoothing_width must be much smaller than the smallest strike")
        if horizon is None and not self.instruments:
            raise ValueError("time: horizon_days is required when no instruments are configured")
        return self

    def with_overrides(
        self,
        grid: tuple[int, int] | None = None,
        epochs: int | None = None,
        seed: int | None = None,
    ) -> ScenarioConfig:
        update: dict[str, Any] = {}
        if grid is not None:
            update["grid"] = self.grid.model_copy(update={"n_z": grid[0], "n_r": grid[1]})
        settings_update: dict[str, Any] = {}
        if epochs is not None:
            settings_update["smoothing_epochs"] = epochs
        if seed is not None:
            settings_update["seed"] = seed
        if settings_update:
            update["settings"] = self.settings.model_copy(update=settings_update)
        # model_copy skips validation; round-trip through the validator.
        return ScenarioConfig.model_validate(self.model_copy(update=update).model_dump())


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Scenario file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
