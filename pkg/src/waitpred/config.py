"""Run configuration: one JSON document, unknown keys rejected, defaults filled in."""

from __future__ import annotations

import json
from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .gbt import GbtParams
from .interactions import CFSpec
from .synth import DEFAULT_START, SHENZHEN_BBOX, EffectWeights, SynthConfig
from .trip_data import RegionGrid, SlotWindows


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


PosInt = Annotated[int, Field(gt=0)]
NonNeg = Annotated[float, Field(ge=0)]


class GridSection(_Section):
    bbox: tuple[float, float, float, float] = SHENZHEN_BBOX
    rows: PosInt = 20
    cols: PosInt = 25

    @model_validator(mode="after")
    def _bbox_order(self):
        if not (self.bbox[0] < self.bbox[2] and self.bbox[1] < self.bbox[3]):
            raise ValueError("bbox must be [min_lat, min_lng, max_lat, max_lng] with min < max")
        return self

    def build(self) -> RegionGrid:
        return RegionGrid(self.bbox, self.rows, self.cols)


class SlotsSection(_Section):
    tz_offset: float = 8.0
    morning: tuple[float, float] = (7.0, 10.0)
    evening: tuple[float, float] = (17.0, 20.0)
    late_night: tuple[float, float] = (23.0, 6.0)

    def windows(self) -> SlotWindows:
        return SlotWindows(self.morning, self.evening, self.late_night)


class DemandSupplySection(_Section):
    granularity_min: PosInt = 60

    @model_validator(mode="after")
    def _divides_week(self):
        if (7 * 24 * 60) % self.granularity_min:
            raise ValueError("granularity_min must divide a week")
        return self


class InteractionsSection(_Section):
    pre_specs: list[str] = ["O->D", "O->D,rush", "D->O,rush"]
    post_specs: list[str] = ["V->O,rush", "driver->O,D", "driver->O,D,rush"]
    rank: PosInt = 8
    epochs: PosInt = 50
    lr: Annotated[float, Field(gt=0)] = 0.05
    reg: NonNeg = 0.01
    k: PosInt = 10
    max_iter: PosInt = 100
    seed: int = 0

    @model_validator(mode="after")
    def _specs(self):
        for s in self.pre_specs:
            if CFSpec.parse(s).post_only:
                raise ValueError(f"pre-request spec {s!r} uses vehicle/driver keys")
        for s in self.post_specs:
            CFSpec.parse(s)
        return self


class GbtSection(_Section):
    num_trees: Annotated[int, Field(ge=0)] = 200
    learning_rate: Annotated[float, Field(gt=0, le=1)] = 0.1
    max_depth: PosInt = 6
    reg_lambda: NonNeg = 1.0
    gamma: NonNeg = 0.0
    min_child_weight: NonNeg = 1.0
    max_bins: Annotated[int, Field(ge=2)] = 256
    seed: int = 0
    n_threads: PosInt = 1

    def params(self) -> GbtParams:
        return GbtParams(**self.model_dump(exclude={"n_threads"}))


class EvalSection(_Section):
    train_frac: Annotated[float, Field(gt=0, lt=1)] = 0.8
    ridge: NonNeg = 1.0
    cdf_thresholds: list[float] = [30.0, 60.0, 120.0, 180.0, 300.0]

    @model_validator(mode="after")
    def _sorted(self):
        if list(self.cdf_thresholds) != sorted(self.cdf_thresholds):
            raise ValueError("cdf_thresholds must be sorted ascending")
        return self


class WeightsSection(_Section):
    base: float = 10.0
    w_pick: float = 200.0
    w_rush: float = 40.0
    w_weather: float = 20.0
    w_demand: float = 30.0
    w_od_affinity: float = 350.0
    noise_std: NonNeg = 35.0


class SynthSection(_Section):
    n_trips: PosInt = 50_000
    seed: int = 0
    weeks: PosInt = 4
    start_time: int = DEFAULT_START
    weights: WeightsSection = WeightsSection()
    hotspots: list[tuple[int, float]] = [(131, 8.0), (315, 6.0), (380, 5.0), (220, 4.0), (443, 3.0)]
    n_drivers: PosInt = 3000
    supply_floor: Annotated[float, Field(gt=0)] = 1.0


class RunConfig(_Section):
    grid: GridSection = GridSection()
    slots: SlotsSection = SlotsSection()
    demand_supply: DemandSupplySection = DemandSupplySection()
    interactions: InteractionsSection = InteractionsSection()
    gbt: GbtSection = GbtSection()
    eval: EvalSection = EvalSection()
    synth: SynthSection = SynthSection()

    def synth_config(self) -> SynthConfig:
        s = self.synth
        return SynthConfig(
            n_trips=s.n_trips,
            seed=s.seed,
            grid=self.grid.build(),
            weeks=s.weeks,
            start_time=s.start_time,
            tz_offset=self.slots.tz_offset,
            weights=EffectWeights(**s.weights.model_dump()),
            hotspots=[tuple(h) for h in s.hotspots],
            n_drivers=s.n_drivers,
            supply_floor=s.supply_floor,
            windows=self.slots.windows(),
        )

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=1) + "\n"


def parse_config(data: dict | None) -> RunConfig:
    """Validate a config mapping; the error lists every violation found."""
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"{len(lines)} config violation(s): " + "; ".join(lines)) from None
    except ConfigError as exc:
        raise ConfigError(f"config violation: {exc}") from None


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(data)
