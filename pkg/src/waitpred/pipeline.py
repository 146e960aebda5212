"""Fit featurization state on a training window and build feature matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .config import RunConfig
from .errors import ModelError
from .features import (
    DemandSupplyIndex,
    FeatureMatrix,
    FeatureSchema,
    Task,
    base_schema,
    build_ds_index,
    featurize_base,
)
from .interactions import (
    CFSpec,
    InteractionModels,
    featurize_interactions,
    fit_interactions,
    interaction_columns,
)
from .trip_data import LabeledTrip, RegionGrid, SlotWindows


@dataclass
class FittedFeatures:
    task: Task
    grid: RegionGrid
    windows: SlotWindows
    ds_index: DemandSupplyIndex
    interactions: InteractionModels | None

    @property
    def schema(self) -> FeatureSchema:
        schema = base_schema(self.task)
        if self.interactions is not None:
            schema = schema.extend(interaction_columns(self.interactions, self.task))
        return schema

    def row(self, trip: LabeledTrip) -> list[float]:
        row = featurize_base(trip, self.task, self.ds_index, self.grid, self.windows)
        if self.interactions is not None:
            row += featurize_interactions(trip, self.task, self.interactions, self.grid)
        return row

    def transform(self, trips: Sequence[LabeledTrip]) -> FeatureMatrix:
        return FeatureMatrix(
            self.schema,
            [self.row(t) for t in trips],
            [t.wt_act_s for t in trips],
            [t.order_id for t in trips],
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "grid": self.grid.to_dict(),
            "windows": [list(self.windows.morning), list(self.windows.evening), list(self.windows.late_night)],
            "ds_index": self.ds_index.to_dict(),
            "interactions": self.interactions.to_dict() if self.interactions is not None else None,
            "schema": self.schema.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedFeatures":
        try:
            g, w = d["grid"], d["windows"]
            fitted = cls(
                task=Task(d["task"]),
                grid=RegionGrid(tuple(g["bbox"]), g["rows"], g["cols"]),
                windows=SlotWindows(tuple(w[0]), tuple(w[1]), tuple(w[2])),
                ds_index=DemandSupplyIndex.from_dict(d["ds_index"]),
                interactions=InteractionModels.from_dict(d["interactions"]) if d["interactions"] else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed featurizer state: {exc!r}") from exc
        if d.get("schema", {}).get("fingerprint") != fitted.schema.fingerprint:
            raise ModelError("featurizer state does not reproduce its recorded schema")
        return fitted


def fit_features(
    train: Sequence[LabeledTrip],
    task: Task,
    cfg: RunConfig,
    with_interactions: bool = True,
) -> FittedFeatures:
    """Fit the demand-supply index and (optionally) interaction models on ``train`` only."""
    grid = cfg.grid.build()
    windows = cfg.slots.windows()
    tz = cfg.slots.tz_offset
    ds = build_ds_index(train, cfg.demand_supply.granularity_min, tz)
    inter = None
    if with_interactions:
        ic = cfg.interactions
        inter = fit_interactions(
            train,
            task,
            grid,
            pre_specs=[CFSpec.parse(s) for s in ic.pre_specs],
            post_specs=[CFSpec.parse(s) for s in ic.post_specs],
            rank=ic.rank,
            epochs=ic.epochs,
            lr=ic.lr,
            reg=ic.reg,
            k=ic.k,
            max_iter=ic.max_iter,
            seed=ic.seed,
            tz_offset=tz,
            windows=windows,
        )
    return FittedFeatures(task, grid, windows, ds, inter)
