"""Base features, the demand-supply index, and the feature matrix container."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, ModelError
from .trip_data import (
    SECONDS_PER_WEEK,
    DEFAULT_WINDOWS,
    LabeledTrip,
    RegionGrid,
    SlotWindows,
    slot_of_week,
    time_slot_of,
)


class Task(str, enum.Enum):
    PRE = "pre"
    POST = "post"


class Kind(str, enum.Enum):
    ORDINAL = "ordinal-int"
    CONTINUOUS = "continuous"


class Availability(str, enum.Enum):
    PRE_OK = "PRE_OK"
    POST_ONLY = "POST_ONLY"


@dataclass(frozen=True)
class Column:
    name: str
    kind: Kind
    availability: Availability


@dataclass(frozen=True)
class FeatureSchema:
    task: Task
    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        if self.task is Task.PRE and any(c.availability is Availability.POST_ONLY for c in self.columns):
            raise ValueError("PRE schema may not contain POST_ONLY columns")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def fingerprint(self) -> str:
        payload = json.dumps([[c.name, c.kind.value, c.availability.value] for c in self.columns])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "columns": [
                {"name": c.name, "kind": c.kind.value, "availability": c.availability.value}
                for c in self.columns
            ],
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            schema = cls(
                task=Task(d["task"]),
                columns=tuple(
                    Column(c["name"], Kind(c["kind"]), Availability(c["availability"]))
                    for c in d["columns"]
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed feature schema: {exc}") from exc
        if "fingerprint" in d and d["fingerprint"] != schema.fingerprint:
            raise ModelError("feature schema fingerprint does not match its columns")
        return schema

    def extend(self, columns: Sequence[Column]) -> "FeatureSchema":
        return FeatureSchema(self.task, self.columns + tuple(columns))


_PRE, _POST = Availability.PRE_OK, Availability.POST_ONLY
_ORD, _CONT = Kind.ORDINAL, Kind.CONTINUOUS

BASE_PRE_COLUMNS = (
    Column("isRushHour", _ORD, _PRE),
    Column("isWeekend", _ORD, _PRE),
    Column("O_region", _ORD, _PRE),
    Column("D_region", _ORD, _PRE),
    Column("orderNum", _CONT, _PRE),
    Column("vehicleNum", _CONT, _PRE),
    Column("weather", _ORD, _PRE),
    Column("tripDistance", _CONT, _PRE),
)
BASE_POST_COLUMNS = BASE_PRE_COLUMNS + (
    Column("V_region", _ORD, _POST),
    Column("pickDistance", _CONT, _POST),
)


def base_schema(task: Task) -> FeatureSchema:
    return FeatureSchema(task, BASE_PRE_COLUMNS if task is Task.PRE else BASE_POST_COLUMNS)


@dataclass(frozen=True)
class DemandSupplyIndex:
    """Historical per-(region, slot-of-week) mean order and vehicle counts."""

    slot_granularity: int
    tz_offset: float
    table: dict[tuple[int, int], tuple[float, float]]
    built_from: tuple[int, int]  # train window [first, last] order_time

    @property
    def n_slots(self) -> int:
        return 7 * 24 * 60 // self.slot_granularity

    def lookup(self, region: int, slot: int) -> tuple[float, float]:
        return self.table.get((region, slot), (0.0, 0.0))

    def to_dict(self) -> dict:
        return {
            "slot_granularity": self.slot_granularity,
            "tz_offset": self.tz_offset,
            "built_from": list(self.built_from),
            "table": [[r, s, o, v] for (r, s), (o, v) in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemandSupplyIndex":
        return cls(
            slot_granularity=int(d["slot_granularity"]),
            tz_offset=float(d["tz_offset"]),
            built_from=tuple(d["built_from"]),
            table={(int(r), int(s)): (float(o), float(v)) for r, s, o, v in d["table"]},
        )


def _weeks_covering(t_first: int, t_last: int, tz_offset: float, granularity: int) -> np.ndarray:
    """For every slot-of-week, the number of calendar weeks whose instance of
    that slot intersects the closed window [t_first, t_last]."""
    slot_s = granularity * 60
    n_slots = SECONDS_PER_WEEK // slot_s
    shift = tz_offset * 3600.0 - 4 * 86400  # local time measured from a Monday 00:00
    first, last = t_first + shift, t_last + shift
    w0 = math.floor(first / SECONDS_PER_WEEK)
    w1 = math.floor(last / SECONDS_PER_WEEK)
    counts = np.zeros(n_slots, dtype=np.int64)
    starts = np.arange(n_slots) * slot_s
    for w in range(w0, w1 + 1):
        lo = w * SECONDS_PER_WEEK + starts
        hi = lo + slot_s
        counts += (lo <= last) & (hi > first)
    return counts


def build_ds_index(
    train: Sequence[LabeledTrip],
    granularity: int = 60,
    tz_offset: float = 8.0,
) -> DemandSupplyIndex:
    """Average order and observed-driver counts per (origin region, slot-of-week).

    A driver counts as observed in a region-slot when its dispatch, pickup or
    dropoff point lies in the region at the corresponding timestamp (order,
    pickup and dropoff time). Counts are summed per calendar week and divided
    by the number of weeks of the training window that cover the slot.
    """
    if not train:
        raise DataError("demand-supply index needs at least one training trip")
    if (7 * 24 * 60) % granularity:
        raise DataError(f"slot granularity {granularity} min does not divide a week")
    slot_s = granularity * 60
    shift = tz_offset * 3600.0 - 4 * 86400

    def abs_slot(t: int) -> int:
        return math.floor((t + shift) / slot_s)

    n_slots = SECONDS_PER_WEEK // slot_s
    orders: dict[tuple[int, int], int] = defaultdict(int)
    drivers: dict[tuple[int, int], set[str]] = defaultdict(set)
    for trip in train:
        rec = trip.record
        orders[(trip.o_region, abs_slot(rec.order_time))] += 1
        sightings = (
            (trip.v_region, rec.order_time),
            (trip.o_region, rec.pickup_time),
            (trip.d_region, rec.dropoff_time),
        )
        for region, t in sightings:
            drivers[(region, abs_slot(t))].add(rec.driver_id)

    t_first = min(t.order_time for t in train)
    t_last = max(t.order_time for t in train)
    weeks = _weeks_covering(t_first, t_last, tz_offset, granularity)

    order_sum: dict[tuple[int, int], float] = defaultdict(float)
    vehicle_sum: dict[tuple[int, int], float] = defaultdict(float)
    for (region, a), c in orders.items():
        order_sum[(region, a % n_slots)] += c
    for (region, a), ids in drivers.items():
        vehicle_sum[(region, a % n_slots)] += len(ids)

    table = {}
    for key in set(order_sum) | set(vehicle_sum):
        # sightings at pickup/dropoff may fall after the window; count at least one week
        n_weeks = max(int(weeks[key[1]]), 1)
        table[key] = (order_sum.get(key, 0.0) / n_weeks, vehicle_sum.get(key, 0.0) / n_weeks)
    return DemandSupplyIndex(granularity, float(tz_offset), table, (t_first, t_last))


def featurize_base(
    trip: LabeledTrip,
    task: Task,
    idx: DemandSupplyIndex,
    grid: RegionGrid,
    windows: SlotWindows = DEFAULT_WINDOWS,
) -> list[float]:
    """Base feature row: 8 values for PRE, 10 for POST (see ``base_schema``)."""
    rec = trip.record
    ts = time_slot_of(rec.order_time, idx.tz_offset, windows)
    order_num, vehicle_num = idx.lookup(trip.o_region, slot_of_week(rec.order_time, idx.tz_offset, idx.slot_granularity))
    row = [
        float(ts.slot),
        float(ts.is_weekend),
        float(trip.o_region),
        float(trip.d_region),
        order_num,
        vehicle_num,
        float(rec.weather_code),
        rec.trip_distance_m,
    ]
    if task is Task.POST:
        row += [float(trip.v_region), rec.pick_distance_m]
    return row


@dataclass
class FeatureMatrix:
    schema: FeatureSchema
    rows: np.ndarray
    labels: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, len(self.schema.columns))
        if not np.all(np.isfinite(self.rows)):
            raise DataError("feature matrix contains NaN or infinite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (len(self.rows),):
                raise DataError(f"{len(self.rows)} rows but {self.labels.shape} labels")
            if not np.all(np.isfinite(self.labels)):
                raise DataError("labels contain NaN or infinite values")
        if self.ids and len(self.ids) != len(self.rows):
            raise DataError("id count does not match row count")

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = [self.schema.names.index(n) for n in names]
        cols = tuple(self.schema.columns[i] for i in pos)
        return FeatureMatrix(FeatureSchema(self.schema.task, cols), self.rows[:, pos], self.labels, list(self.ids))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["order_id"] + self.schema.names + (["wt_act_s"] if self.labels is not None else [])
        w.writerow(header)
        ids = self.ids or [str(i) for i in range(len(self))]
        for i, row in enumerate(self.rows):
            out = [ids[i]] + [repr(float(v)) for v in row]
            if self.labels is not None:
                out.append(repr(float(self.labels[i])))
            w.writerow(out)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, schema: FeatureSchema) -> "FeatureMatrix":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty feature CSV") from None
        names = schema.names
        if header[1 : 1 + len(names)] != names or header[0] != "order_id":
            raise DataError("feature CSV header does not match its schema")
        has_labels = header[-1] == "wt_act_s" and len(header) == len(names) + 2
        ids, rows, labels = [], [], []
        try:
            for rec in reader:
                ids.append(rec[0])
                rows.append([float(v) for v in rec[1 : 1 + len(names)]])
                if has_labels:
                    labels.append(float(rec[-1]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"malformed feature CSV row: {exc}") from exc
        return cls(
            schema,
            np.array(rows, dtype=np.float64).reshape(-1, len(names)),
            np.array(labels) if has_labels else None,
            ids,
        )
