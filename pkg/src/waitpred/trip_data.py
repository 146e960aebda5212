"""Trip ingestion, region grid, time-slot calendar and chronological split."""

from __future__ import annotations

import csv
import enum
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

from .errors import ConfigError, DataError, OutOfBounds, SchemaError

TRIP_COLUMNS = (
    "order_id",
    "order_time",
    "driver_id",
    "dispatch_lat",
    "dispatch_lng",
    "pickup_time",
    "pickup_lat",
    "pickup_lng",
    "dropoff_time",
    "dropoff_lat",
    "dropoff_lng",
    "trip_distance_m",
    "pick_distance_m",
    "weather_code",
)

SECONDS_PER_DAY = 86400
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY


class Reason(str, enum.Enum):
    OUT_OF_BBOX = "OUT_OF_BBOX"
    TIME_ORDER = "TIME_ORDER"
    MALFORMED = "MALFORMED"
    NEGATIVE_DISTANCE = "NEGATIVE_DISTANCE"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lng)):
            raise ValueError(f"non-finite coordinate: {self.lat}, {self.lng}")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"coordinate out of range: {self.lat}, {self.lng}")


@dataclass(frozen=True)
class TripRecord:
    order_id: str
    order_time: int
    driver_id: str
    dispatch_point: GeoPoint
    pickup_time: int
    pickup_point: GeoPoint
    dropoff_time: int
    dropoff_point: GeoPoint
    trip_distance_m: float
    pick_distance_m: float
    weather_code: int

    def __post_init__(self):
        if not self.order_time <= self.pickup_time <= self.dropoff_time:
            raise ValueError(f"{self.order_id}: timestamps out of order")
        for d in (self.trip_distance_m, self.pick_distance_m):
            if not math.isfinite(d) or d < 0:
                raise ValueError(f"{self.order_id}: invalid distance {d}")


@dataclass(frozen=True)
class RegionGrid:
    """Uniform rows x cols partition of a lat/lng bounding box.

    Region ids are row-major: ``id = row * cols + col`` with row 0 at the
    southern edge and col 0 at the western edge.
    """

    bbox: tuple[float, float, float, float]  # min_lat, min_lng, max_lat, max_lng
    rows: int = 20
    cols: int = 25

    def __post_init__(self):
        min_lat, min_lng, max_lat, max_lng = self.bbox
        if self.rows <= 0 or self.cols <= 0:
            raise ConfigError(f"grid rows/cols must be positive, got {self.rows}x{self.cols}")
        if not (min_lat < max_lat and min_lng < max_lng):
            raise ConfigError(f"degenerate bbox {self.bbox}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def cell_h(self) -> float:
        return (self.bbox[2] - self.bbox[0]) / self.rows

    @property
    def cell_w(self) -> float:
        return (self.bbox[3] - self.bbox[1]) / self.cols

    def contains(self, p: GeoPoint) -> bool:
        min_lat, min_lng, max_lat, max_lng = self.bbox
        return min_lat <= p.lat <= max_lat and min_lng <= p.lng <= max_lng

    def row_col(self, region_id: int) -> tuple[int, int]:
        if not 0 <= region_id < self.n_regions:
            raise OutOfBounds(f"region id {region_id} not in [0, {self.n_regions})")
        return divmod(int(region_id), self.cols)

    def cell_bounds(self, region_id: int) -> tuple[float, float, float, float]:
        row, col = self.row_col(region_id)
        lat0 = self.bbox[0] + row * self.cell_h
        lng0 = self.bbox[1] + col * self.cell_w
        return lat0, lng0, lat0 + self.cell_h, lng0 + self.cell_w

    def centroid(self, region_id: int) -> GeoPoint:
        lat0, lng0, lat1, lng1 = self.cell_bounds(region_id)
        return GeoPoint((lat0 + lat1) / 2.0, (lng0 + lng1) / 2.0)

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "rows": self.rows, "cols": self.cols}


def region_of(p: GeoPoint, grid: RegionGrid) -> int:
    if not grid.contains(p):
        raise OutOfBounds(f"point ({p.lat}, {p.lng}) outside bbox {grid.bbox}")
    row = min(int(math.floor((p.lat - grid.bbox[0]) / grid.cell_h)), grid.rows - 1)
    col = min(int(math.floor((p.lng - grid.bbox[1]) / grid.cell_w)), grid.cols - 1)
    return row * grid.cols + col


class Slot(enum.IntEnum):
    MorningRush = 0
    EveningRush = 1
    LateNight = 2
    Other = 3


@dataclass(frozen=True)
class SlotWindows:
    """Local-hour windows; late night wraps around midnight."""

    morning: tuple[float, float] = (7.0, 10.0)
    evening: tuple[float, float] = (17.0, 20.0)
    late_night: tuple[float, float] = (23.0, 6.0)


DEFAULT_WINDOWS = SlotWindows()


@dataclass(frozen=True)
class TimeSlot:
    slot: Slot
    is_weekend: bool


def local_hour(t: float, tz_offset: float) -> float:
    return (t / 3600.0 + tz_offset) % 24.0


def local_weekday(t: float, tz_offset: float) -> int:
    """Monday = 0. The unix epoch fell on a Thursday."""
    days = math.floor((t + tz_offset * 3600.0) / SECONDS_PER_DAY)
    return int((days + 3) % 7)


def time_slot_of(t: float, tz_offset: float = 8.0, windows: SlotWindows = DEFAULT_WINDOWS) -> TimeSlot:
    h = local_hour(t, tz_offset)
    if windows.morning[0] <= h < windows.morning[1]:
        slot = Slot.MorningRush
    elif windows.evening[0] <= h < windows.evening[1]:
        slot = Slot.EveningRush
    elif h >= windows.late_night[0] or h < windows.late_night[1]:
        slot = Slot.LateNight
    else:
        slot = Slot.Other
    return TimeSlot(slot, local_weekday(t, tz_offset) >= 5)


def slot_of_week(t: float, tz_offset: float, granularity_min: int) -> int:
    """Index of the ``granularity_min``-minute slot within the local week (Monday 00:00 = 0)."""
    local = t + tz_offset * 3600.0
    into_week = (local - 4 * SECONDS_PER_DAY) % SECONDS_PER_WEEK  # epoch + 4 days is a Monday
    return int(into_week // (granularity_min * 60))


@dataclass(frozen=True)
class LabeledTrip:
    record: TripRecord
    wt_act_s: float
    o_region: int
    d_region: int
    v_region: int

    @property
    def order_id(self) -> str:
        return self.record.order_id

    @property
    def order_time(self) -> int:
        return self.record.order_time


def label_trip(record: TripRecord, grid: RegionGrid) -> LabeledTrip:
    wt = record.pickup_time - record.order_time
    if wt <= 0:
        raise ValueError("waiting time must be positive")
    return LabeledTrip(
        record=record,
        wt_act_s=float(wt),
        o_region=region_of(record.pickup_point, grid),
        d_region=region_of(record.dropoff_point, grid),
        v_region=region_of(record.dispatch_point, grid),
    )


@dataclass
class ParseResult:
    trips: list[LabeledTrip]
    rejections: list[tuple[int, Reason]] = field(default_factory=list)

    def rejection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_number", "reason_code"])
        for row_number, reason in self.rejections:
            w.writerow([row_number, reason.value])
        return buf.getvalue()


def _parse_row(row: dict[str, str]) -> tuple[TripRecord | None, Reason | None]:
    try:
        def pt(prefix: str) -> GeoPoint:
            return GeoPoint(float(row[prefix + "_lat"]), float(row[prefix + "_lng"]))

        order_time = int(row["order_time"])
        pickup_time = int(row["pickup_time"])
        dropoff_time = int(row["dropoff_time"])
        trip_d = float(row["trip_distance_m"])
        pick_d = float(row["pick_distance_m"])
        points = (pt("dispatch"), pt("pickup"), pt("dropoff"))
        weather = int(row["weather_code"])
        order_id = row["order_id"]
        driver_id = row["driver_id"]
    except (TypeError, ValueError, KeyError):
        return None, Reason.MALFORMED
    if not order_id or driver_id is None or not (math.isfinite(trip_d) and math.isfinite(pick_d)):
        return None, Reason.MALFORMED
    if not order_time < pickup_time <= dropoff_time:
        return None, Reason.TIME_ORDER
    if trip_d < 0 or pick_d < 0:
        return None, Reason.NEGATIVE_DISTANCE
    record = TripRecord(
        order_id=order_id,
        order_time=order_time,
        driver_id=driver_id,
        dispatch_point=points[0],
        pickup_time=pickup_time,
        pickup_point=points[1],
        dropoff_time=dropoff_time,
        dropoff_point=points[2],
        trip_distance_m=trip_d,
        pick_distance_m=pick_d,
        weather_code=weather,
    )
    return record, None


def parse_trips(source: BinaryIO | bytes | str | os.PathLike, grid: RegionGrid) -> ParseResult:
    """Parse a trip CSV into labeled trips plus a rejection report.

    ``source`` may be a path, raw bytes, or a binary stream. Row numbers in
    the report count data rows from 1 (the header is not counted).
    """
    try:
        if isinstance(source, (bytes, bytearray)):
            text = bytes(source).decode("utf-8")
        elif isinstance(source, (str, os.PathLike)):
            with open(source, "rb") as fh:
                text = fh.read().decode("utf-8")
        else:
            text = source.read().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read trip source: {exc}") from exc

    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in TRIP_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"trip CSV missing columns: {', '.join(missing)}")

    result = ParseResult(trips=[])
    seen: set[str] = set()
    for i, row in enumerate(reader, start=1):
        if None in row or any(v is None for v in row.values()):
            result.rejections.append((i, Reason.MALFORMED))
            continue
        record, reason = _parse_row(row)
        if reason is None and record.order_id in seen:
            reason = Reason.MALFORMED
        if reason is not None:
            result.rejections.append((i, reason))
            continue
        if not all(grid.contains(p) for p in (record.dispatch_point, record.pickup_point, record.dropoff_point)):
            result.rejections.append((i, Reason.OUT_OF_BBOX))
            continue
        seen.add(record.order_id)
        result.trips.append(label_trip(record, grid))
    return result


def trips_to_csv(records: Iterable[TripRecord | LabeledTrip]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_COLUMNS)
    for r in records:
        if isinstance(r, LabeledTrip):
            r = r.record
        w.writerow([
            r.order_id, r.order_time, r.driver_id,
            repr(r.dispatch_point.lat), repr(r.dispatch_point.lng),
            r.pickup_time, repr(r.pickup_point.lat), repr(r.pickup_point.lng),
            r.dropoff_time, repr(r.dropoff_point.lat), repr(r.dropoff_point.lng),
            repr(r.trip_distance_m), repr(r.pick_distance_m), r.weather_code,
        ])
    return buf.getvalue()


def chrono_split(trips: Sequence[LabeledTrip], train_frac: float = 0.8) -> tuple[list[LabeledTrip], list[LabeledTrip]]:
    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"train_frac must be in (0, 1), got {train_frac}")
    if not trips:
        raise DataError("cannot split an empty trip list")
    ordered = sorted(trips, key=lambda t: (t.order_time, t.order_id))
    n_train = math.ceil(round(len(ordered) * train_frac, 9))  # 0.7 * 10 must give 7, not 8
    if n_train == len(ordered):
        warnings.warn(f"chronological split left the test set empty ({len(ordered)} trips)", stacklevel=2)
    return ordered[:n_train], ordered[n_train:]
