"""Synthetic trip generator with a known waiting-time function.

Waiting time is a sum of planted effects::

    wt = base + w_pick * pick_km + w_rush * [rush slot] + w_weather * severity
         + w_demand * max(0, demand - supply) / supply_floor
         + w_od_affinity * u[o] * v[d] + Normal(0, noise_std)

clamped to at least 30 s. ``u`` and ``v`` are smooth per-region latent
fields, and destinations are drawn with a preference for high ``u[o] * v[d]``
so the planted OD effect also shows up in co-occurrence counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .trip_data import (
    DEFAULT_WINDOWS,
    GeoPoint,
    RegionGrid,
    Slot,
    SlotWindows,
    TripRecord,
    time_slot_of,
    trips_to_csv,
)

SHENZHEN_BBOX = (22.45, 113.75, 22.85, 114.45)
# Monday 2019-01-07 00:00 at UTC+8
DEFAULT_START = 1546790400
ROAD_FACTOR = 1.3
MIN_WAIT_S = 30.0
WEATHER_LEVELS = 5


def default_grid() -> RegionGrid:
    return RegionGrid(SHENZHEN_BBOX, 20, 25)


@dataclass
class EffectWeights:
    base: float = 10.0
    w_pick: float = 200.0
    w_rush: float = 40.0
    w_weather: float = 20.0
    w_demand: float = 30.0
    w_od_affinity: float = 350.0
    noise_std: float = 35.0


@dataclass
class SynthConfig:
    n_trips: int = 50_000
    seed: int = 0
    grid: RegionGrid = field(default_factory=default_grid)
    weeks: int = 4
    start_time: int = DEFAULT_START
    tz_offset: float = 8.0
    weights: EffectWeights = field(default_factory=EffectWeights)
    hotspots: list[tuple[int, float]] = field(
        default_factory=lambda: [(131, 8.0), (315, 6.0), (380, 5.0), (220, 4.0), (443, 3.0)]
    )
    n_drivers: int = 3000
    supply_floor: float = 1.0
    windows: SlotWindows = DEFAULT_WINDOWS

    def __post_init__(self):
        problems = []
        if self.n_trips <= 0:
            problems.append("n_trips must be > 0")
        if self.weeks <= 0:
            problems.append("weeks must be > 0")
        if self.weights.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if not all(math.isfinite(v) for v in asdict(self.weights).values()):
            problems.append("effect weights must be finite")
        if self.n_drivers <= 0:
            problems.append("n_drivers must be > 0")
        if self.supply_floor <= 0:
            problems.append("supply_floor must be > 0")
        for r, intensity in self.hotspots:
            if not 0 <= r < self.grid.n_regions or intensity < 0:
                problems.append(f"bad hotspot ({r}, {intensity})")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class SynthResult:
    records: list[TripRecord]
    truth: dict

    def to_csv(self) -> str:
        return trips_to_csv(self.records)


# hour-of-day order profile: rush peaks, quiet nights
_HOUR_PROFILE = np.array([
    0.3, 0.2, 0.15, 0.1, 0.1, 0.2, 0.5, 1.2, 1.8, 1.5, 1.0, 0.9,
    1.0, 0.9, 0.8, 0.9, 1.1, 1.6, 1.9, 1.5, 1.1, 0.9, 0.7, 0.5,
])
# drivers follow demand only loosely
_SUPPLY_PROFILE = 0.5 + 0.5 * _HOUR_PROFILE / _HOUR_PROFILE.mean()

_WEATHER_STAY = 0.85


def _cell_rc(grid: RegionGrid) -> np.ndarray:
    ids = np.arange(grid.n_regions)
    return np.column_stack([ids // grid.cols, ids % grid.cols]).astype(np.float64)


def _smooth_field(rc: np.ndarray, rng: np.random.Generator, n_bumps: int = 4, width: float = 4.0) -> np.ndarray:
    centers = rng.uniform(rc.min(axis=0), rc.max(axis=0), size=(n_bumps, 2))
    amps = rng.uniform(0.5, 1.0, size=n_bumps)
    d2 = ((rc[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    f = (amps * np.exp(-d2 / (2 * width**2))).sum(axis=1)
    return (f - f.min()) / (f.max() - f.min())


def _haversine_km(lat1, lng1, lat2, lng2):
    lat1, lng1, lat2, lng2 = map(np.radians, (lat1, lng1, lat2, lng2))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lng2 - lng1) / 2) ** 2
    return 2 * 6371.0 * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def _points_in_cells(grid: RegionGrid, regions: np.ndarray, rng: np.random.Generator):
    rows, cols = regions // grid.cols, regions % grid.cols
    lat = grid.bbox[0] + (rows + rng.uniform(0.02, 0.98, len(regions))) * grid.cell_h
    lng = grid.bbox[1] + (cols + rng.uniform(0.02, 0.98, len(regions))) * grid.cell_w
    return np.round(lat, 6), np.round(lng, 6)


def _weather_chain(n_hours: int, rng: np.random.Generator) -> np.ndarray:
    # mild weather is far more common; the chain is sticky hour to hour
    stationary = np.array([0.45, 0.25, 0.15, 0.1, 0.05])
    codes = np.empty(n_hours, dtype=np.int64)
    codes[0] = rng.choice(WEATHER_LEVELS, p=stationary)
    stay = rng.random(n_hours)
    fresh = rng.choice(WEATHER_LEVELS, size=n_hours, p=stationary)
    for h in range(1, n_hours):
        codes[h] = codes[h - 1] if stay[h] < _WEATHER_STAY else fresh[h]
    return codes


def generate(cfg: SynthConfig) -> SynthResult:
    rng = np.random.default_rng(cfg.seed)
    grid, w = cfg.grid, cfg.weights
    n, R = cfg.n_trips, grid.n_regions
    rc = _cell_rc(grid)

    # spatial structure
    pop = np.full(R, 0.3)
    for r, intensity in cfg.hotspots:
        d2 = ((rc - rc[r]) ** 2).sum(axis=1)
        pop += intensity * np.exp(-d2 / (2 * 2.5**2))
    p_origin = pop / pop.sum()
    u = _smooth_field(rc, rng)
    v = _smooth_field(rc, rng)

    # demand and supply indices, mean 1 over (region, hour-of-day)
    hour_share = _HOUR_PROFILE / _HOUR_PROFILE.sum()
    demand = np.outer(p_origin * R, hour_share * 24)
    supply = np.outer(np.sqrt(p_origin * R), _SUPPLY_PROFILE)
    supply *= demand.mean() / supply.mean()
    deficit = np.maximum(0.0, demand - supply) / cfg.supply_floor

    # when
    n_days = cfg.weeks * 7
    day = rng.integers(0, n_days, size=n)
    hour = rng.choice(24, size=n, p=hour_share)
    order_time = cfg.start_time + day * 86400 + hour * 3600 + rng.integers(0, 3600, size=n)
    weather_hours = _weather_chain(n_days * 24, rng)
    weather = weather_hours[(order_time - cfg.start_time) // 3600]

    # where
    o = rng.choice(R, size=n, p=p_origin)
    centroid_lat = grid.bbox[0] + (rc[:, 0] + 0.5) * grid.cell_h
    centroid_lng = grid.bbox[1] + (rc[:, 1] + 0.5) * grid.cell_w
    dist = _haversine_km(centroid_lat[:, None], centroid_lng[:, None], centroid_lat[None, :], centroid_lng[None, :])
    dest_logit = 0.7 * np.log(pop)[None, :] - dist / 8.0 + 2.5 * np.outer(u, v)
    dest_p = np.exp(dest_logit - dest_logit.max(axis=1, keepdims=True))
    dest_cdf = np.cumsum(dest_p / dest_p.sum(axis=1, keepdims=True), axis=1)
    d = np.minimum((dest_cdf[o] < rng.random(n)[:, None]).sum(axis=1), R - 1)

    p_lat, p_lng = _points_in_cells(grid, o, rng)
    q_lat, q_lng = _points_in_cells(grid, d, rng)

    # assigned vehicle: further away in sparse outskirts and when the origin is short of supply
    cell_deficit = deficit[o, hour]
    sparsity = np.clip((pop.mean() / pop) ** 0.5, 0.5, 2.5)
    pick_target = rng.gamma(9.0, 0.09, size=n) * sparsity[o] * (1.0 + 0.25 * np.minimum(cell_deficit, 4.0))
    pick_target = np.clip(pick_target, 0.05, 8.0) / ROAD_FACTOR
    bearing = rng.uniform(0, 2 * np.pi, size=n)
    v_lat = p_lat + pick_target * np.cos(bearing) / 111.195
    v_lng = p_lng + pick_target * np.sin(bearing) / (111.195 * np.cos(np.radians(p_lat)))
    eps = 1e-6
    v_lat = np.round(np.clip(v_lat, grid.bbox[0] + eps, grid.bbox[2] - eps), 6)
    v_lng = np.round(np.clip(v_lng, grid.bbox[1] + eps, grid.bbox[3] - eps), 6)
    pick_m = np.round(ROAD_FACTOR * 1000 * _haversine_km(v_lat, v_lng, p_lat, p_lng), 1)
    trip_m = np.round(ROAD_FACTOR * 1000 * _haversine_km(p_lat, p_lng, q_lat, q_lng) + 200.0, 1)

    rush = np.array([
        time_slot_of(int(t), cfg.tz_offset, cfg.windows).slot in (Slot.MorningRush, Slot.EveningRush)
        for t in order_time
    ], dtype=np.float64)

    comp = {
        "base": np.full(n, w.base),
        "pick": w.w_pick * pick_m / 1000.0,
        "rush": w.w_rush * rush,
        "weather": w.w_weather * weather,
        "demand": w.w_demand * cell_deficit,
        "od_affinity": w.w_od_affinity * u[o] * v[d],
        "noise": rng.normal(0.0, w.noise_std, size=n) if w.noise_std > 0 else np.zeros(n),
    }
    raw = sum(comp.values())
    wt = np.rint(np.maximum(raw, MIN_WAIT_S)).astype(np.int64)
    pickup_time = order_time + wt
    dropoff_time = pickup_time + np.rint(trip_m / 1000.0 / 25.0 * 3600.0 + 60.0).astype(np.int64)
    driver = rng.integers(0, cfg.n_drivers, size=n)

    order = np.lexsort((np.arange(n), order_time))
    records = []
    trips_truth = []
    for k, i in enumerate(order):
        oid = f"T{k:06d}"
        records.append(TripRecord(
            order_id=oid,
            order_time=int(order_time[i]),
            driver_id=f"D{driver[i]:05d}",
            dispatch_point=GeoPoint(float(v_lat[i]), float(v_lng[i])),
            pickup_time=int(pickup_time[i]),
            pickup_point=GeoPoint(float(p_lat[i]), float(p_lng[i])),
            dropoff_time=int(dropoff_time[i]),
            dropoff_point=GeoPoint(float(q_lat[i]), float(q_lng[i])),
            trip_distance_m=float(trip_m[i]),
            pick_distance_m=float(pick_m[i]),
            weather_code=int(weather[i]),
        ))
        entry = {"order_id": oid, "wt_s": int(wt[i])}
        entry.update({name: float(c[i]) for name, c in comp.items()})
        trips_truth.append(entry)

    truth = {
        "seed": cfg.seed,
        "weights": asdict(w),
        "od_user_field": u.tolist(),
        "od_item_field": v.tolist(),
        "trips": trips_truth,
    }
    return SynthResult(records, truth)
