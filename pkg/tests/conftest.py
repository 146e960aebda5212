import functools

import pytest

from waitpred.synth import SynthConfig, default_grid, generate
from waitpred.trip_data import GeoPoint, TripRecord, label_trip

# Monday 2019-01-07 00:00 local time at UTC+8
MONDAY = 1546790400
HOUR = 3600
DAY = 86400


@pytest.fixture
def grid():
    return default_grid()


def make_record(
    oid="T1",
    order_time=MONDAY + 12 * HOUR,
    wt=300,
    driver="D1",
    pickup=(22.60, 114.00),
    dropoff=(22.70, 114.20),
    dispatch=(22.61, 114.01),
    trip_m=5000.0,
    pick_m=800.0,
    weather=1,
) -> TripRecord:
    return TripRecord(
        order_id=oid,
        order_time=order_time,
        driver_id=driver,
        dispatch_point=GeoPoint(*dispatch),
        pickup_time=order_time + wt,
        pickup_point=GeoPoint(*pickup),
        dropoff_time=order_time + wt + 900,
        dropoff_point=GeoPoint(*dropoff),
        trip_distance_m=trip_m,
        pick_distance_m=pick_m,
        weather_code=weather,
    )


def make_trip(grid=None, **kw):
    return label_trip(make_record(**kw), grid or default_grid())


@functools.lru_cache(maxsize=4)
def small_synth(n=3000, seed=0):
    return generate(SynthConfig(n_trips=n, seed=seed))


@pytest.fixture(scope="session")
def synth_trips():
    grid = default_grid()
    return [label_trip(r, grid) for r in small_synth().records]


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
