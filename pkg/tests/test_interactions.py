import json
import math
from collections import Counter

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import HOUR, MONDAY, make_trip
from waitpred.config import parse_config
from waitpred.errors import ConfigError, ModelError
from waitpred.features import Availability, Task
from waitpred.interactions import (
    POST_SPECS,
    PRE_SPECS,
    CFSpec,
    CooccurrenceMatrix,
    InteractionModels,
    build_cooccurrence,
    decompose_3d,
    fit_interactions,
    fit_region_clusters,
    haversine_km,
    interaction_columns,
    lloyd,
    region_distances,
    train_mf,
)
from waitpred.pipeline import fit_features
from waitpred.trip_data import GeoPoint, RegionGrid, label_trip

O_D = CFSpec.parse("O->D")


def _at(grid, region):
    c = grid.centroid(region)
    return (c.lat, c.lng)


# co-occurrence -----------------------------------------------------------


def test_cooccurrence_counts(grid):
    trips = [make_trip(grid, oid=f"t{i}", pickup=_at(grid, 5), dropoff=_at(grid, 9)) for i in range(3)]
    m = build_cooccurrence(trips, O_D)
    assert m.count((5,), (9,)) == 3
    assert m.count((9,), (5,)) == 0


def test_empty_cooccurrence():
    m = build_cooccurrence([], O_D)
    assert len(m) == 0 and m.user_index == {} and m.item_index == {}


def test_cooccurrence_matches_histogram(synth_trips):
    oracle = Counter((t.o_region, t.d_region) for t in synth_trips)
    m = build_cooccurrence(synth_trips, O_D)
    assert len(m) == len(oracle)
    for (o, d), c in oracle.items():
        assert m.count((o,), (d,)) == c


def test_cooccurrence_round_trip(synth_trips):
    m = build_cooccurrence(synth_trips[:300], CFSpec.parse("driver->O,D,rush"))
    back = CooccurrenceMatrix.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.counts == m.counts and back.user_index == m.user_index and back.item_index == m.item_index


def test_spec_parsing():
    s = CFSpec.parse("O->D,rush")
    assert s.user == ("O",) and s.item == ("D", "rush") and not s.post_only
    assert CFSpec.parse("V->O,rush").post_only
    with pytest.raises(ConfigError):
        CFSpec.parse("O-D")
    with pytest.raises(ConfigError):
        CFSpec.parse("O->weather")


# matrix factorization ----------------------------------------------------


def _matrix(cells):
    users = sorted({u for u, _ in cells})
    items = sorted({i for _, i in cells})
    ui = {(u,): n for n, u in enumerate(users)}
    ii = {(i,): n for n, i in enumerate(items)}
    return CooccurrenceMatrix(ui, ii, {(ui[(u,)], ii[(i,)]): c for (u, i), c in cells.items()})


def _rank1_matrix():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.8, 2.0, 30)
    b = rng.uniform(0.8, 2.0, 20)
    return _matrix({(u, i): int(round(math.expm1(a[u] * b[i]))) for u in range(30) for i in range(20)})


def mf_reconstruction(m):
    model = train_mf(m)
    cells = [(u, i, c) for (u, i), c in m.counts.items()]
    inv_u = {v: k for k, v in m.user_index.items()}
    inv_i = {v: k for k, v in m.item_index.items()}
    target = np.log1p([c for _, _, c in cells])
    pred = np.array([model.affinity(inv_u[u], inv_i[i]) for u, i, _ in cells])
    return float(np.sqrt(np.mean((pred - target) ** 2))), float(target.std())


def test_mf_rank1_reconstruction():
    err, std = mf_reconstruction(_rank1_matrix())
    assert err < 0.1 * std


def test_mf_single_entry():
    model = train_mf(_matrix({(3, 4): 17}))
    assert abs(model.affinity((3,), (4,)) - math.log1p(17)) < 1e-3


def test_mf_unknown_user_falls_back():
    model = train_mf(_rank1_matrix())
    assert model.affinity((999,), (0,)) == model.global_mean
    assert model.affinity((0,), (999,)) == model.global_mean


def test_mf_deterministic_and_seed_sensitive():
    m = _rank1_matrix()
    a, b, c = train_mf(m, seed=1), train_mf(m, seed=1), train_mf(m, seed=2)
    assert np.array_equal(a.user_vecs, b.user_vecs)
    assert not np.array_equal(a.user_vecs, c.user_vecs)


def test_mf_rejects_bad_args():
    with pytest.raises(ConfigError):
        train_mf(_matrix({}))
    with pytest.raises(ConfigError):
        train_mf(_rank1_matrix(), rank=0)


# geometry ----------------------------------------------------------------


def test_decompose_identity_cases():
    assert decompose_3d(GeoPoint(0, 0)) == (1.0, 0.0, 0.0)
    for lng in (-120.0, 0.0, 33.3):
        np.testing.assert_allclose(decompose_3d(GeoPoint(90, lng)), (0, 0, 1), atol=1e-12)
    np.testing.assert_allclose(decompose_3d(GeoPoint(0, 90)), (0, 1, 0), atol=1e-12)


@settings(max_examples=300)
@given(st.floats(-90, 90), st.floats(-180, 180))
def test_decompose_unit_norm_property(lat, lng):
    x, y, z = decompose_3d(GeoPoint(lat, lng))
    assert abs(math.sqrt(x * x + y * y + z * z) - 1.0) < 1e-9


def _mp_haversine(a, b):
    mpmath.mp.dps = 40
    la1, lo1, la2, lo2 = (mpmath.radians(mpmath.mpf(v)) for v in (a.lat, a.lng, b.lat, b.lng))
    h = mpmath.sin((la2 - la1) / 2) ** 2 + mpmath.cos(la1) * mpmath.cos(la2) * mpmath.sin((lo2 - lo1) / 2) ** 2
    return float(2 * 6371 * mpmath.asin(mpmath.sqrt(h)))


def test_haversine_equator_degree():
    d = haversine_km(GeoPoint(0, 0), GeoPoint(0, 1))
    assert abs(d - _mp_haversine(GeoPoint(0, 0), GeoPoint(0, 1))) < 1e-9
    assert abs(d - 111.19) <= 0.01


@settings(max_examples=200)
@given(st.floats(-89, 89), st.floats(-179, 179), st.floats(-89, 89), st.floats(-179, 179))
def test_haversine_matches_high_precision(a1, o1, a2, o2):
    a, b = GeoPoint(a1, o1), GeoPoint(a2, o2)
    assert haversine_km(a, b) == pytest.approx(_mp_haversine(a, b), abs=1e-6)


def test_region_distances(grid):
    assert region_distances(7, 7, grid) == (0.0, 0.0, 0.0)
    a, b = 1 * grid.cols + 2, 4 * grid.cols + 6
    man, euc, geo = region_distances(a, b, grid)
    assert (man, euc) == (7.0, 5.0)
    assert geo == pytest.approx(haversine_km(grid.centroid(a), grid.centroid(b)))


def test_region_distances_reject_bad_ids(grid):
    from waitpred.errors import OutOfBounds

    with pytest.raises(OutOfBounds):
        region_distances(0, grid.n_regions, grid)


def test_equator_centroids_one_degree_apart():
    g = RegionGrid((-0.5, 0.0, 0.5, 2.0), rows=1, cols=2)
    assert region_distances(0, 1, g)[2] == pytest.approx(111.19, abs=0.01)


# clustering --------------------------------------------------------------


def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).normal(size=(12, 3))
    _, labels, hist = lloyd(X, 12, seed=0)
    assert sorted(labels.tolist()) == list(range(12))
    assert hist[-1] == 0.0


def test_kmeans_recovers_planted_partition():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(0, 0.05, (20, 3)), rng.normal(5, 0.05, (15, 3))])
    _, labels, _ = lloyd(X, 2, seed=3)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    _, _, hist = lloyd(X, k, seed=seed)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))


def test_region_clusters_deterministic_and_complete(synth_trips, grid):
    a = fit_region_clusters(synth_trips, grid, k=10, seed=5)
    b = fit_region_clusters(synth_trips, grid, k=10, seed=5)
    assert a.assignment == b.assignment
    assert sorted(a.assignment) == list(range(grid.n_regions))
    assert set(a.assignment.values()) <= set(range(10))


def test_region_clusters_each_active_region_alone(grid):
    regions = [0, 30, 260, 499]
    trips = [make_trip(grid, oid=f"t{r}", pickup=_at(grid, r)) for r in regions]
    model = fit_region_clusters(trips, grid, k=4)
    assert len({model.cluster_of(r) for r in regions}) == 4
    assert model.inertia_history[-1] == pytest.approx(0.0, abs=1e-20)


def test_region_clusters_need_enough_active_regions(grid):
    with pytest.raises(ConfigError):
        fit_region_clusters([make_trip(grid)], grid, k=2)


# interaction rows --------------------------------------------------------


@pytest.fixture(scope="module")
def fitted(synth_trips):
    cfg = parse_config({})
    return {task: fit_features(synth_trips[:2400], task, cfg) for task in Task}


def test_column_counts(fitted):
    pre = interaction_columns(fitted[Task.PRE].interactions, Task.PRE)
    post = interaction_columns(fitted[Task.POST].interactions, Task.POST)
    assert len(pre) == 3 * 2 + 6 + 3 + 2 + 2 == 19
    assert len(post) == 19 + 10
    assert all(c.availability is Availability.PRE_OK for c in pre)
    assert all(c.availability is Availability.POST_ONLY for c in post[19:])
    assert post[:19] == pre


def test_row_matches_schema(fitted, synth_trips):
    for task, ff in fitted.items():
        assert len(ff.row(synth_trips[-1])) == len(ff.schema.columns)


def _mutated(trip, grid, seed):
    rng = np.random.default_rng(seed)
    rec = trip.record
    from dataclasses import replace

    new = replace(
        rec,
        driver_id=f"X{rng.integers(10**6)}",
        dispatch_point=GeoPoint(
            float(rng.uniform(grid.bbox[0], grid.bbox[2])), float(rng.uniform(grid.bbox[1], grid.bbox[3]))
        ),
        pick_distance_m=float(rng.uniform(0, 9000)),
    )
    return label_trip(new, grid)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2399), st.integers(0, 2**31))
def test_pre_rows_ignore_vehicle_fields(fitted, synth_trips, i, seed):
    ff = fitted[Task.PRE]
    trip = synth_trips[i]
    assert ff.row(_mutated(trip, ff.grid, seed)) == ff.row(trip)


def test_post_rows_see_vehicle_fields(fitted, synth_trips):
    ff = fitted[Task.POST]
    changed = sum(ff.row(_mutated(t, ff.grid, n)) != ff.row(t) for n, t in enumerate(synth_trips[:50]))
    assert changed == 50


def test_unknown_regions_fall_back(fitted, grid):
    models = fitted[Task.PRE].interactions
    known = {t for f in models.pre_cf for t in f.cooc.user_index}
    region = next(r for r in range(grid.n_regions) if (r,) not in known and (r, 0) not in known)
    trip = make_trip(grid, pickup=_at(grid, region), dropoff=_at(grid, region), order_time=MONDAY + 13 * HOUR)
    names = interaction_columns(models, Task.PRE)
    row = dict(zip([c.name for c in names], fitted[Task.PRE].row(trip)[8:]))
    for f in models.pre_cf:
        assert row[f"cf_{f.spec.name}_aff"] == f.model.global_mean
        assert row[f"cf_{f.spec.name}_cnt"] == 0.0
    assert row["OD_freq"] == 0.0
    assert 0 <= row["O_cluster"] < models.clusters.k


def test_post_request_needs_post_models(fitted, synth_trips):
    from waitpred.interactions import featurize_interactions

    with pytest.raises(ModelError):
        featurize_interactions(synth_trips[0], Task.POST, fitted[Task.PRE].interactions, fitted[Task.PRE].grid)


def test_pre_specs_must_not_use_vehicle(synth_trips, grid):
    with pytest.raises(ConfigError):
        fit_interactions(synth_trips[:500], Task.PRE, grid, pre_specs=[POST_SPECS[0]])


def test_models_round_trip_and_tamper(fitted, synth_trips):
    ff = fitted[Task.POST]
    d = json.loads(json.dumps(ff.interactions.to_dict()))
    back = InteractionModels.from_dict(d)
    assert back.fingerprint == ff.interactions.fingerprint
    from waitpred.pipeline import FittedFeatures

    restored = FittedFeatures.from_dict(json.loads(json.dumps(ff.to_dict())))
    assert restored.row(synth_trips[-5]) == ff.row(synth_trips[-5])
    d["od_counts"][0][2] += 1
    with pytest.raises(ModelError):
        InteractionModels.from_dict(d)


def test_default_spec_lists():
    assert [str(s) for s in PRE_SPECS] == ["O->D", "O->D,rush", "D->O,rush"]
    assert all(not s.post_only for s in PRE_SPECS) and all(s.post_only for s in POST_SPECS)
