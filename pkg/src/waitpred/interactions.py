"""Interaction features: latent co-occurrence affinities, 3D coordinates,
region distances, driver-preference affinities and k-means region clusters."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, ModelError
from .features import Availability, Column, Kind, Task
from .trip_data import DEFAULT_WINDOWS, GeoPoint, LabeledTrip, RegionGrid, SlotWindows, time_slot_of

EARTH_RADIUS_KM = 6371.0

# Key fields a co-occurrence spec may combine.
KEY_FIELDS = ("O", "D", "V", "driver", "rush")


@dataclass(frozen=True)
class CFSpec:
    user: tuple[str, ...]
    item: tuple[str, ...]

    def __post_init__(self):
        for f in self.user + self.item:
            if f not in KEY_FIELDS:
                raise ConfigError(f"unknown co-occurrence key field {f!r}")

    @property
    def name(self) -> str:
        return "_".join(self.user) + "__" + "_".join(self.item)

    @property
    def post_only(self) -> bool:
        return any(f in ("V", "driver") for f in self.user + self.item)

    @classmethod
    def parse(cls, text: str) -> "CFSpec":
        """``"O->D,rush"`` style notation."""
        try:
            user, item = text.split("->")
        except ValueError:
            raise ConfigError(f"bad co-occurrence spec {text!r}; expected 'USER->ITEM'") from None
        return cls(tuple(user.strip().split(",")), tuple(item.strip().split(",")))

    def __str__(self) -> str:
        return ",".join(self.user) + "->" + ",".join(self.item)


PRE_SPECS = tuple(CFSpec.parse(s) for s in ("O->D", "O->D,rush", "D->O,rush"))
POST_SPECS = tuple(CFSpec.parse(s) for s in ("V->O,rush", "driver->O,D", "driver->O,D,rush"))


def _field_value(trip: LabeledTrip, f: str, rush: int):
    if f == "O":
        return trip.o_region
    if f == "D":
        return trip.d_region
    if f == "V":
        return trip.v_region
    if f == "driver":
        return trip.record.driver_id
    return rush


def trip_keys(trip: LabeledTrip, spec: CFSpec, rush: int) -> tuple[tuple, tuple]:
    return (
        tuple(_field_value(trip, f, rush) for f in spec.user),
        tuple(_field_value(trip, f, rush) for f in spec.item),
    )


@dataclass
class CooccurrenceMatrix:
    user_index: dict[tuple, int]
    item_index: dict[tuple, int]
    counts: dict[tuple[int, int], int]

    def count(self, user: tuple, item: tuple) -> int:
        u = self.user_index.get(user)
        i = self.item_index.get(item)
        if u is None or i is None:
            return 0
        return self.counts.get((u, i), 0)

    def __len__(self) -> int:
        return len(self.counts)

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        keys = sorted(self.counts)
        u = np.array([k[0] for k in keys], dtype=np.int64)
        i = np.array([k[1] for k in keys], dtype=np.int64)
        c = np.array([self.counts[k] for k in keys], dtype=np.float64)
        return u, i, c

    def to_dict(self) -> dict:
        return {
            "users": [list(k) for k in self.user_index],
            "items": [list(k) for k in self.item_index],
            "counts": [[u, i, c] for (u, i), c in sorted(self.counts.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CooccurrenceMatrix":
        return cls(
            {tuple(k): n for n, k in enumerate(d["users"])},
            {tuple(k): n for n, k in enumerate(d["items"])},
            {(int(u), int(i)): int(c) for u, i, c in d["counts"]},
        )


def build_cooccurrence(
    train: Iterable[LabeledTrip],
    spec: CFSpec,
    tz_offset: float = 8.0,
    windows: SlotWindows = DEFAULT_WINDOWS,
) -> CooccurrenceMatrix:
    pairs = Counter()
    for trip in train:
        rush = int(time_slot_of(trip.order_time, tz_offset, windows).slot)
        pairs[trip_keys(trip, spec, rush)] += 1
    users = sorted({u for u, _ in pairs})
    items = sorted({i for _, i in pairs})
    user_index = {k: n for n, k in enumerate(users)}
    item_index = {k: n for n, k in enumerate(items)}
    counts = {(user_index[u], item_index[i]): c for (u, i), c in pairs.items()}
    return CooccurrenceMatrix(user_index, item_index, counts)


@njit(cache=True)
def _sgd_epoch(P, Q, users, items, targets, order, mean, lr, reg):
    rank = P.shape[1]
    for n in order:
        u = users[n]
        i = items[n]
        pred = mean
        for f in range(rank):
            pred += P[u, f] * Q[i, f]
        err = targets[n] - pred
        for f in range(rank):
            pu = P[u, f]
            qi = Q[i, f]
            P[u, f] = pu + lr * (err * qi - reg * pu)
            Q[i, f] = qi + lr * (err * pu - reg * qi)


@dataclass
class LatentFactorModel:
    rank: int
    user_index: dict[tuple, int]
    item_index: dict[tuple, int]
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    global_mean: float
    train_rmse_history: list[float] = field(default_factory=list)

    def affinity(self, user: tuple, item: tuple) -> float:
        u = self.user_index.get(user)
        i = self.item_index.get(item)
        if u is None or i is None:
            return self.global_mean
        return self.global_mean + float(self.user_vecs[u] @ self.item_vecs[i])

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "global_mean": self.global_mean,
            "user_vecs": self.user_vecs.tolist(),
            "item_vecs": self.item_vecs.tolist(),
            "train_rmse_history": list(self.train_rmse_history),
        }


def train_mf(
    m: CooccurrenceMatrix,
    rank: int = 8,
    epochs: int = 50,
    lr: float = 0.05,
    reg: float = 0.01,
    seed: int = 0,
) -> LatentFactorModel:
    """Biasless matrix factorization of log1p(count) by plain SGD.

    Only stored (non-zero) cells are fitted. Each epoch visits the cells in a
    permutation drawn from ``seed``, so training is fully deterministic.
    """
    if rank <= 0 or epochs <= 0 or lr <= 0:
        raise ConfigError(f"rank, epochs and lr must be positive (got {rank}, {epochs}, {lr})")
    if reg < 0:
        raise ConfigError(f"reg must be >= 0, got {reg}")
    if len(m) == 0:
        raise ConfigError("cannot factorize an empty co-occurrence matrix")
    users, items, counts = m.entries()
    targets = np.log1p(counts)
    mean = float(targets.mean())
    rng = np.random.default_rng(seed)
    scale = 0.01 / math.sqrt(rank)
    P = rng.uniform(-scale, scale, size=(len(m.user_index), rank))
    Q = rng.uniform(-scale, scale, size=(len(m.item_index), rank))
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(targets))
        _sgd_epoch(P, Q, users, items, targets, order, mean, lr, reg)
        resid = targets - mean - np.einsum("nf,nf->n", P[users], Q[items])
        history.append(float(np.sqrt(np.mean(resid**2))))
    return LatentFactorModel(rank, dict(m.user_index), dict(m.item_index), P, Q, mean, history)


def decompose_3d(p: GeoPoint) -> tuple[float, float, float]:
    lat, lng = math.radians(p.lat), math.radians(p.lng)
    return math.cos(lat) * math.cos(lng), math.cos(lat) * math.sin(lng), math.sin(lat)


def haversine_km(a: GeoPoint, b: GeoPoint, radius_km: float = EARTH_RADIUS_KM) -> float:
    lat1, lng1, lat2, lng2 = map(math.radians, (a.lat, a.lng, b.lat, b.lng))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lng2 - lng1) / 2) ** 2
    return 2 * radius_km * math.asin(min(1.0, math.sqrt(h)))


def region_distances(a: int, b: int, grid: RegionGrid) -> tuple[float, float, float]:
    """Manhattan and Euclidean distance in cells, and haversine km between centroids."""
    ra, ca = grid.row_col(a)
    rb, cb = grid.row_col(b)
    dr, dc = abs(ra - rb), abs(ca - cb)
    return float(dr + dc), math.hypot(dr, dc), haversine_km(grid.centroid(a), grid.centroid(b))


@dataclass
class RegionClusterModel:
    k: int
    centroids: np.ndarray
    assignment: dict[int, int]
    feature_min: np.ndarray
    feature_max: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    def cluster_of(self, region: int) -> int:
        return self.assignment[region]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "assignment": [self.assignment[r] for r in sorted(self.assignment)],
            "feature_min": self.feature_min.tolist(),
            "feature_max": self.feature_max.tolist(),
            "inertia_history": list(self.inertia_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionClusterModel":
        return cls(
            k=int(d["k"]),
            centroids=np.array(d["centroids"], dtype=np.float64).reshape(-1, 3),
            assignment={r: int(c) for r, c in enumerate(d["assignment"])},
            feature_min=np.array(d["feature_min"], dtype=np.float64),
            feature_max=np.array(d["feature_max"], dtype=np.float64),
            inertia_history=list(d["inertia_history"]),
        )


def _nearest(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)  # first minimum -> lowest cluster id on ties
    return labels, d2[np.arange(len(X)), labels]


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(X)))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(len(X), p=d2 / total))
        else:
            nxt = next(i for i in range(len(X)) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def lloyd(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """k-means++ seeded Lloyd iterations; returns (centroids, labels, inertia per iteration)."""
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(X, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        new_labels, d2 = _nearest(X, centroids)
        history.append(float(d2.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = X[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    labels, _ = _nearest(X, centroids)
    return centroids, labels, history


def _region_vectors(grid: RegionGrid, origin_counts: np.ndarray) -> np.ndarray:
    cent = [grid.centroid(r) for r in range(grid.n_regions)]
    return np.column_stack([
        [c.lat for c in cent],
        [c.lng for c in cent],
        np.log1p(origin_counts),
    ])


def fit_region_clusters(
    train: Sequence[LabeledTrip],
    grid: RegionGrid,
    k: int = 10,
    seed: int = 0,
    max_iter: int = 100,
) -> RegionClusterModel:
    """Cluster active regions on [lat, lng, log1p(origin count)], each min-max
    normalized over the active regions; every grid region is then mapped to
    its nearest centroid."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    counts = np.bincount([t.o_region for t in train], minlength=grid.n_regions).astype(np.float64)
    active = np.flatnonzero(counts > 0)
    if len(active) < k:
        raise ConfigError(f"only {len(active)} regions have origins, fewer than k={k}")
    raw = _region_vectors(grid, counts)
    lo, hi = raw[active].min(axis=0), raw[active].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = (raw - lo) / span
    centroids, _, history = lloyd(X[active], k, seed, max_iter)
    labels, _ = _nearest(X, centroids)
    return RegionClusterModel(k, centroids, {r: int(c) for r, c in enumerate(labels)}, lo, hi, history)


# Interaction featurization -------------------------------------------------


@dataclass
class CFFeature:
    spec: CFSpec
    cooc: CooccurrenceMatrix
    model: LatentFactorModel

    def to_dict(self) -> dict:
        return {"spec": str(self.spec), "cooc": self.cooc.to_dict(), "mf": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CFFeature":
        cooc = CooccurrenceMatrix.from_dict(d["cooc"])
        mf = d["mf"]
        model = LatentFactorModel(
            rank=int(mf["rank"]),
            user_index=dict(cooc.user_index),
            item_index=dict(cooc.item_index),
            user_vecs=np.array(mf["user_vecs"], dtype=np.float64).reshape(len(cooc.user_index), -1),
            item_vecs=np.array(mf["item_vecs"], dtype=np.float64).reshape(len(cooc.item_index), -1),
            global_mean=float(mf["global_mean"]),
            train_rmse_history=list(mf["train_rmse_history"]),
        )
        return cls(CFSpec.parse(d["spec"]), cooc, model)


@dataclass
class InteractionModels:
    """Everything fitted on the training window that interaction features need."""

    task: Task
    pre_cf: list[CFFeature]
    post_cf: list[CFFeature]
    od_counts: dict[tuple[int, int], int]
    odr_counts: dict[tuple[int, int, int], int]
    clusters: RegionClusterModel
    tz_offset: float = 8.0
    windows: SlotWindows = DEFAULT_WINDOWS

    def to_dict(self) -> dict:
        d = {
            "task": self.task.value,
            "tz_offset": self.tz_offset,
            "windows": [list(self.windows.morning), list(self.windows.evening), list(self.windows.late_night)],
            "pre_cf": [f.to_dict() for f in self.pre_cf],
            "post_cf": [f.to_dict() for f in self.post_cf],
            "od_counts": [[o, d_, c] for (o, d_), c in sorted(self.od_counts.items())],
            "odr_counts": [[o, d_, r, c] for (o, d_, r), c in sorted(self.odr_counts.items())],
            "clusters": self.clusters.to_dict(),
        }
        d["fingerprint"] = _fingerprint(d)
        return d

    @property
    def fingerprint(self) -> str:
        return self.to_dict()["fingerprint"]

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionModels":
        body = {k: v for k, v in d.items() if k != "fingerprint"}
        if d.get("fingerprint") != _fingerprint(body):
            raise ModelError("interaction model fingerprint mismatch")
        w = d["windows"]
        return cls(
            task=Task(d["task"]),
            pre_cf=[CFFeature.from_dict(f) for f in d["pre_cf"]],
            post_cf=[CFFeature.from_dict(f) for f in d["post_cf"]],
            od_counts={(o, d_): c for o, d_, c in d["od_counts"]},
            odr_counts={(o, d_, r): c for o, d_, r, c in d["odr_counts"]},
            clusters=RegionClusterModel.from_dict(d["clusters"]),
            tz_offset=float(d["tz_offset"]),
            windows=SlotWindows(tuple(w[0]), tuple(w[1]), tuple(w[2])),
        )


def _fingerprint(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def fit_interactions(
    train: Sequence[LabeledTrip],
    task: Task,
    grid: RegionGrid,
    pre_specs: Sequence[CFSpec] = PRE_SPECS,
    post_specs: Sequence[CFSpec] = POST_SPECS,
    rank: int = 8,
    epochs: int = 50,
    lr: float = 0.05,
    reg: float = 0.01,
    k: int = 10,
    max_iter: int = 100,
    seed: int = 0,
    tz_offset: float = 8.0,
    windows: SlotWindows = DEFAULT_WINDOWS,
) -> InteractionModels:
    for spec in pre_specs:
        if spec.post_only:
            raise ConfigError(f"co-occurrence spec {spec} uses vehicle/driver keys and cannot be pre-request")

    def fit(spec: CFSpec, n: int) -> CFFeature:
        cooc = build_cooccurrence(train, spec, tz_offset, windows)
        return CFFeature(spec, cooc, train_mf(cooc, rank, epochs, lr, reg, seed + n))

    pre_cf = [fit(s, n) for n, s in enumerate(pre_specs)]
    post_cf = [fit(s, len(pre_cf) + n) for n, s in enumerate(post_specs)] if task is Task.POST else []
    od = Counter()
    odr = Counter()
    for t in train:
        rush = int(time_slot_of(t.order_time, tz_offset, windows).slot)
        od[(t.o_region, t.d_region)] += 1
        odr[(t.o_region, t.d_region, rush)] += 1
    clusters = fit_region_clusters(train, grid, k, seed, max_iter)
    return InteractionModels(task, pre_cf, post_cf, dict(od), dict(odr), clusters, tz_offset, windows)


def interaction_columns(models: InteractionModels, task: Task) -> list[Column]:
    ok, post = Availability.PRE_OK, Availability.POST_ONLY
    cont, ordinal = Kind.CONTINUOUS, Kind.ORDINAL
    cols = []
    for f in models.pre_cf:
        cols += [Column(f"cf_{f.spec.name}_aff", cont, ok), Column(f"cf_{f.spec.name}_cnt", cont, ok)]
    cols += [Column(f"{p}_{a}", cont, ok) for p in "OD" for a in "xyz"]
    cols += [Column(f"OD_{m}", cont, ok) for m in ("manhattan", "euclidean", "geo_km")]
    cols += [Column("OD_freq", cont, ok), Column("OD_rush_freq", cont, ok)]
    cols += [Column("O_cluster", ordinal, ok), Column("D_cluster", ordinal, ok)]
    if task is Task.POST:
        cols += [Column(f"cf_{f.spec.name}_aff", cont, post) for f in models.post_cf if "driver" not in f.spec.user]
        cols += [Column(f"V_{a}", cont, post) for a in "xyz"]
        cols += [Column(f"OV_{m}", cont, post) for m in ("manhattan", "euclidean", "geo_km")]
        cols += [Column(f"cf_{f.spec.name}_aff", cont, post) for f in models.post_cf if "driver" in f.spec.user]
        cols += [Column("V_cluster", ordinal, post)]
    return cols


def featurize_interactions(
    trip: LabeledTrip,
    task: Task,
    models: InteractionModels,
    grid: RegionGrid,
) -> list[float]:
    """Interaction-feature extension of one trip's row, ordered as ``interaction_columns``.

    PRE rows read only origin, destination and order time, so they cannot
    depend on the assigned vehicle or driver.
    """
    if task is Task.POST and models.task is not Task.POST:
        raise ModelError("interaction models were fitted for the pre-request task only")
    rec = trip.record
    rush = int(time_slot_of(rec.order_time, models.tz_offset, models.windows).slot)
    o, d = trip.o_region, trip.d_region
    row: list[float] = []
    for f in models.pre_cf:
        user, item = trip_keys(trip, f.spec, rush)
        row += [f.model.affinity(user, item), math.log1p(f.cooc.count(user, item))]
    row += decompose_3d(rec.pickup_point)
    row += decompose_3d(rec.dropoff_point)
    row += region_distances(o, d, grid)
    row += [math.log1p(models.od_counts.get((o, d), 0)), math.log1p(models.odr_counts.get((o, d, rush), 0))]
    row += [float(models.clusters.cluster_of(o)), float(models.clusters.cluster_of(d))]
    if task is Task.POST:
        vehicle_keyed = [f for f in models.post_cf if "driver" not in f.spec.user]
        driver_keyed = [f for f in models.post_cf if "driver" in f.spec.user]
        for f in vehicle_keyed:
            row.append(f.model.affinity(*trip_keys(trip, f.spec, rush)))
        row += decompose_3d(rec.dispatch_point)
        row += region_distances(o, trip.v_region, grid)
        for f in driver_keyed:
            row.append(f.model.affinity(*trip_keys(trip, f.spec, rush)))
        row.append(float(models.clusters.cluster_of(trip.v_region)))
    return row
