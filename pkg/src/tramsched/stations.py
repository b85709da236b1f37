"""Stop detection, station/traffic-light discrimination, platform geometry and
the stations database."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cluster import NOISE, ClusterParams, dbscan
from .geo import EARTH, GeoCoord, LocalFrame, haversine_distance, haversine_m
from .network import Direction, TransitNetwork
from .trace import Trace

log = logging.getLogger(__name__)

STATION = "station"
TRAFFIC_LIGHT = "traffic_light"


@dataclass(frozen=True)
class StationConfig:
    v_thresh_mps: float = 0.5
    min_dwell_s: float = 8.0
    f_min: float = 0.5
    t_min_s: float = 20.0
    min_visits: int = 3
    pass_radius_m: float = 30.0
    station_margin_m: float = 10.0
    upstream_m: float = 150.0


# ------------------------------------------------------------------ speeds
def point_speeds(trace: Trace) -> np.ndarray:
    """Reported speed where present, otherwise displacement / elapsed time."""
    speed = trace.speed.copy()
    missing = np.isnan(speed)
    if not missing.any() or len(trace) == 0:
        return speed
    if len(trace) == 1:
        speed[missing] = 0.0
        return speed
    step = haversine_m(trace.lat[:-1], trace.lon[:-1], trace.lat[1:], trace.lon[1:])
    dt = np.diff(trace.t) / 1000.0
    seg = np.where(dt > 0, step / np.where(dt > 0, dt, 1.0), np.nan)
    # Each point takes the speed of the segment arriving at it; the first point
    # takes the leaving segment. Zero-duration segments borrow a neighbour.
    derived = np.concatenate([[seg[0]], seg])
    for i in np.flatnonzero(np.isnan(derived)):
        nb = derived[max(0, i - 2): i + 3]
        nb = nb[~np.isnan(nb)]
        derived[i] = nb.mean() if len(nb) else 0.0
    speed[missing] = derived[missing]
    return speed


# -------------------------------------------------------------- intervals
@dataclass
class StopInterval:
    device_id: str
    t_start: int
    t_end: int
    centroid: GeoCoord
    start_idx: int
    end_idx: int  # inclusive
    cluster_ref: int | None = None

    @property
    def dwell(self) -> float:
        return (self.t_end - self.t_start) / 1000.0


def detect_stationary(trace: Trace, v_thresh_mps: float = 0.5, min_dwell_s: float = 8.0) -> list[StopInterval]:
    """Maximal runs of consecutive fixes slower than ``v_thresh_mps`` lasting
    at least ``min_dwell_s``."""
    if len(trace) == 0:
        return []
    slow = point_speeds(trace) < v_thresh_mps
    edges = np.diff(np.concatenate([[0], slow.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    out = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        if (trace.t[e] - trace.t[s]) / 1000.0 < min_dwell_s:
            continue
        w = trace.weight[s:e + 1]
        lat = float(np.average(trace.lat[s:e + 1], weights=w))
        lon = float(np.average(trace.lon[s:e + 1], weights=w))
        out.append(StopInterval(trace.device_id, int(trace.t[s]), int(trace.t[e]), GeoCoord(lat, lon), s, e))
    return out




def raw_stop_intervals(raw: Trace, cleaned: Trace, v_thresh_mps: float = 0.5,
                       min_dwell_s: float = 8.0) -> list[StopInterval]:
    """Stop intervals timed on the unsmoothed fixes, located on the cleaned ones.

    Window smoothing blurs the moving/stationary boundary and shortens stops by
    several seconds; raw speeds keep the timing sharp, while the cleaned trace
    keeps glitches out of the centroid.
    """
    out = []
    for iv in detect_stationary(raw, v_thresh_mps, min_dwell_s):
        lo = int(np.searchsorted(cleaned.t, iv.t_start, side="left"))
        hi = int(np.searchsorted(cleaned.t, iv.t_end, side="right"))
        if hi > lo:
            w = cleaned.weight[lo:hi]
            c = GeoCoord(float(np.average(cleaned.lat[lo:hi], weights=w)),
                         float(np.average(cleaned.lon[lo:hi], weights=w)))
        else:
            c = GeoCoord(float(np.median(raw.lat[iv.start_idx:iv.end_idx + 1])),
                         float(np.median(raw.lon[iv.start_idx:iv.end_idx + 1])))
        out.append(replace(iv, centroid=c))
    return out


def stationary_fixes(traces: list[Trace], v_thresh_mps: float = 0.5, min_dwell_s: float = 8.0):
    """(lat, lon) array and raw-fix weights of every fix inside a stop interval."""
    rows = []
    for tr in traces:
        for iv in detect_stationary(tr, v_thresh_mps, min_dwell_s):
            sl = slice(iv.start_idx, iv.end_idx + 1)
            rows.append(np.column_stack([tr.lat[sl], tr.lon[sl], tr.weight[sl]]))
    if not rows:
        return np.empty((0, 2)), np.empty(0)
    arr = np.vstack(rows)
    return arr[:, :2], arr[:, 2]

# ----------------------------------------------------------------- geometry
Mbr = list  # four (lat, lon) corners: SW, SE, NE, NW


def bounding_rectangle(lat, lon) -> Mbr:
    lo_lat, hi_lat = float(np.min(lat)), float(np.max(lat))
    lo_lon, hi_lon = float(np.min(lon)), float(np.max(lon))
    return [(lo_lat, lo_lon), (lo_lat, hi_lon), (hi_lat, hi_lon), (hi_lat, lo_lon)]


def mbr_sides(mbr: Mbr) -> tuple[float, float]:
    """Haversine lengths of the (south, west) sides of a rectangle."""
    sw, se, _, nw = (GeoCoord(*c) for c in mbr)
    return haversine_distance(sw, se), haversine_distance(sw, nw)


def mbr_contains(mbr: Mbr, lat, lon, margin_m: float = 0.0):
    lats = [c[0] for c in mbr]
    lons = [c[1] for c in mbr]
    dlat = margin_m / EARTH.meters_per_degree
    dlon = dlat / max(math.cos(math.radians(lats[0])), 1e-9)
    lat = np.asarray(lat)
    lon = np.asarray(lon)
    return ((lat >= min(lats) - dlat) & (lat <= max(lats) + dlat)
            & (lon >= min(lons) - dlon) & (lon <= max(lons) + dlon))


def distance_to_mbr(mbr: Mbr, lat: float, lon: float) -> float:
    """Meters from a point to the nearest point of a rectangle (0 inside)."""
    lats = [c[0] for c in mbr]
    lons = [c[1] for c in mbr]
    near = GeoCoord(min(max(lat, min(lats)), max(lats)), min(max(lon, min(lons)), max(lons)))
    return haversine_distance(GeoCoord(lat, lon), near)


@dataclass
class PlatformEstimate:
    mbr: Mbr
    length_m: float
    degenerate: bool


def estimate_platform(lat, lon) -> PlatformEstimate:
    """Axis-aligned bounding rectangle of a cluster and the haversine length
    of its longer side."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if len(lat) == 0:
        raise ValueError("empty cluster")
    mbr = bounding_rectangle(lat, lon)
    distinct = len(set(zip(lat.tolist(), lon.tolist())))
    if distinct < 2:
        return PlatformEstimate(mbr, 0.0, True)
    return PlatformEstimate(mbr, max(mbr_sides(mbr)), False)


# --------------------------------------------------------------- classify
@dataclass
class StopFeatures:
    cluster_id: int
    centroid: GeoCoord
    mbr: Mbr
    visit_count: int
    traces_passing: int
    median_dwell_s: float
    boarding_events: int = 0

    @property
    def stop_frequency(self) -> float:
        return self.visit_count / self.traces_passing if self.traces_passing else 0.0


@dataclass
class StopLabel:
    kind: str
    low_confidence: bool = False
    reason: str = ""


def classify_stops(features: list[StopFeatures], f_min: float = 0.5, t_min_s: float = 20.0,
                   min_visits: int = 3) -> list[StopLabel]:
    """Station iff boarding/alighting was seen inside the cluster, or riders
    stop there often enough and long enough; otherwise traffic light."""
    out = []
    for f in features:
        if f.visit_count < min_visits:
            out.append(StopLabel(TRAFFIC_LIGHT, True, f"only {f.visit_count} visits"))
        elif f.boarding_events > 0:
            out.append(StopLabel(STATION, False, "boarding evidence"))
        elif f.stop_frequency >= f_min and f.median_dwell_s >= t_min_s:
            out.append(StopLabel(STATION, False, "frequent long stops"))
        else:
            out.append(StopLabel(TRAFFIC_LIGHT, False, "infrequent or short stops"))
    return out


# ---------------------------------------------------------------- database
class StationsDbError(ValueError):
    pass


@dataclass
class StopPlace:
    id: str
    kind: str
    lat: float
    lon: float
    mbr: Mbr
    platform_length_m: float | None
    visit_count: int
    median_dwell_s: float
    version: int = 1
    low_confidence: bool = False

    @property
    def centroid(self) -> GeoCoord:
        return GeoCoord(self.lat, self.lon)

    def to_dict(self) -> dict:
        return {
            "id": self.id, "kind": self.kind, "lat": self.lat, "lon": self.lon,
            "mbr": [list(c) for c in self.mbr], "platform_length_m": self.platform_length_m,
            "visit_count": self.visit_count, "median_dwell_s": self.median_dwell_s,
            "version": self.version, "low_confidence": self.low_confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StopPlace":
        mbr = [tuple(float(v) for v in c) for c in d["mbr"]]
        if len(mbr) != 4 or any(len(c) != 2 for c in mbr):
            raise StationsDbError(f"place {d.get('id')}: mbr needs 4 (lat, lon) corners")
        if d["kind"] not in (STATION, TRAFFIC_LIGHT):
            raise StationsDbError(f"place {d.get('id')}: unknown kind {d['kind']!r}")
        GeoCoord(float(d["lat"]), float(d["lon"]))
        pl = d.get("platform_length_m")
        if pl is not None and pl < 0:
            raise StationsDbError(f"place {d['id']}: negative platform length")
        return cls(str(d["id"]), d["kind"], float(d["lat"]), float(d["lon"]), mbr,
                   None if pl is None else float(pl), int(d["visit_count"]), float(d["median_dwell_s"]),
                   int(d.get("version", 1)), bool(d.get("low_confidence", False)))


class StationsDb:
    """Stop places keyed by id. Snapshots returned by ``places`` are copies."""

    def __init__(self, places=()):
        self._places: dict[str, StopPlace] = {}
        for p in places:
            if p.id in self._places:
                raise StationsDbError(f"duplicate id {p.id}")
            self._places[p.id] = p

    def __len__(self):
        return len(self._places)

    def __eq__(self, other):
        return isinstance(other, StationsDb) and self.places() == other.places()

    def __getitem__(self, pid) -> StopPlace:
        return self._places[pid]

    def places(self, kind: str | None = None) -> list[StopPlace]:
        return [replace(p) for p in sorted(self._places.values(), key=lambda p: p.id)
                if kind is None or p.kind == kind]

    def stations(self) -> list[StopPlace]:
        return self.places(STATION)

    def _next_id(self, kind: str) -> str:
        prefix = "ST" if kind == STATION else "TL"
        n = 1
        while f"{prefix}{n}" in self._places:
            n += 1
        return f"{prefix}{n}"

    def upsert(self, place: StopPlace, dt_deg: float) -> tuple[str, bool]:
        """Update the nearest same-kind place within ``dt_deg``, else insert.

        Returns (id, inserted).
        """
        best, best_d = None, None
        for p in self._places.values():
            if p.kind != place.kind:
                continue
            d = math.hypot(p.lat - place.lat, p.lon - place.lon)
            if d <= dt_deg and (best_d is None or d < best_d):
                best, best_d = p, d
        if best is not None:
            self._places[best.id] = replace(place, id=best.id, version=best.version + 1,
                                            visit_count=best.visit_count + place.visit_count)
            return best.id, False
        pid = place.id if place.id and place.id not in self._places else self._next_id(place.kind)
        self._places[pid] = replace(place, id=pid, version=1)
        return pid, True

    def to_json(self) -> str:
        return json.dumps([p.to_dict() for p in self.places()], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StationsDb":
        try:
            data = json.loads(text)
            if not isinstance(data, list):
                raise StationsDbError("stations db must be a JSON array")
            return cls(StopPlace.from_dict(d) for d in data)
        except StationsDbError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise StationsDbError(f"corrupt stations db: {exc}") from exc


def save_db(db: StationsDb, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".stations-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        fh.write(db.to_json())
    os.replace(tmp, path)


def load_db(path) -> StationsDb:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StationsDbError(f"cannot read stations db {path}: {exc}") from exc
    return StationsDb.from_json(text)


# ------------------------------------------------------------- detection run
@dataclass
class DetectionRun:
    db: StationsDb
    intervals: dict[str, list[StopInterval]]
    features: list[StopFeatures]
    labels: list[StopLabel]
    cluster_place: dict[int, str] = field(default_factory=dict)
    platforms: dict[int, PlatformEstimate] = field(default_factory=dict)

    def station_centroids(self) -> np.ndarray:
        return np.array([[p.lat, p.lon] for p in self.db.stations()]).reshape(-1, 2)


def traces_passing_count(traces: list[Trace], lat: float, lon: float, radius_m: float) -> int:
    """Number of traces whose path (fixes joined by straight segments) comes
    within ``radius_m`` of the point."""
    frame = LocalFrame(lat, lon)
    count = 0
    for tr in traces:
        if len(tr) == 0:
            continue
        x, y = frame.to_xy(tr.lat, tr.lon)
        if len(tr) == 1:
            hit = math.hypot(x[0], y[0]) <= radius_m
        else:
            ax, ay = x[:-1], y[:-1]
            dx, dy = np.diff(x), np.diff(y)
            L2 = dx * dx + dy * dy
            u = np.clip(np.where(L2 > 0, -(ax * dx + ay * dy) / np.where(L2 > 0, L2, 1), 0), 0, 1)
            hit = bool(np.min(np.hypot(ax + u * dx, ay + u * dy)) <= radius_m)
        count += int(hit)
    return count


def detect_stop_places(traces: list[Trace], params: ClusterParams = ClusterParams(),
                       config: StationConfig = StationConfig(), db: StationsDb | None = None) -> DetectionRun:
    """Stationary fixes -> weighted DBSCAN -> per-cluster features -> labels,
    platform rectangles, and an upsert into ``db`` (a fresh one by default).

    Cluster density counts raw fixes (each row's weight), so ``minpts`` keeps
    its meaning on smoothed traces.
    """
    db = StationsDb() if db is None else db
    intervals: dict[str, list[StopInterval]] = {}
    rows, owners = [], []
    for ti, tr in enumerate(traces):
        ivs = detect_stationary(tr, config.v_thresh_mps, config.min_dwell_s)
        intervals[tr.device_id] = ivs
        for k, iv in enumerate(ivs):
            for i in range(iv.start_idx, iv.end_idx + 1):
                rows.append((tr.lat[i], tr.lon[i], tr.weight[i]))
                owners.append((ti, k))
    if not rows:
        return DetectionRun(db, intervals, [], [])
    arr = np.asarray(rows)
    res = dbscan(arr[:, :2], params.minpts, params.eps_deg, weights=arr[:, 2])
    owners_arr = np.asarray(owners)

    # Assign each interval to the cluster holding most of its weight.
    visit_pts: dict[int, list[tuple[float, float]]] = {}
    visit_dwells: dict[int, list[float]] = {}
    visit_traces: dict[int, set] = {}
    for ti, tr in enumerate(traces):
        for k, iv in enumerate(intervals[tr.device_id]):
            sel = np.flatnonzero((owners_arr[:, 0] == ti) & (owners_arr[:, 1] == k))
            labs = res.labels[sel]
            w = arr[sel, 2]
            inside = labs != NOISE
            if not inside.any():
                continue
            tally: dict[int, float] = {}
            for lab, wt in zip(labs[inside].tolist(), w[inside].tolist()):
                tally[lab] = tally.get(lab, 0.0) + wt
            lab = max(sorted(tally), key=lambda c: tally[c])
            if tally[lab] < 0.5 * w.sum():
                continue
            iv.cluster_ref = lab
            m = sel[labs == lab]
            visit_pts.setdefault(lab, []).append(
                (float(np.average(arr[m, 0], weights=arr[m, 2])), float(np.average(arr[m, 1], weights=arr[m, 2]))))
            visit_dwells.setdefault(lab, []).append(iv.dwell)
            visit_traces.setdefault(lab, set()).add(ti)
    # Merge back-to-back intervals of one trace at the same cluster.
    for ivs in intervals.values():
        merged: list[StopInterval] = []
        for iv in ivs:
            if merged and iv.cluster_ref is not None and merged[-1].cluster_ref == iv.cluster_ref:
                prev = merged[-1]
                merged[-1] = StopInterval(prev.device_id, prev.t_start, iv.t_end, prev.centroid,
                                          prev.start_idx, iv.end_idx, prev.cluster_ref)
            else:
                merged.append(iv)
        ivs[:] = merged

    features = []
    for c in range(res.n_clusters):
        members = res.labels == c
        mlat, mlon = arr[members, 0], arr[members, 1]
        mbr = bounding_rectangle(mlat, mlon)
        centroid = GeoCoord(*res.centroids[c])
        visits = sum(1 for ivs in intervals.values() for iv in ivs if iv.cluster_ref == c)
        boarding = 0
        for tr in traces:
            ev = np.flatnonzero(tr.event != None)  # noqa: E711
            if len(ev):
                boarding += int(mbr_contains(mbr, tr.lat[ev], tr.lon[ev]).sum())
        features.append(StopFeatures(
            c, centroid, mbr, visits,
            traces_passing_count(traces, centroid.lat, centroid.lon, config.pass_radius_m),
            float(np.median(visit_dwells.get(c, [0.0]))), boarding))
    labels = classify_stops(features, config.f_min, config.t_min_s, config.min_visits)

    run = DetectionRun(db, intervals, features, labels)
    for f, lab in zip(features, labels):
        pts = np.asarray(visit_pts.get(f.cluster_id, [(f.centroid.lat, f.centroid.lon)]))
        plat = estimate_platform(pts[:, 0], pts[:, 1])
        run.platforms[f.cluster_id] = plat
        place = StopPlace(
            "", lab.kind, f.centroid.lat, f.centroid.lon,
            plat.mbr if lab.kind == STATION else f.mbr,
            plat.length_m if lab.kind == STATION else None,
            f.visit_count, f.median_dwell_s, low_confidence=lab.low_confidence or plat.degenerate,
        )
        pid, _ = db.upsert(place, params.dt_deg)
        run.cluster_place[f.cluster_id] = pid
    return run


# ---------------------------------------------------------------- buffering
@dataclass
class BufferingEvent:
    interval: StopInterval
    station_id: str


def detect_buffering(intervals: list[StopInterval], stations: list[StopPlace], direction: Direction | None,
                     upstream_m: float = 150.0, margin_m: float = 10.0,
                     network: TransitNetwork | None = None, light_radius_m: float = 30.0) -> list[BufferingEvent]:
    """Stops just short of a station that the trace then stops at.

    An interval qualifies when it lies outside every station rectangle
    (grown by ``margin_m``), within ``upstream_m`` of the rectangle of the
    station where the trace stops next, and, given a network, upstream of it
    along the travel direction and away from any traffic light. Without a
    direction nothing is labelled.
    """
    if direction is None:
        return []
    out = []
    ivs = sorted(intervals, key=lambda iv: iv.t_start)

    def station_of(iv):
        for s in stations:
            if mbr_contains(s.mbr, iv.centroid.lat, iv.centroid.lon, margin_m):
                return s
        return None

    for k, iv in enumerate(ivs[:-1]):
        if station_of(iv) is not None:
            continue
        nxt = station_of(ivs[k + 1])
        if nxt is None:
            continue
        if distance_to_mbr(nxt.mbr, iv.centroid.lat, iv.centroid.lon) > upstream_m:
            continue
        if network is not None:
            if any(haversine_distance(iv.centroid, GeoCoord(l.lat, l.lon)) <= light_radius_m
                   for l in network.lights()):
                continue
            lid, _, arc_iv = network.snap(iv.centroid.lat, iv.centroid.lon)
            _, arc_st = network.lines[lid].polyline.project(nxt.lat, nxt.lon)
            if (arc_st[0] - arc_iv) * direction.sign <= 0:
                continue
        out.append(BufferingEvent(iv, nxt.id))
    return out
