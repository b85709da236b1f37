"""Delay distributions, normality checks, trip-time aggregation, ETA queries and
the history store.

Trip time is a sum of independent normal terms, so its mean and variance are
the sums of the per-term means and (coefficient-squared) variances. Terms that
only sometimes occur (signal waits, queueing before a station) enter with their
occurrence rate r: a term that is 0 w.p. 1-r and N(mu, sigma2) w.p. r has mean
r*mu and variance r*(sigma2 + mu^2) - (r*mu)^2.
"""

from __future__ import annotations

import enum
import json
import math
import os
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geo import GeoCoord
from .network import Direction, NetworkError, TransitNetwork, detect_direction
from .stations import (StationsDb, StopInterval, detect_buffering, detect_stationary,
                       mbr_contains, raw_stop_intervals)
from .trace import Trace

Z_95 = 1.96
DEFAULT_N_MIN = 8


class DelayKind(enum.Enum):
    STATION = "station_delay"
    TRAFFIC = "traffic_delay"
    BUFFERING = "buffering_delay"
    SEGMENT = "segment_time"
    LEG = "leg_time"


def pair_ref(a: str, b: str) -> str:
    return f"{a}->{b}"


# ------------------------------------------------------------------ samples
@dataclass
class DelaySamples:
    kind: DelayKind
    element_ref: str
    samples: list[float] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    opportunities: int = 0  # passages where the delay could have occurred

    def add(self, value_s: float, t_ms: int):
        if not (math.isfinite(value_s) and value_s > 0):
            raise ValueError(f"delay samples must be finite and positive, got {value_s}")
        self.samples.append(float(value_s))
        self.timestamps.append(int(t_ms))


@dataclass
class ExtractConfig:
    station_margin_m: float = 10.0
    light_radius_m: float = 60.0
    pass_radius_m: float = 30.0
    upstream_m: float = 150.0
    v_thresh_mps: float = 0.5
    min_dwell_s: float = 8.0
    match_dt_deg: float = 0.0003
    same_event_ms: int = 10_000


@dataclass
class ExtractReport:
    traces: int = 0
    traces_without_direction: int = 0
    unmatched_stops: int = 0
    samples: int = 0


@dataclass
class _Visit:
    place: str
    kind: str  # station | light
    arrive: float
    depart: float
    stopped: bool
    partial_start: bool = False
    partial_end: bool = False


def _passage_time(trace: Trace, frame, px: float, py: float, radius_m: float) -> float | None:
    """Interpolated time of closest approach to (px, py), if within radius and
    strictly inside the trace."""
    if len(trace) < 2:
        return None
    x, y = frame.to_xy(trace.lat, trace.lon)
    ax, ay = x[:-1] - px, y[:-1] - py
    dx, dy = np.diff(x), np.diff(y)
    L2 = dx * dx + dy * dy
    u = np.clip(np.where(L2 > 0, -(ax * dx + ay * dy) / np.where(L2 > 0, L2, 1), 0), 0, 1)
    d = np.hypot(ax + u * dx, ay + u * dy)
    k = int(np.argmin(d))
    if d[k] > radius_m:
        return None
    if (k == 0 and u[k] == 0) or (k == len(d) - 1 and u[k] == 1):
        return None
    return float(trace.t[k] + u[k] * (trace.t[k + 1] - trace.t[k]))


def station_place_map(db: StationsDb, network: TransitNetwork, dt_deg: float) -> dict[str, str]:
    """DB station id -> nearest network station id within ``dt_deg``."""
    out = {}
    net_st = network.stations()
    for s in db.stations():
        best = min(net_st, key=lambda p: math.hypot(p.lat - s.lat, p.lon - s.lon), default=None)
        if best is not None and math.hypot(best.lat - s.lat, best.lon - s.lon) <= dt_deg:
            out[s.id] = best.id
    return out


def extract_delay_samples(traces: list[Trace], db: StationsDb, network: TransitNetwork,
                          intervals: dict[str, list[StopInterval]] | None = None,
                          config: ExtractConfig = ExtractConfig(), raw: dict[str, Trace] | None = None):
    """Turn traces into per-element delay samples.

    Returns (dict (kind, ref) -> DelaySamples, ExtractReport). Dwell at a
    station is only sampled when the stop lies strictly inside the trace (the
    boarding and alighting stops are truncated); travel samples run from the
    departure of one place to the arrival at its network successor, minus any
    queueing in between. ``raw`` maps device ids to unsmoothed traces; when
    given (with speeds), stops are timed on them.
    """
    # (kind, ref) -> [(t_ms, direction, value or None)]; None marks a passage
    # on which the delay did not occur.
    obs: dict[tuple[DelayKind, str], list] = {}
    report = ExtractReport()
    mapping = station_place_map(db, network, config.match_dt_deg)
    db_stations = [s for s in db.stations() if s.id in mapping]
    frame = network.frame

    def note(kind, ref, t, direction, value):
        obs.setdefault((kind, ref), []).append((int(t), direction, value))

    for tr in traces:
        report.traces += 1
        if len(tr) < 2:
            continue
        direction = detect_direction(tr.lat, tr.lon, network)
        if direction is None:
            report.traces_without_direction += 1
            continue
        if raw is not None and tr.device_id in raw and raw[tr.device_id].has_speed:
            ivs = raw_stop_intervals(raw[tr.device_id], tr, config.v_thresh_mps, config.min_dwell_s)
            n_fix = len(raw[tr.device_id])
        else:
            ivs = intervals.get(tr.device_id) if intervals is not None else None
            if ivs is None:
                ivs = detect_stationary(tr, config.v_thresh_mps, config.min_dwell_s)
            n_fix = len(tr)
        buffers = detect_buffering(ivs, db_stations, direction, config.upstream_m,
                                   config.station_margin_m, network)
        buffer_ids = {id(b.interval): mapping[b.station_id] for b in buffers}
        visits: list[_Visit] = []
        buffer_spans: list[tuple[int, int, str]] = []
        for iv in ivs:
            if id(iv) in buffer_ids:
                buffer_spans.append((iv.t_start, iv.t_end, buffer_ids[id(iv)]))
                continue
            hit = None
            for s in db_stations:
                if mbr_contains(s.mbr, iv.centroid.lat, iv.centroid.lon, config.station_margin_m):
                    hit = ("station", mapping[s.id])
                    break
            if hit is None:
                lid, dist, arc = network.snap(iv.centroid.lat, iv.centroid.lon)
                line = network.lines[lid]
                for l in network.lights():
                    if l.id in line.place_arc and abs(line.place_arc[l.id] - arc) <= config.light_radius_m \
                            and dist <= config.light_radius_m:
                        hit = ("light", l.id)
                        break
            if hit is None:
                report.unmatched_stops += 1
                continue
            visits.append(_Visit(hit[1], hit[0], iv.t_start, iv.t_end, True,
                                 iv.start_idx == 0, iv.end_idx == n_fix - 1))
        stopped_lights = {v.place for v in visits if v.kind == "light"}
        for l in network.lights():
            if l.id in stopped_lights:
                continue
            x, y = frame.to_xy(l.lat, l.lon)
            t = _passage_time(tr, frame, float(x), float(y), config.pass_radius_m)
            if t is not None:
                visits.append(_Visit(l.id, "light", t, t, False))
        visits.sort(key=lambda v: v.arrive)
        merged: list[_Visit] = []
        for v in visits:
            if merged and merged[-1].place == v.place:
                m = merged[-1]
                m.depart = max(m.depart, v.depart)
                m.stopped = m.stopped or v.stopped
                m.partial_end = v.partial_end
            else:
                merged.append(v)

        for v in merged:
            if v.kind == "station":
                if not (v.partial_start or v.partial_end):
                    note(DelayKind.STATION, v.place, v.arrive, direction, (v.depart - v.arrive) / 1000.0)
            else:
                stop = v.stopped and v.depart > v.arrive
                note(DelayKind.TRAFFIC, v.place, v.arrive, direction, (v.depart - v.arrive) / 1000.0 if stop else None)
        for p, q in zip(merged, merged[1:]):
            if q.place not in network.successors(p.place, direction):
                continue
            queued = sum(e - s for s, e, st in buffer_spans if st == q.place and p.depart <= s and e <= q.arrive)
            if q.kind == "station":
                waits = [(s, e) for s, e, st in buffer_spans if st == q.place and p.depart <= s and e <= q.arrive and e > s]
                note(DelayKind.BUFFERING, q.place, q.arrive, direction,
                     sum(e - s for s, e in waits) / 1000.0 if waits else None)
            travel = (q.arrive - p.depart - queued) / 1000.0
            if travel <= 0:
                continue
            kind = DelayKind.SEGMENT if p.kind == "station" and q.kind == "station" else DelayKind.LEG
            note(kind, pair_ref(p.place, q.place), p.depart, direction, travel)
    out = {key: collapse_observations(key[0], key[1], recs, config.same_event_ms) for key, recs in obs.items()}
    report.samples = sum(len(s.samples) for s in out.values())
    return out, report


def collapse_observations(kind: DelayKind, ref: str, records, same_event_ms: int) -> DelaySamples:
    """Merge observations of one tram passage made by several riders.

    Records in the same direction whose timestamps fall within
    ``same_event_ms`` of the group's first record are one passage; its value
    is the mean of the riders' measurements.
    """
    out = DelaySamples(kind, ref)
    by_dir: dict = {}
    for t, d, v in records:
        by_dir.setdefault(d, []).append((t, v))
    for d in sorted(by_dir, key=lambda d: (d is None, getattr(d, "value", ""))):
        recs = sorted(by_dir[d], key=lambda r: r[0])
        groups: list[list] = []
        for t, v in recs:
            if groups and t - groups[-1][0][0] <= same_event_ms:
                groups[-1].append((t, v))
            else:
                groups.append([(t, v)])
        for g in groups:
            out.opportunities += 1
            vals = [v for _, v in g if v is not None]
            if vals:
                out.add(float(np.mean(vals)), g[0][0])
    return out


# ------------------------------------------------------------------- KS test
def normal_cdf(z):
    """Standard normal CDF via erfc (accurate in both tails)."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@dataclass
class KsResult:
    d_star: float
    critical: float
    alpha: float
    passed: bool
    method: str = "lilliefors"


def ks_statistic(x, mu: float, sigma: float) -> float:
    """max |ECDF(x) - Phi((x - mu)/sigma)| over the sample's jump points."""
    xs = np.sort(np.asarray(x, dtype=float))
    n = len(xs)
    g = np.array([normal_cdf((v - mu) / sigma) for v in xs])
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - g)
    d_minus = np.max(g - (i - 1) / n)
    return float(max(d_plus, d_minus))


_KOLMOGOROV_C = {0.10: 1.224, 0.05: 1.358, 0.01: 1.628}
_LILLIEFORS_C = {0.10: 0.819, 0.05: 0.895, 0.01: 1.035}


def ks_critical(n: int, alpha: float = 0.05, method: str = "lilliefors") -> float:
    """Critical D at level alpha.

    ``kolmogorov``: asymptotic c/sqrt(n) for a fully specified null.
    ``lilliefors``: Stephens' modification for a normal null whose mean and
    variance were estimated from the same data,
    c / (sqrt(n) - 0.01 + 0.85/sqrt(n)).
    """
    rn = math.sqrt(n)
    if method == "kolmogorov":
        return _KOLMOGOROV_C[alpha] / rn
    if method == "lilliefors":
        return _LILLIEFORS_C[alpha] / (rn - 0.01 + 0.85 / rn)
    raise ValueError(f"unknown KS method {method!r}")


def ks_normal_test(x, mu: float, sigma2: float, alpha: float = 0.05, method: str = "lilliefors") -> KsResult:
    d = ks_statistic(x, mu, math.sqrt(sigma2))
    crit = ks_critical(len(x), alpha, method)
    return KsResult(d, crit, alpha, d <= crit, method)


# ------------------------------------------------------------- distributions
@dataclass
class DelayDistribution:
    kind: DelayKind
    element_ref: str
    mu: float
    sigma2: float
    n: int
    ks: KsResult | None = None
    weight: float | None = None  # effective sample weight after decayed updates
    opportunities: float | None = None
    eligible: bool = True
    degenerate: bool = False
    version: int = 1

    def __post_init__(self):
        if self.weight is None:
            self.weight = float(self.n)
        if self.opportunities is None:
            self.opportunities = float(self.n)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def rate(self) -> float:
        """Share of passages on which this delay occurs (1 for dwell/travel)."""
        if not self.opportunities:
            return 1.0
        return min(1.0, self.weight / self.opportunities)

    def term_moments(self) -> tuple[float, float]:
        """Mean and variance of the per-passage contribution."""
        r = self.rate
        if r >= 1.0:
            return self.mu, self.sigma2
        mean = r * self.mu
        return mean, r * (self.sigma2 + self.mu ** 2) - mean ** 2

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "element_ref": self.element_ref, "mu_s": self.mu,
            "sigma2_s2": self.sigma2, "n": self.n,
            "ks": None if self.ks is None else {"d_star": self.ks.d_star, "alpha": self.ks.alpha,
                                                 "pass": self.ks.passed, "critical": self.ks.critical,
                                                 "method": self.ks.method},
            "weight": self.weight, "opportunities": self.opportunities, "rate": self.rate,
            "eligible": self.eligible, "degenerate": self.degenerate, "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DelayDistribution":
        ks = d.get("ks")
        return cls(
            DelayKind(d["kind"]), str(d["element_ref"]), float(d["mu_s"]), float(d["sigma2_s2"]), int(d["n"]),
            None if ks is None else KsResult(float(ks["d_star"]), float(ks.get("critical", float("nan"))),
                                             float(ks["alpha"]), bool(ks["pass"]), ks.get("method", "lilliefors")),
            d.get("weight"), d.get("opportunities"), bool(d.get("eligible", True)),
            bool(d.get("degenerate", False)), int(d.get("version", 1)),
        )


def _moments(x: np.ndarray) -> tuple[float, float]:
    mu = float(x.mean())
    sigma2 = float(((x - mu) ** 2).sum() / (len(x) - 1)) if len(x) > 1 else 0.0
    return mu, sigma2


def fit_delay(samples: DelaySamples, alpha: float = 0.05, n_min: int = DEFAULT_N_MIN,
              ks_method: str = "lilliefors") -> DelayDistribution:
    """Sample mean, unbiased variance, and a KS normality check.

    Fewer than ``n_min`` samples gives an ineligible record with no KS run;
    zero variance gives a degenerate record with no KS run.
    """
    x = np.asarray(samples.samples, dtype=float)
    n = len(x)
    opp = max(samples.opportunities, n)
    if n == 0:
        return DelayDistribution(samples.kind, samples.element_ref, 0.0, 0.0, 0, None, 0.0, float(opp), False)
    mu, sigma2 = _moments(x)
    dist = DelayDistribution(samples.kind, samples.element_ref, mu, sigma2, n, None, float(n), float(opp))
    if n < n_min:
        dist.eligible = False
        return dist
    if sigma2 == 0.0:
        dist.degenerate = True
        return dist
    dist.ks = ks_normal_test(x, mu, sigma2, alpha, ks_method)
    return dist


def update_history(dist: DelayDistribution, new: DelaySamples | list[float], lam: float = 1.0,
                   alpha: float = 0.05, n_min: int = DEFAULT_N_MIN) -> DelayDistribution:
    """Fold a new batch into a fitted distribution.

    Old data keeps weight ``lam`` times its previous effective weight, new
    samples weight 1 each. With ``lam == 1`` mean and variance equal a refit on
    the concatenated samples. The variance uses frequency-weight pooling,
    M2 / (W - 1).
    """
    if not 0 < lam <= 1:
        raise ValueError("lambda must be in (0, 1]")
    if isinstance(new, DelaySamples):
        x = np.asarray(new.samples, dtype=float)
        new_opp = max(new.opportunities, len(x))
    else:
        x = np.asarray(new, dtype=float)
        new_opp = len(x)
    if len(x) == 0 and new_opp == 0:
        return dist
    w_old = lam * dist.weight
    o_old = lam * dist.opportunities
    m = len(x)
    if m == 0:
        return replace(dist, weight=w_old, opportunities=o_old + new_opp, version=dist.version + 1)
    mu_b, s2_b = _moments(x)
    w = w_old + m
    mu = (w_old * dist.mu + m * mu_b) / w
    m2_old = dist.sigma2 * (dist.weight - 1) * lam if dist.weight > 1 else 0.0
    m2 = m2_old + s2_b * (m - 1) + (mu_b - dist.mu) ** 2 * w_old * m / w
    sigma2 = m2 / (w - 1) if w > 1 else 0.0
    n = dist.n + m
    out = replace(dist, mu=mu, sigma2=sigma2, n=n, weight=w, opportunities=o_old + new_opp,
                  eligible=n >= n_min, degenerate=sigma2 == 0.0, version=dist.version + 1)
    if m >= n_min and sigma2 > 0:
        out.ks = ks_normal_test(x, mu, sigma2, alpha, dist.ks.method if dist.ks else "lilliefors")
    return out


def distribution_grid(dist: DelayDistribution, points: int = 201, width_sigmas: float = 4.0):
    """Evenly spaced (x, pdf, cdf) rows of the fitted normal, clipped at 0 s."""
    sigma = dist.sigma
    if sigma == 0:
        return [(dist.mu, float("inf"), 1.0)]
    xs = np.linspace(max(0.0, dist.mu - width_sigmas * sigma), dist.mu + width_sigmas * sigma, points)
    z = (xs - dist.mu) / sigma
    pdf = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi))
    return [(float(x), float(p), normal_cdf(float(zz))) for x, p, zz in zip(xs, pdf, z)]


class DistributionStore:
    """Versioned (kind, element_ref) -> DelayDistribution map persisted as JSON.

    Writers go through ``commit``, which swaps in a complete new mapping under
    a lock; readers take ``snapshot()`` and never see a partial batch.
    """

    def __init__(self, dists=()):
        self._data = {(d.kind, d.element_ref): d for d in dists}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, kind: DelayKind, ref: str) -> DelayDistribution | None:
        return self._data.get((kind, ref))

    def snapshot(self) -> dict:
        return dict(self._data)

    def values(self):
        return [self._data[k] for k in sorted(self._data, key=lambda k: (k[0].value, k[1]))]

    def commit(self, dists) -> None:
        with self._lock:
            new = dict(self._data)
            for d in dists:
                new[(d.kind, d.element_ref)] = d
            self._data = new

    def ingest(self, samples: dict, lam: float = 1.0, alpha: float = 0.05, n_min: int = DEFAULT_N_MIN,
               ks_method: str = "lilliefors") -> None:
        """Fit new elements, update known ones, commit in one step."""
        snap = self.snapshot()
        batch = []
        for key, s in sorted(samples.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            old = snap.get(key)
            batch.append(fit_delay(s, alpha, n_min, ks_method) if old is None or old.n == 0
                         else update_history(old, s, lam, alpha, n_min))
        self.commit(batch)

    def to_json(self) -> str:
        return json.dumps([d.to_dict() for d in self.values()], indent=1)

    def save(self, path) -> None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".dists-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DistributionStore":
        return cls(DelayDistribution.from_dict(d) for d in json.loads(Path(path).read_text()))

    @classmethod
    def bootstrap(cls, path) -> "DistributionStore":
        """Load history if the file exists, else start empty."""
        return cls.load(path) if Path(path).exists() else cls()


# --------------------------------------------------------------- trip time
class UnresolvedElementError(LookupError):
    def __init__(self, elements):
        self.elements = list(elements)
        super().__init__("no eligible distribution for: " + ", ".join(f"{k.value}:{r}" for k, r in self.elements))


@dataclass(frozen=True)
class PlanTerm:
    kind: DelayKind
    ref: str
    c: float = 1.0


@dataclass
class TripPlan:
    terms: list[PlanTerm]
    n_stations: int = 0
    n_lights: int = 0
    line: str | None = None
    direction: Direction | None = None


@dataclass
class TripEstimate:
    expected_s: float
    sigma_s: float
    lo: float
    hi: float
    z: float = Z_95

    @property
    def interval(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"expected_s": self.expected_s, "sigma_s": self.sigma_s, "interval": [self.lo, self.hi], "z": self.z}


def _lookup(dists, kind, ref):
    if isinstance(dists, DistributionStore):
        return dists.get(kind, ref)
    return dists.get((kind, ref))


def trip_time(plan: TripPlan, distributions, z: float = Z_95) -> TripEstimate:
    """Expected trip time sum(c*mu), sigma = sqrt(sum(c^2*sigma2)), interval +- z*sigma."""
    missing = []
    mean = 0.0
    var = 0.0
    for term in plan.terms:
        d = _lookup(distributions, term.kind, term.ref)
        if d is None or not d.eligible:
            missing.append((term.kind, term.ref))
            continue
        m, v = d.term_moments()
        mean += term.c * m
        var += term.c ** 2 * v
    if missing:
        raise UnresolvedElementError(missing)
    sigma = math.sqrt(var)
    return TripEstimate(mean, sigma, mean - z * sigma, mean + z * sigma, z)


def build_plan(network: TransitNetwork, source: str, dest: str, direction: Direction,
               line_id: str | None = None, distributions=None, first_travel_c: float | None = None,
               skip_source_dwell: bool = False) -> TripPlan:
    """Elements from ``source`` to ``dest`` (dwell at ``dest`` excluded).

    Queueing terms before a station are included only when ``distributions``
    holds an eligible record for them. ``first_travel_c`` prorates the first travel
    element, for a tram already partway along it.
    """
    lid, seq = network.path(source, dest, direction, line_id)
    terms: list[PlanTerm] = []
    n_st = n_li = 0
    for i, pid in enumerate(seq[:-1]):
        place = network.places[pid]
        if i > 0 or not skip_source_dwell:
            if place.kind == "station":
                terms.append(PlanTerm(DelayKind.STATION, pid))
                n_st += 1
            else:
                terms.append(PlanTerm(DelayKind.TRAFFIC, pid))
                n_li += 1
        nxt = seq[i + 1]
        kind = (DelayKind.SEGMENT if place.kind == "station" and network.places[nxt].kind == "station"
                else DelayKind.LEG)
        c = first_travel_c if (i == 0 and first_travel_c is not None) else 1.0
        terms.append(PlanTerm(kind, pair_ref(pid, nxt), c))
        if network.places[nxt].kind == "station" and distributions is not None:
            bf = _lookup(distributions, DelayKind.BUFFERING, nxt)
            if bf is not None and bf.eligible:
                terms.append(PlanTerm(DelayKind.BUFFERING, nxt))
    return TripPlan(terms, n_st, n_li, lid, direction)


# ---------------------------------------------------------------------- ETA
class EtaError(ValueError):
    pass


def _platform_half(network: TransitNetwork, pid: str, db: StationsDb | None, mapping) -> float:
    if db is not None:
        for sid, nid in mapping.items():
            if nid == pid and db[sid].platform_length_m:
                return db[sid].platform_length_m / 2
    pl = network.places[pid].platform_length_m
    return (pl or 0.0) / 2


def vehicle_view_plan(position: GeoCoord, destination: str, network: TransitNetwork,
                      direction: Direction | None = None, distributions=None,
                      stations_db: StationsDb | None = None, snap_m: float = 50.0,
                      margin_m: float = 10.0) -> TripPlan:
    lines = [lid for lid, l in network.lines.items() if destination in l.place_arc]
    if not lines:
        raise EtaError(f"unknown destination {destination}")
    lid, dist, arc = network.snap(position.lat, position.lon, lines)
    if dist > snap_m:
        raise EtaError(f"position is {dist:.0f} m from the network (limit {snap_m:.0f} m)")
    line = network.lines[lid]
    if direction is None:
        direction = Direction.WEST_TO_EAST if line.place_arc[destination] >= arc else Direction.EAST_TO_WEST
    sign = direction.sign
    mapping = station_place_map(stations_db, network, 0.0003) if stations_db is not None else {}
    seq = network.ordered_places(lid, direction)
    for pid in seq:
        if network.places[pid].kind == "station":
            if abs(line.place_arc[pid] - arc) <= _platform_half(network, pid, stations_db, mapping) + margin_m:
                try:
                    return build_plan(network, pid, destination, direction, lid, distributions)
                except NetworkError as exc:
                    raise EtaError(str(exc)) from exc
    if (line.place_arc[destination] - arc) * sign <= 0:
        raise EtaError(f"{destination} is behind the position travelling {direction.value}")
    ahead = [p for p in seq if (line.place_arc[p] - arc) * sign > 0]
    behind = [p for p in seq if (line.place_arc[p] - arc) * sign <= 0]
    if not ahead or not behind:
        raise EtaError("position is outside the served part of the line")
    prev, nxt = behind[-1], ahead[0]
    span = abs(line.place_arc[nxt] - line.place_arc[prev])
    c = abs(line.place_arc[nxt] - arc) / span
    try:
        plan = build_plan(network, prev, destination, direction, lid, distributions,
                          first_travel_c=c, skip_source_dwell=True)
    except NetworkError as exc:
        raise EtaError(str(exc)) from exc
    return plan


def eta_vehicle_view(position: GeoCoord, destination: str, network: TransitNetwork, distributions,
                     direction: Direction | None = None, stations_db: StationsDb | None = None,
                     current_time_ms: int | None = None, snap_m: float = 50.0, z: float = Z_95) -> TripEstimate:
    """Remaining travel time for a rider at ``position`` heading to ``destination``.

    A position on a station platform starts the plan with that station's
    dwell; a position between places starts with the remaining fraction of the
    current travel element. ``current_time_ms`` is accepted for callers that
    want absolute arrival times and does not change the estimate.
    """
    plan = vehicle_view_plan(position, destination, network, direction, distributions, stations_db, snap_m)
    return trip_time(plan, distributions, z)


@dataclass
class StationEta:
    tram_ref: str | None
    estimate: TripEstimate | None
    reason: str = ""


def eta_station_view(station: str, live_positions, network: TransitNetwork, distributions,
                     stations_db: StationsDb | None = None, z: float = Z_95) -> StationEta:
    """Soonest arriving tram for a rider waiting at ``station``.

    ``live_positions`` holds (tram_ref, GeoCoord, Direction) tuples.
    """
    best: StationEta | None = None
    for ref, pos, direction in live_positions:
        try:
            est = eta_vehicle_view(pos, station, network, distributions, direction, stations_db, z=z)
        except (EtaError, UnresolvedElementError):
            continue
        if best is None or est.expected_s < best.estimate.expected_s:
            best = StationEta(ref, est)
    return best or StationEta(None, None, "no tram upstream in a serving direction")
