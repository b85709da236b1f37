"""Synthetic tram network and rider-trace generator with full ground truth.

Trams run along lines, drawing every dwell, signal wait, queueing wait and
travel time from truncated normals. Riders board a run at one station and
alight at a later one, logging 1 Hz fixes with configurable GPS noise. While a
tram stands at a station each rider sits at a fixed fraction of the platform
length, so the union of riders spans the platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import Direction, NetworkError, Place, TransitNetwork
from .trace import Trace, write_traces

BASE_MS = 1709272800000  # 2024-03-01T06:00:00Z
ORIGIN = (31.20, 29.90)


class SimConfigError(ValueError):
    pass


@dataclass
class NoiseProfile:
    jitter_sigma_m: float = 3.0
    glitch_prob: float = 0.008
    glitch_jump_m: float = 1000.0
    multipath_burst_prob: float = 0.001
    multipath_offset_m: float = 100.0
    duplicate_prob: float = 0.003
    speed_sigma_mps: float = 0.15

    @classmethod
    def none(cls) -> "NoiseProfile":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SimConfig:
    network: dict
    station_delay: dict  # station -> [mu, sigma]
    light_delay: dict  # light -> [mu, sigma, p_stop]
    buffering: dict  # station -> [mu, sigma, p]
    travel: dict  # "A->B" -> [mu, sigma]
    riders: int = 300
    runs: int = 60
    headway_s: float = 90.0
    sample_hz: float = 1.0
    buffer_gap_m: float = 30.0
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    seed: int = 0
    start_ms: int = BASE_MS
    emit_speed: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SimConfigError(f"unknown sim config keys: {sorted(unknown)}")
        if "network" not in d:
            base = default_config()
            for k in ("network", "station_delay", "light_delay", "buffering", "travel"):
                d.setdefault(k, getattr(base, k))
        noise = d.pop("noise", {})
        if isinstance(noise, dict):
            bad = set(noise) - set(NoiseProfile.__dataclass_fields__)
            if bad:
                raise SimConfigError(f"unknown noise keys: {sorted(bad)}")
            noise = NoiseProfile(**noise)
        return cls(noise=noise, **d)


def pair_key(a: str, b: str) -> str:
    return f"{a}->{b}"


# --------------------------------------------------------------- default world
_TRUNK = [
    ("E", 500, [("S1", 250)]), ("N", 250, []), ("E", 500, [("S2", 250)]), ("N", 300, [("L1", 150)]),
    ("E", 500, [("S3", 250)]), ("N", 250, []), ("E", 500, [("S4", 250)]), ("N", 300, [("L2", 150)]),
    ("E", 500, [("S5", 250)]), ("N", 250, []), ("E", 500, [("S6", 250)]),
]
_BRANCH_1 = [
    ("N", 300, [("L3", 150)]), ("E", 500, [("S7", 250)]), ("N", 250, []),
    ("E", 500, [("S8", 250)]), ("N", 250, []), ("E", 500, [("S9", 250)]),
]
_BRANCH_2 = [
    ("S", 300, [("L4", 150)]), ("E", 500, [("S10", 250)]), ("S", 250, []),
    ("E", 500, [("S11", 250)]), ("S", 300, [("L5", 150)]), ("E", 500, [("S12", 250)]),
]
_PLATFORMS = {"S1": 60, "S2": 75, "S3": 85, "S4": 70, "S5": 90, "S6": 65,
              "S7": 55, "S8": 80, "S9": 60, "S10": 75, "S11": 65, "S12": 80}
_STEP = {"E": (1, 0), "N": (0, 1), "S": (0, -1)}


def _walk(legs, start_xy):
    verts = [start_xy]
    places = []
    x, y = start_xy
    for heading, length, marks in legs:
        dx, dy = _STEP[heading]
        for pid, at in marks:
            places.append((pid, x + dx * at, y + dy * at))
        x, y = x + dx * length, y + dy * length
        verts.append((x, y))
    return verts, places


def default_network_dict() -> dict:
    """12 stations, 5 lights, two lines sharing a trunk with one split."""
    from .geo import LocalFrame

    frame = LocalFrame(*ORIGIN)
    trunk_v, trunk_p = _walk(_TRUNK, (0.0, 0.0))
    b1_v, b1_p = _walk(_BRANCH_1, trunk_v[-1])
    b2_v, b2_p = _walk(_BRANCH_2, trunk_v[-1])

    def ll(x, y):
        lat, lon = frame.to_latlon(x, y)
        return [round(float(lat), 9), round(float(lon), 9)]

    places = []
    for pid, x, y in trunk_p + b1_p + b2_p:
        lat, lon = ll(x, y)
        p = {"id": pid, "kind": "station" if pid.startswith("S") else "light", "lat": lat, "lon": lon}
        if pid in _PLATFORMS:
            p["platform_length_m"] = float(_PLATFORMS[pid])
        places.append(p)
    sx, sy = trunk_v[-1]
    half = 350.0
    mbr = [ll(sx - half, sy - half), ll(sx - half, sy + half), ll(sx + half, sy + half), ll(sx + half, sy - half)]
    return {
        "places": places,
        "lines": [
            {"id": "1", "places": [p[0] for p in trunk_p + b1_p],
             "polyline": [ll(*v) for v in trunk_v + b1_v[1:]]},
            {"id": "2", "places": [p[0] for p in trunk_p + b2_p],
             "polyline": [ll(*v) for v in trunk_v + b2_v[1:]]},
        ],
        "split_areas": [{"mbr": mbr, "lines": ["1", "2"]}],
    }


def default_config(**overrides) -> SimConfig:
    net_d = default_network_dict()
    net = TransitNetwork.from_dict(net_d)
    station_delay, light_delay, buffering, travel = {}, {}, {}, {}
    for i, p in enumerate(sorted(net.stations(), key=lambda p: int(p.id[1:]))):
        station_delay[p.id] = [28.0 + (7 * i) % 30, 5.0 + 1.5 * (i % 5)]
    for k, p in enumerate(sorted(net.lights(), key=lambda p: p.id)):
        light_delay[p.id] = [22.0 + 4 * (k % 3), 6.0 + (k % 2), 0.2 + 0.05 * (k % 3)]
    buffering["S3"] = [30.0, 8.0, 0.2]
    buffering["S5"] = [35.0, 9.0, 0.2]
    for j, line in enumerate(net.lines.values()):
        for a, b in zip(line.places, line.places[1:]):
            dist = abs(line.place_arc[b] - line.place_arc[a])
            speed = 8.0 + (len(travel) // 2) % 3
            mu = round(dist / speed, 1)
            for key in (pair_key(a, b), pair_key(b, a)):
                travel[key] = [mu, round(0.12 * mu, 2)]
    cfg = SimConfig(net_d, station_delay, light_delay, buffering, travel)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ------------------------------------------------------------------ validation
def validate_config(cfg: SimConfig) -> TransitNetwork:
    problems = []
    try:
        net = TransitNetwork.from_dict(cfg.network)
    except (NetworkError, KeyError, TypeError) as exc:
        raise SimConfigError(f"invalid network: {exc}") from exc
    for p in net.stations():
        if p.id not in cfg.station_delay:
            problems.append(f"station {p.id} has no delay generator")
        if not p.platform_length_m or p.platform_length_m <= 0:
            problems.append(f"station {p.id} has no platform length")
    for p in net.lights():
        if p.id not in cfg.light_delay:
            problems.append(f"light {p.id} has no delay generator")
    for line in net.lines.values():
        for d in Direction:
            seq = net.ordered_places(line.id, d)
            for a, b in zip(seq, seq[1:]):
                if pair_key(a, b) not in cfg.travel:
                    problems.append(f"travel time {a}->{b} missing")
    for name, table in (("station_delay", cfg.station_delay), ("light_delay", cfg.light_delay),
                        ("buffering", cfg.buffering), ("travel", cfg.travel)):
        for key, v in table.items():
            if v[1] < 0 or v[0] <= 0:
                problems.append(f"{name}[{key}]: need mu > 0 and sigma >= 0")
            if len(v) > 2 and not 0 <= v[2] <= 1:
                problems.append(f"{name}[{key}]: probability outside [0, 1]")
    for key in cfg.buffering:
        if key not in net.places or net.places[key].kind != "station":
            problems.append(f"buffering references unknown station {key}")
    n = cfg.noise
    for pname in ("glitch_prob", "multipath_burst_prob", "duplicate_prob"):
        if not 0 <= getattr(n, pname) <= 1:
            problems.append(f"noise.{pname} outside [0, 1]")
    for sname in ("jitter_sigma_m", "glitch_jump_m", "multipath_offset_m", "speed_sigma_mps"):
        if getattr(n, sname) < 0:
            problems.append(f"noise.{sname} negative")
    if cfg.sample_hz <= 0 or cfg.riders < 0 or cfg.runs < 1:
        problems.append("sample_hz > 0, riders >= 0, runs >= 1 required")
    if problems:
        raise SimConfigError("inconsistent simulation config:\n  " + "\n  ".join(problems))
    return net


def draw_positive(rng: np.random.Generator, mu: float, sigma: float) -> float:
    """Normal(mu, sigma) truncated at 0 by resampling."""
    if sigma == 0:
        return mu
    while True:
        x = rng.normal(mu, sigma)
        if x > 0:
            return float(x)


# ----------------------------------------------------------------- tram runs
@dataclass
class PlaceEvent:
    place: str
    kind: str
    arrive: float  # seconds from run epoch
    depart: float
    buffer: tuple[float, float] | None = None
    stopped: bool = True


@dataclass
class TramRun:
    run_id: int
    line: str
    direction: Direction
    events: list[PlaceEvent]
    knot_t: np.ndarray
    knot_arc: np.ndarray
    len_t: np.ndarray
    len_v: np.ndarray

    def event(self, place: str) -> PlaceEvent:
        for e in self.events:
            if e.place == place:
                return e
        raise KeyError(place)


def simulate_run(cfg: SimConfig, net: TransitNetwork, rng, run_id: int, line_id: str,
                 direction: Direction, t0: float) -> TramRun:
    line = net.lines[line_id]
    seq = net.ordered_places(line_id, direction)
    sign = direction.sign
    kt, ka, lt, lv = [], [], [], []
    events = []
    t = t0
    for idx, pid in enumerate(seq):
        place = net.places[pid]
        arc = line.place_arc[pid]
        buffer = None
        if idx > 0:
            prev = seq[idx - 1]
            dur = draw_positive(rng, *cfg.travel[pair_key(prev, pid)][:2])
            bf = cfg.buffering.get(pid)
            if bf is not None and rng.random() < bf[2]:
                wait = draw_positive(rng, bf[0], bf[1])
                spot = arc - sign * (place.platform_length_m + cfg.buffer_gap_m)
                prev_arc = line.place_arc[prev]
                frac = min(1.0, max(0.0, abs(spot - prev_arc) / abs(arc - prev_arc)))
                t1 = t + frac * dur
                kt += [t1, t1 + wait]
                ka += [spot, spot]
                buffer = (t1, t1 + wait)
                t = t + dur + wait
            else:
                t = t + dur
        arrive = t
        stopped = True
        if place.kind == "station":
            dwell = draw_positive(rng, *cfg.station_delay[pid][:2])
            lt += [arrive, arrive + dwell]
            lv += [place.platform_length_m] * 2
        else:
            mu, sd, p = cfg.light_delay[pid]
            stopped = rng.random() < p
            dwell = draw_positive(rng, mu, sd) if stopped else 0.0
        depart = arrive + dwell
        kt += [arrive, depart]
        ka += [arc, arc]
        events.append(PlaceEvent(pid, place.kind, arrive, depart, buffer, stopped))
        t = depart
    # Rider offsets scale with the platform length; hold them fixed through
    # every non-station stop so riders only move while the tram moves.
    lt, lv = np.array(lt), np.array(lv)
    holds = [(e.arrive, e.depart) for e in events if e.kind == "light" and e.stopped]
    holds += [e.buffer for e in events if e.buffer is not None]
    if holds:
        ht = np.array([t for h in holds for t in h])
        hv = np.interp(np.array([h[0] for h in holds for _ in h]), lt, lv)
        order = np.argsort(np.concatenate([lt, ht]), kind="stable")
        lt, lv = np.concatenate([lt, ht])[order], np.concatenate([lv, hv])[order]
    return TramRun(run_id, line_id, direction, events, np.array(kt), np.array(ka), lt, lv)


def plan_runs(cfg: SimConfig, net: TransitNetwork, rng, n_runs: int | None = None) -> list[TramRun]:
    runs = []
    line_ids = sorted(net.lines)
    for i in range(cfg.runs if n_runs is None else n_runs):
        line_id = line_ids[i % len(line_ids)]
        direction = list(Direction)[(i // len(line_ids)) % 2]
        runs.append(simulate_run(cfg, net, rng, i, line_id, direction, i * cfg.headway_s))
    return runs


# -------------------------------------------------------------------- riders
@dataclass
class RiderTrip:
    device_id: str
    run_id: int
    line: str
    direction: str
    source: str
    dest: str
    offset_frac: float
    board_ms: int
    alight_ms: int
    arrive_source_ms: int
    arrive_dest_ms: int


def _rider_trace(cfg, net, rng, run: TramRun, device_id: str, counters: dict):
    stations = [e for e in run.events if e.kind == "station"]
    i, j = sorted(rng.choice(len(stations), size=2, replace=False).tolist())
    src, dst = stations[i], stations[j]
    u = rng.uniform(-0.5, 0.5)
    board = src.arrive + rng.uniform(0.1, 0.6) * (src.depart - src.arrive)
    alight = dst.arrive + rng.uniform(0.2, 0.8) * (dst.depart - dst.arrive)
    step = 1.0 / cfg.sample_hz
    ts = board + step * np.arange(int(math.floor((alight - board) / step)) + 1)
    line = net.lines[run.line]
    tram_arc = np.interp(ts, run.knot_t, run.knot_arc)
    arc = tram_arc + u * np.interp(ts, run.len_t, run.len_v)
    lat, lon = line.polyline.point_at(arc)
    x, y = net.frame.to_xy(lat, lon)
    # Piecewise-constant tram speed from the knot schedule.
    k = np.clip(np.searchsorted(run.knot_t, ts, side="right") - 1, 0, len(run.knot_t) - 2)
    dt = np.diff(run.knot_t)[k]
    speed = np.where(dt > 0, np.abs(np.diff(run.knot_arc)[k]) / np.where(dt > 0, dt, 1), 0.0)

    n = len(ts)
    noise = cfg.noise
    if noise.jitter_sigma_m > 0:
        x = x + rng.normal(0, noise.jitter_sigma_m, n)
        y = y + rng.normal(0, noise.jitter_sigma_m, n)
    glitch = rng.random(n) < noise.glitch_prob
    ng = int(glitch.sum())
    if ng:
        mag = noise.glitch_jump_m * rng.uniform(1.0, 2.0, ng)
        ang = rng.uniform(0, 2 * np.pi, ng)
        x[glitch] += mag * np.cos(ang)
        y[glitch] += mag * np.sin(ang)
    counters["glitches"] += ng
    starts = np.flatnonzero(rng.random(n) < noise.multipath_burst_prob)
    for s in starts.tolist():
        length = int(rng.integers(5, 16))
        mag = noise.multipath_offset_m * rng.uniform(0.7, 1.3)
        ang = rng.uniform(0, 2 * np.pi)
        x[s:s + length] += mag * np.cos(ang)
        y[s:s + length] += mag * np.sin(ang)
    counters["multipath_bursts"] += len(starts)
    if cfg.emit_speed and noise.speed_sigma_mps > 0:
        speed = np.maximum(0.0, speed + rng.normal(0, noise.speed_sigma_mps, n))
    lat, lon = net.frame.to_latlon(x, y)
    t_ms = cfg.start_ms + np.round(ts * 1000).astype(np.int64)
    event = np.full(n, None, dtype=object)
    event[0] = "board"
    event[-1] = "alight"
    dup = rng.random(n) < noise.duplicate_prob
    counters["duplicates"] += int(dup.sum())
    rep = np.where(dup, 2, 1)
    idx = np.repeat(np.arange(n), rep)
    ev = event[idx].copy()
    # A duplicate repeats the fix but not the annotation.
    first = np.concatenate([[True], idx[1:] != idx[:-1]])
    ev[~first] = None
    tr = Trace(device_id, t_ms[idx], lat[idx], lon[idx],
               speed[idx] if cfg.emit_speed else None, ev)
    counters["points"] += len(tr)
    trip = RiderTrip(device_id, run.run_id, run.line, run.direction.value, src.place, dst.place,
                     float(u), int(t_ms[0]), int(t_ms[-1]),
                     int(cfg.start_ms + round(src.arrive * 1000)), int(cfg.start_ms + round(dst.arrive * 1000)))
    return tr, trip


# --------------------------------------------------------------- ground truth
@dataclass
class GroundTruth:
    places: list[dict]
    generators: dict
    runs: list[dict]
    riders: list[dict]
    counters: dict

    def stations(self) -> list[dict]:
        return [p for p in self.places if p["kind"] == "station"]

    def lights(self) -> list[dict]:
        return [p for p in self.places if p["kind"] == "light"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**d)


@dataclass
class SimResult:
    traces: list[Trace]
    truth: GroundTruth
    network: TransitNetwork
    runs: list[TramRun]

    def write(self, outdir) -> dict:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"traces": out / "traces.csv", "truth": out / "truth.json", "network": out / "network.json"}
        write_traces(self.traces, paths["traces"])
        paths["truth"].write_text(json.dumps(self.truth.to_dict(), indent=1, sort_keys=True))
        self.network.save(paths["network"])
        return {k: str(v) for k, v in paths.items()}


def _platform_mbr(net: TransitNetwork, p: Place) -> list[list[float]]:
    for line in net.lines.values():
        if p.id in line.place_arc:
            arc = line.place_arc[p.id]
            lat, lon = line.polyline.point_at([arc - p.platform_length_m / 2, arc + p.platform_length_m / 2])
            lo_lat, hi_lat = float(min(lat)), float(max(lat))
            lo_lon, hi_lon = float(min(lon)), float(max(lon))
            return [[lo_lat, lo_lon], [lo_lat, hi_lon], [hi_lat, hi_lon], [hi_lat, lo_lon]]
    raise KeyError(p.id)


def run_to_dict(run: TramRun, start_ms: int) -> dict:
    ms = lambda s: int(start_ms + round(s * 1000))  # noqa: E731
    return {
        "run_id": run.run_id, "line": run.line, "direction": run.direction.value,
        "events": [
            {"place": e.place, "kind": e.kind, "arrive_ms": ms(e.arrive), "depart_ms": ms(e.depart),
             "stopped": e.stopped, "buffer_ms": None if e.buffer is None else [ms(e.buffer[0]), ms(e.buffer[1])]}
            for e in run.events
        ],
    }


def simulate(cfg: SimConfig) -> SimResult:
    """Generate rider traces and ground truth. Deterministic given ``cfg.seed``."""
    net = validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    runs = plan_runs(cfg, net, rng)
    counters = {"points": 0, "glitches": 0, "multipath_bursts": 0, "duplicates": 0}
    traces, trips = [], []
    width = max(4, len(str(cfg.riders)))
    for r in range(cfg.riders):
        run = runs[int(rng.integers(len(runs)))]
        tr, trip = _rider_trace(cfg, net, rng, run, f"rider-{r:0{width}d}", counters)
        traces.append(tr)
        trips.append(asdict(trip))
    places = []
    for p in net.places.values():
        d = {"id": p.id, "kind": p.kind, "lat": p.lat, "lon": p.lon}
        if p.kind == "station":
            d["platform_length_m"] = p.platform_length_m
            d["mbr"] = _platform_mbr(net, p)
        places.append(d)
    generators = {
        "station_delay": cfg.station_delay, "light_delay": cfg.light_delay,
        "buffering": cfg.buffering, "travel": cfg.travel,
    }
    truth = GroundTruth(places, generators, [run_to_dict(r, cfg.start_ms) for r in runs], trips, counters)
    return SimResult(traces, truth, net, runs)
