"""Transit network topology, direction detection and line identification.

Network JSON::

    {
      "places": [{"id": "S1", "kind": "station", "lat": .., "lon": ..,
                  "platform_length_m": 70.0}, {"id": "L1", "kind": "light", ...}],
      "lines": [{"id": "1", "places": ["S1", "L1", ...],
                 "polyline": [[lat, lon], ...]}],
      "split_areas": [{"mbr": [[lat, lon] x 4], "lines": ["1", "2"]}]
    }

Polylines run west to east; "forward" along a polyline is WestToEast.
Lines sharing a trunk share the leading vertices of their polylines.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import LocalFrame


class Direction(enum.Enum):
    WEST_TO_EAST = "WestToEast"
    EAST_TO_WEST = "EastToWest"

    @property
    def sign(self) -> int:
        return 1 if self is Direction.WEST_TO_EAST else -1

    def opposite(self) -> "Direction":
        return Direction.EAST_TO_WEST if self is Direction.WEST_TO_EAST else Direction.WEST_TO_EAST


AMBIGUOUS = None  # identify_line's "no decision" value


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Place:
    id: str
    kind: str  # "station" | "light"
    lat: float
    lon: float
    platform_length_m: float | None = None


@dataclass
class SplitArea:
    mbr: list[tuple[float, float]]
    lines: list[str]

    def contains(self, lat, lon):
        lats = [c[0] for c in self.mbr]
        lons = [c[1] for c in self.mbr]
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        return (lat >= min(lats)) & (lat <= max(lats)) & (lon >= min(lons)) & (lon <= max(lons))


class Polyline:
    """Polyline in a local metric frame with arc-length parametrisation."""

    def __init__(self, latlon, frame: LocalFrame):
        pts = np.asarray(latlon, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise NetworkError("polyline needs at least 2 vertices")
        self.latlon = pts
        self.frame = frame
        x, y = frame.to_xy(pts[:, 0], pts[:, 1])
        self.xy = np.column_stack([x, y])
        seg = np.diff(self.xy, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.arc = np.concatenate([[0.0], np.cumsum(self.seg_len)])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def project_xy(self, px, py):
        """Nearest point on the polyline for each query point.

        Returns (distance_m, arc_m) arrays.
        """
        px = np.atleast_1d(np.asarray(px, dtype=float))
        py = np.atleast_1d(np.asarray(py, dtype=float))
        a = self.xy[:-1]
        d = np.diff(self.xy, axis=0)
        L2 = np.maximum(self.seg_len ** 2, 1e-12)
        rx = px[:, None] - a[None, :, 0]
        ry = py[:, None] - a[None, :, 1]
        u = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / L2[None, :], 0.0, 1.0)
        cx = a[None, :, 0] + u * d[None, :, 0]
        cy = a[None, :, 1] + u * d[None, :, 1]
        dist = np.hypot(px[:, None] - cx, py[:, None] - cy)
        k = np.argmin(dist, axis=1)
        rows = np.arange(len(px))
        arc = self.arc[k] + u[rows, k] * self.seg_len[k]
        return dist[rows, k], arc

    def project(self, lat, lon):
        x, y = self.frame.to_xy(lat, lon)
        return self.project_xy(x, y)

    def point_at(self, arc):
        """(lat, lon) at the given arc length(s), clamped to the ends."""
        arc = np.clip(np.asarray(arc, dtype=float), 0.0, self.length)
        x = np.interp(arc, self.arc, self.xy[:, 0])
        y = np.interp(arc, self.arc, self.xy[:, 1])
        return self.frame.to_latlon(x, y)

    def tangent_at(self, arc):
        k = np.clip(np.searchsorted(self.arc, arc, side="right") - 1, 0, len(self.seg_len) - 1)
        d = self.xy[k + 1] - self.xy[k]
        return d / np.maximum(np.hypot(d[..., 0], d[..., 1]), 1e-12)[..., None]


def point_to_polyline_distance(p, polyline, frame: LocalFrame | None = None) -> float:
    """Meters from a point to a polyline given as [(lat, lon), ...].

    Segments are measured in an equirectangular frame centred on the point.
    """
    lat, lon = (p.lat, p.lon) if hasattr(p, "lat") else p
    if frame is None:
        frame = LocalFrame(lat, lon)
    pl = Polyline(polyline, frame)
    dist, _ = pl.project(lat, lon)
    return float(dist[0])


@dataclass
class Line:
    id: str
    places: list[str]
    polyline: Polyline
    place_arc: dict[str, float] = field(default_factory=dict)


class TransitNetwork:
    def __init__(self, places, lines, split_areas=()):
        self.places: dict[str, Place] = {}
        for p in places:
            if p.id in self.places:
                raise NetworkError(f"duplicate place id {p.id}")
            if p.kind not in ("station", "light"):
                raise NetworkError(f"place {p.id}: unknown kind {p.kind!r}")
            self.places[p.id] = p
        if not lines:
            raise NetworkError("network has no lines")
        first = np.asarray(lines[0]["polyline"], dtype=float)
        self.frame = LocalFrame(float(first[0, 0]), float(first[0, 1]))
        self.lines: dict[str, Line] = {}
        self._raw_lines = [dict(id=str(l["id"]), places=list(l["places"]),
                                polyline=[list(map(float, v)) for v in l["polyline"]]) for l in lines]
        for ld in self._raw_lines:
            pl = Polyline(ld["polyline"], self.frame)
            line = Line(ld["id"], ld["places"], pl)
            prev = -np.inf
            for pid in line.places:
                if pid not in self.places:
                    raise NetworkError(f"line {line.id}: unknown place {pid}")
                p = self.places[pid]
                dist, arc = pl.project(p.lat, p.lon)
                if dist[0] > 25.0:
                    raise NetworkError(f"line {line.id}: place {pid} is {dist[0]:.1f} m off the polyline")
                if arc[0] <= prev:
                    raise NetworkError(f"line {line.id}: places not in polyline order at {pid}")
                prev = arc[0]
                line.place_arc[pid] = float(arc[0])
            if line.id in self.lines:
                raise NetworkError(f"duplicate line id {line.id}")
            self.lines[line.id] = line
        self.split_areas = [SplitArea([tuple(c) for c in s["mbr"]], [str(x) for x in s["lines"]])
                            for s in split_areas]
        for s in self.split_areas:
            if len(s.lines) < 2 or any(l not in self.lines for l in s.lines):
                raise NetworkError("split area must reference >= 2 known lines")
        self._trunks: dict[tuple[str, ...], tuple[Polyline | None, dict[str, Polyline]]] = {}

    # ------------------------------------------------------------------ io
    def to_dict(self) -> dict:
        places = []
        for p in self.places.values():
            d = {"id": p.id, "kind": p.kind, "lat": p.lat, "lon": p.lon}
            if p.platform_length_m is not None:
                d["platform_length_m"] = p.platform_length_m
            places.append(d)
        return {
            "places": places,
            "lines": [dict(l) for l in self._raw_lines],
            "split_areas": [{"mbr": [list(c) for c in s.mbr], "lines": s.lines} for s in self.split_areas],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransitNetwork":
        places = [Place(str(p["id"]), p["kind"], float(p["lat"]), float(p["lon"]),
                        p.get("platform_length_m")) for p in d["places"]]
        return cls(places, d["lines"], d.get("split_areas", []))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TransitNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # ------------------------------------------------------------ topology
    def stations(self) -> list[Place]:
        return [p for p in self.places.values() if p.kind == "station"]

    def lights(self) -> list[Place]:
        return [p for p in self.places.values() if p.kind == "light"]

    def ordered_places(self, line_id: str, direction: Direction) -> list[str]:
        seq = list(self.lines[line_id].places)
        return seq if direction is Direction.WEST_TO_EAST else seq[::-1]

    def successors(self, place_id: str, direction: Direction) -> set[str]:
        out = set()
        for lid in self.lines:
            seq = self.ordered_places(lid, direction)
            if place_id in seq:
                i = seq.index(place_id)
                if i + 1 < len(seq):
                    out.add(seq[i + 1])
        return out

    def path(self, source: str, dest: str, direction: Direction, line_id: str | None = None) -> tuple[str, list[str]]:
        """Places from source to dest inclusive along some line, in travel order."""
        for lid in ([line_id] if line_id else sorted(self.lines)):
            seq = self.ordered_places(lid, direction)
            if source in seq and dest in seq and seq.index(source) <= seq.index(dest):
                return lid, seq[seq.index(source): seq.index(dest) + 1]
        raise NetworkError(f"{dest} not reachable from {source} travelling {direction.value}")

    def snap(self, lat, lon, line_ids=None):
        """Nearest (line_id, distance_m, arc_m) over lines (ties by line id)."""
        best = None
        for lid in sorted(line_ids or self.lines):
            dist, arc = self.lines[lid].polyline.project(lat, lon)
            if best is None or dist[0] < best[1] - 1e-9:
                best = (lid, float(dist[0]), float(arc[0]))
        return best

    def trunk_and_branches(self, line_ids) -> tuple[Polyline | None, dict[str, Polyline]]:
        key = tuple(sorted(line_ids))
        if key in self._trunks:
            return self._trunks[key]
        polys = [np.asarray(self._raw_lines[[l["id"] for l in self._raw_lines].index(l)]["polyline"])
                 for l in key]
        k = 0
        while all(len(p) > k for p in polys) and all(np.allclose(p[k], polys[0][k], atol=1e-12) for p in polys):
            k += 1
        trunk = Polyline(polys[0][:k], self.frame) if k >= 2 else None
        branches = {l: Polyline(p[max(k - 1, 0):], self.frame) for l, p in zip(key, polys)}
        self._trunks[key] = (trunk, branches)
        return trunk, branches


def detect_direction(lat, lon, network: TransitNetwork, d_min: float = 30.0) -> Direction | None:
    """Travel direction of a window of fixes, or None when indeterminate.

    The net displacement between the first and last fix is measured along the
    route: both ends are snapped to the line that fits them best and the arc
    difference is taken. Below ``d_min`` meters the result is None.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if len(lat) < 2:
        return None
    best = None
    for lid in sorted(network.lines):
        dist, arc = network.lines[lid].polyline.project(lat[[0, -1]], lon[[0, -1]])
        score = float(dist.sum())
        if best is None or score < best[0] - 1e-9:
            best = (score, float(arc[1] - arc[0]))
    delta = best[1]
    if abs(delta) < d_min:
        return None
    return Direction.WEST_TO_EAST if delta > 0 else Direction.EAST_TO_WEST


def identify_line(lat, lon, network: TransitNetwork, margin_m: float = 10.0, snap_m: float = 50.0,
                  off_trunk_m: float = 30.0, min_points: int = 3) -> str | None:
    """Line id for a trace, or None (ambiguous).

    Only fixes that have left the shared trunk by more than ``off_trunk_m``
    and lie within ``snap_m`` of some branch count as evidence, and only if the
    trace entered a split area. The branch with the lowest mean distance wins
    when it beats the runner-up by more than ``margin_m``.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if len(lat) == 0:
        return AMBIGUOUS
    for area in network.split_areas:
        if not np.any(area.contains(lat, lon)):
            continue
        trunk, branches = network.trunk_and_branches(area.lines)
        x, y = network.frame.to_xy(lat, lon)
        off = np.ones(len(lat), dtype=bool) if trunk is None else trunk.project_xy(x, y)[0] > off_trunk_m
        dists = {l: b.project_xy(x, y)[0] for l, b in branches.items()}
        near = np.min(np.vstack(list(dists.values())), axis=0) <= snap_m
        mask = off & near
        if mask.sum() < min_points:
            continue
        scores = sorted((float(d[mask].mean()), l) for l, d in dists.items())
        if scores[1][0] - scores[0][0] > margin_m:
            return scores[0][1]
    return AMBIGUOUS
