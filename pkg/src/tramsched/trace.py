"""Rider GPS traces: data model, CSV format, and the append-only store.

CSV layout (UTF-8, header required)::

    device_id,t_ms,lat,lon,speed,event[,weight]

``speed`` (m/s) and ``event`` (``board`` | ``alight``) may be empty. The
optional ``weight`` column is written for preprocessed traces and records how
many raw fixes each row stands for.

On disk a :class:`TraceStore` keeps one file per device and UTC day::

    <root>/<device_id>/<YYYY-MM-DD>.csv
"""

from __future__ import annotations

import csv
import io
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .geo import GeoCoord

log = logging.getLogger(__name__)

EVENTS = ("board", "alight")
HEADER = ["device_id", "t_ms", "lat", "lon", "speed", "event"]


class TraceFormatError(ValueError):
    """Raised when a trace file has too many malformed lines."""

    def __init__(self, message, bad_lines=()):
        super().__init__(message)
        self.bad_lines = list(bad_lines)


@dataclass(frozen=True)
class GpsPoint:
    device_id: str
    t: int
    coord: GeoCoord
    speed: float | None = None
    event: str | None = None

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError(f"timestamp must be positive, got {self.t}")
        if self.speed is not None and not (math.isfinite(self.speed) and self.speed >= 0):
            raise ValueError(f"invalid speed {self.speed}")
        if self.event is not None and self.event not in EVENTS:
            raise ValueError(f"unknown event {self.event!r}")


class Trace:
    """Time-ordered fixes of one device, stored column-wise.

    ``speed`` uses NaN for "not reported"; ``event`` holds None or an event
    name; ``weight`` counts the raw fixes each row represents (1 for raw data).
    """

    __slots__ = ("device_id", "t", "lat", "lon", "speed", "event", "weight")

    def __init__(self, device_id, t, lat, lon, speed=None, event=None, weight=None, validate=True):
        self.device_id = str(device_id)
        self.t = np.asarray(t, dtype=np.int64)
        n = len(self.t)
        self.lat = np.asarray(lat, dtype=float)
        self.lon = np.asarray(lon, dtype=float)
        self.speed = np.full(n, np.nan) if speed is None else np.asarray(speed, dtype=float)
        if event is None:
            self.event = np.full(n, None, dtype=object)
        else:
            self.event = np.empty(n, dtype=object)
            self.event[:] = list(event)
        self.weight = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.t)
        for name in ("lat", "lon", "speed", "event", "weight"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n == 0:
            return
        if np.any(self.t <= 0):
            raise ValueError("timestamps must be positive")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if not (np.all(np.isfinite(self.lat)) and np.all(np.isfinite(self.lon))):
            raise ValueError("non-finite coordinates")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise ValueError("coordinates out of range")
        reported = ~np.isnan(self.speed)
        if np.any(~np.isfinite(self.speed[reported])) or np.any(self.speed[reported] < 0):
            raise ValueError("speed must be finite and non-negative")

    def __len__(self):
        return len(self.t)

    def __repr__(self):
        return f"Trace({self.device_id!r}, n={len(self)})"

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.device_id == other.device_id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
            and np.array_equal(self.speed, other.speed, equal_nan=True)
            and list(self.event) == list(other.event)
            and np.array_equal(self.weight, other.weight)
        )

    @property
    def has_speed(self) -> bool:
        return len(self) > 0 and not np.any(np.isnan(self.speed))

    @property
    def points(self) -> list[GpsPoint]:
        return [
            GpsPoint(
                self.device_id,
                int(self.t[i]),
                GeoCoord(float(self.lat[i]), float(self.lon[i])),
                None if np.isnan(self.speed[i]) else float(self.speed[i]),
                self.event[i],
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_points(cls, points: Iterable[GpsPoint]) -> "Trace":
        pts = sorted(points, key=lambda p: p.t)
        if not pts:
            raise ValueError("need at least one point to infer device_id")
        device = pts[0].device_id
        if any(p.device_id != device for p in pts):
            raise ValueError("points belong to several devices")
        return cls(
            device,
            [p.t for p in pts],
            [p.coord.lat for p in pts],
            [p.coord.lon for p in pts],
            [np.nan if p.speed is None else p.speed for p in pts],
            [p.event for p in pts],
        )

    def take(self, idx) -> "Trace":
        """Subset by index array or boolean mask (order preserved)."""
        return Trace(
            self.device_id, self.t[idx], self.lat[idx], self.lon[idx],
            self.speed[idx], self.event[idx], self.weight[idx], validate=False,
        )

    def sorted(self) -> "Trace":
        order = np.argsort(self.t, kind="stable")
        return self.take(order)


def _fmt_float(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_traces(traces: Iterable[Trace], path_or_buf, with_weight: bool | None = None) -> None:
    """Write traces as CSV. Floats use ``repr`` so a re-read is bit-exact."""
    traces = list(traces)
    if with_weight is None:
        with_weight = any(np.any(tr.weight != 1) for tr in traces)
    close = False
    if isinstance(path_or_buf, (str, Path)):
        fh = open(path_or_buf, "w", newline="", encoding="utf-8")
        close = True
    else:
        fh = path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (["weight"] if with_weight else []))
        for tr in traces:
            for i in range(len(tr)):
                row = [
                    tr.device_id, int(tr.t[i]), repr(float(tr.lat[i])), repr(float(tr.lon[i])),
                    _fmt_float(tr.speed[i]), tr.event[i] or "",
                ]
                if with_weight:
                    row.append(repr(float(tr.weight[i])))
                w.writerow(row)
    finally:
        if close:
            fh.close()


def traces_to_csv(traces: Iterable[Trace]) -> str:
    buf = io.StringIO()
    write_traces(traces, buf)
    return buf.getvalue()


@dataclass
class ParseReport:
    lines: int = 0
    bad_lines: list[tuple[int, str]] = field(default_factory=list)

    @property
    def bad_ratio(self) -> float:
        return len(self.bad_lines) / self.lines if self.lines else 0.0


def _parse_row(row: list[str], has_weight: bool):
    if len(row) != (7 if has_weight else 6):
        raise ValueError(f"expected {7 if has_weight else 6} fields, got {len(row)}")
    device, t_s, lat_s, lon_s, speed_s, event_s = row[:6]
    if not device:
        raise ValueError("empty device_id")
    t = int(t_s)
    coord = GeoCoord(float(lat_s), float(lon_s))
    speed = float(speed_s) if speed_s.strip() else None
    event = event_s.strip() or None
    GpsPoint(device, t, coord, speed, event)  # invariant checks
    weight = float(row[6]) if has_weight else 1.0
    if not (math.isfinite(weight) and weight > 0):
        raise ValueError(f"invalid weight {weight}")
    return device, t, coord.lat, coord.lon, (np.nan if speed is None else speed), event, weight


def parse_trace_text(text: str, max_bad_ratio: float = 0.10) -> tuple[list[Trace], ParseReport]:
    report = ParseReport()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return [], report
    header = [h.strip() for h in rows[0]]
    if header == HEADER:
        has_weight = False
    elif header == HEADER + ["weight"]:
        has_weight = True
    else:
        raise TraceFormatError(f"unexpected header {header}", [(1, "header")])
    columns: dict[str, list] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        report.lines += 1
        try:
            rec = _parse_row(row, has_weight)
        except (ValueError, TypeError) as exc:
            report.bad_lines.append((lineno, str(exc)))
            continue
        columns.setdefault(rec[0], []).append(rec[1:])
    if report.bad_lines:
        log.warning("%d malformed line(s): %s", len(report.bad_lines),
                    ", ".join(str(n) for n, _ in report.bad_lines[:20]))
    if report.bad_ratio > max_bad_ratio:
        raise TraceFormatError(
            f"{len(report.bad_lines)}/{report.lines} malformed lines exceed ratio {max_bad_ratio}: "
            f"lines {[n for n, _ in report.bad_lines]}",
            report.bad_lines,
        )
    traces = []
    for device, recs in columns.items():
        recs.sort(key=lambda r: r[0])
        t, lat, lon, speed, event, weight = zip(*recs)
        traces.append(Trace(device, t, lat, lon, speed, event, weight))
    return traces, report


def parse_trace_file(path, max_bad_ratio: float = 0.10) -> tuple[list[Trace], ParseReport]:
    """Read a trace CSV into one Trace per device, sorted by time.

    Malformed lines are skipped and listed in the report; if they exceed
    ``max_bad_ratio`` of the data lines the whole file is rejected.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_trace_text(text, max_bad_ratio)


def day_of(t_ms: int) -> str:
    return datetime.fromtimestamp(t_ms / 1000, tz=timezone.utc).strftime("%Y-%m-%d")


@dataclass
class DeviceIngest:
    added: int = 0
    duplicates: int = 0
    reordered: int = 0


@dataclass
class IngestReport:
    devices: dict[str, DeviceIngest] = field(default_factory=dict)

    @property
    def added(self):
        return sum(d.added for d in self.devices.values())

    @property
    def duplicates(self):
        return sum(d.duplicates for d in self.devices.values())

    @property
    def reordered(self):
        return sum(d.reordered for d in self.devices.values())


class TraceStore:
    """Append-only trace collection keyed by (device_id, UTC day).

    Single writer, many readers: ``ingest`` holds a lock while building new
    arrays and swaps them in at the end, so readers only ever see complete
    snapshots. Stored arrays are never modified in place.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._data: dict[tuple[str, str], Trace] = {}
        self._lock = threading.Lock()
        if self.root is not None and self.root.exists():
            self._load()

    def _load(self):
        for f in sorted(self.root.glob("*/*.csv")):
            traces, _ = parse_trace_file(f, max_bad_ratio=0.0)
            for tr in traces:
                self._data[(tr.device_id, f.stem)] = tr

    def __len__(self):
        return sum(len(tr) for tr in self._data.values())

    def keys(self):
        return sorted(self._data)

    def get(self, device_id: str, day: str) -> Trace:
        return self._data[(device_id, day)]

    def traces(self) -> list[Trace]:
        """Snapshot of all stored traces, one per (device, day)."""
        data = self._data
        return [data[k] for k in sorted(data)]

    def device_trace(self, device_id: str) -> Trace | None:
        parts = [tr for (dev, _), tr in sorted(self._data.items()) if dev == device_id]
        if not parts:
            return None
        return _concat(parts)

    def ingest(self, traces: Iterable[Trace]) -> IngestReport:
        report = IngestReport()
        with self._lock:
            new_data = dict(self._data)
            touched = set()
            for tr in traces:
                rep = report.devices.setdefault(tr.device_id, DeviceIngest())
                order = np.argsort(tr.t, kind="stable")
                rep.reordered += int(np.count_nonzero(order != np.arange(len(tr))))
                tr = tr.take(order)
                days = np.array([day_of(int(t)) for t in tr.t])
                for day in np.unique(days):
                    part = tr.take(days == day)
                    key = (tr.device_id, str(day))
                    old = new_data.get(key)
                    seen = set(old.t.tolist()) if old is not None else set()
                    keep = np.zeros(len(part), dtype=bool)
                    for i, t in enumerate(part.t.tolist()):
                        if t not in seen:
                            seen.add(t)
                            keep[i] = True
                    rep.duplicates += int(len(part) - keep.sum())
                    rep.added += int(keep.sum())
                    if not keep.any():
                        continue
                    part = part.take(keep)
                    merged = part if old is None else _concat([old, part]).sorted()
                    new_data[key] = merged
                    touched.add(key)
            self._data = new_data
            if self.root is not None:
                for key in touched:
                    self._persist(key)
        return report

    def _persist(self, key):
        device, day = key
        d = self.root / device
        d.mkdir(parents=True, exist_ok=True)
        tmp = d / f".{day}.csv.tmp"
        write_traces([self._data[key]], tmp)
        tmp.replace(d / f"{day}.csv")


def _concat(parts: list[Trace]) -> Trace:
    return Trace(
        parts[0].device_id,
        np.concatenate([p.t for p in parts]),
        np.concatenate([p.lat for p in parts]),
        np.concatenate([p.lon for p in parts]),
        np.concatenate([p.speed for p in parts]),
        np.concatenate([p.event for p in parts]),
        np.concatenate([p.weight for p in parts]),
        validate=False,
    )


def iter_points(traces: Iterable[Trace]) -> Iterator[GpsPoint]:
    for tr in traces:
        yield from tr.points
