"""Three-phase trace cleaning: coarse outliers, smoothing + density noise removal,
duplicate removal.

Retention is measured in raw fixes: each smoothed row carries the number of raw
fixes it stands for, and a row dropped later drops all of them.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import NOISE, dbscan
from .trace import Trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    sigma_k: float = 3.0
    window: int = 5
    db_minpts: int = 2
    db_eps_deg: float = 0.001
    dup_quantum_deg: float = 0.00001
    dup_window_ms: int = 1000

    def __post_init__(self):
        if not self.sigma_k > 0:
            raise ValueError("sigma_k must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.db_minpts < 1:
            raise ValueError("db_minpts must be >= 1")
        if not self.db_eps_deg > 0:
            raise ValueError("db_eps_deg must be > 0")
        if not self.dup_quantum_deg > 0:
            raise ValueError("dup_quantum_deg must be > 0")
        if self.dup_window_ms < 0:
            raise ValueError("dup_window_ms must be >= 0")


@dataclass
class PreprocessReport:
    input_points: int = 0
    output_points: int = 0
    input_weight: float = 0.0
    output_weight: float = 0.0
    removed_phase1: int = 0
    removed_phase2_noise: int = 0
    merged_phase2: int = 0
    removed_phase3: int = 0
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def retention_ratio(self) -> float | None:
        """Surviving raw fixes / input raw fixes; None for empty input."""
        if self.input_weight == 0:
            return None
        return self.output_weight / self.input_weight

    def merge(self, other: "PreprocessReport") -> "PreprocessReport":
        out = PreprocessReport(config=self.config or other.config)
        for name in ("input_points", "output_points", "input_weight", "output_weight",
                     "removed_phase1", "removed_phase2_noise", "merged_phase2", "removed_phase3"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.warnings = self.warnings + other.warnings
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retention_ratio"] = self.retention_ratio
        return d


def phase1_coarse(trace: Trace, sigma_k: float = 3.0, report: PreprocessReport | None = None) -> Trace:
    """Keep points whose lat and lon both lie within mean +- k*std of the trace."""
    n = len(trace)
    if n < 2:
        if report is not None:
            report.warnings.append(f"{trace.device_id}: phase1 skipped, fewer than 2 points")
        log.warning("phase1 pass-through for %s: %d point(s)", trace.device_id, n)
        return trace
    keep = np.ones(n, dtype=bool)
    for col in (trace.lat, trace.lon):
        mu = col.mean()
        sd = col.std(ddof=1)
        keep &= np.abs(col - mu) <= sigma_k * sd
    if report is not None:
        report.removed_phase1 += int(n - keep.sum())
    return trace.take(keep)


def smooth_windows(trace: Trace, window: int) -> Trace:
    """Collapse consecutive non-overlapping windows into their centroid.

    The centroid row takes the median timestamp, the mean reported speed, the
    first event annotation inside the window and the summed weight. A short
    trailing window is averaged as-is.
    """
    n = len(trace)
    if window == 1 or n == 0:
        return trace
    starts = np.arange(0, n, window)
    counts = np.minimum(window, n - starts)
    lat = np.add.reduceat(trace.lat, starts) / counts
    lon = np.add.reduceat(trace.lon, starts) / counts
    with np.errstate(invalid="ignore"):
        speed = np.add.reduceat(trace.speed, starts) / counts
    weight = np.add.reduceat(trace.weight, starts)
    t = np.empty(len(starts), dtype=np.int64)
    event = np.empty(len(starts), dtype=object)
    for k, (s, c) in enumerate(zip(starts.tolist(), counts.tolist())):
        t[k] = int(np.median(trace.t[s:s + c]))
        ev = [e for e in trace.event[s:s + c] if e is not None]
        event[k] = ev[0] if ev else None
    return Trace(trace.device_id, t, lat, lon, speed, event, weight, validate=False)


def phase2_denoise(trace: Trace, window: int = 5, db_minpts: int = 2, db_eps_deg: float = 0.001,
                   report: PreprocessReport | None = None) -> Trace:
    """Smooth with non-overlapping windows, then drop DBSCAN noise (degree space)."""
    smoothed = smooth_windows(trace, window)
    if report is not None:
        report.merged_phase2 += len(trace) - len(smoothed)
    if len(smoothed) == 0:
        return smoothed
    pts = np.column_stack([smoothed.lat, smoothed.lon])
    res = dbscan(pts, db_minpts, db_eps_deg)
    keep = res.labels != NOISE
    if report is not None:
        report.removed_phase2_noise += int((~keep).sum())
    return smoothed.take(keep)


def phase3_dedup(trace: Trace, dup_quantum_deg: float = 0.00001, dup_window_ms: int = 1000,
                 report: PreprocessReport | None = None) -> Trace:
    """Drop repeated fixes of the same place.

    Coordinates are snapped to a ``dup_quantum_deg`` grid; a point whose cell
    already holds an open group started less than ``dup_window_ms`` earlier
    is a duplicate of that group's first point. Later points open a new group.
    """
    n = len(trace)
    if n == 0:
        return trace
    qlat = np.floor(trace.lat / dup_quantum_deg).astype(np.int64)
    qlon = np.floor(trace.lon / dup_quantum_deg).astype(np.int64)
    group_start: dict[tuple[int, int], int] = {}
    keep = np.ones(n, dtype=bool)
    for i, (cell, t) in enumerate(zip(zip(qlat.tolist(), qlon.tolist()), trace.t.tolist())):
        t0 = group_start.get(cell)
        if t0 is not None and t - t0 < dup_window_ms:
            keep[i] = False
        else:
            group_start[cell] = t
    if report is not None:
        report.removed_phase3 += int(n - keep.sum())
    return trace.take(keep)


def preprocess(trace: Trace, config: PreprocessConfig = PreprocessConfig()) -> tuple[Trace, PreprocessReport]:
    report = PreprocessReport(config=asdict(config))
    report.input_points = len(trace)
    report.input_weight = float(trace.weight.sum())
    out = phase1_coarse(trace, config.sigma_k, report)
    out = phase2_denoise(out, config.window, config.db_minpts, config.db_eps_deg, report)
    out = phase3_dedup(out, config.dup_quantum_deg, config.dup_window_ms, report)
    report.output_points = len(out)
    report.output_weight = float(out.weight.sum())
    return out, report


def preprocess_all(traces, config: PreprocessConfig = PreprocessConfig()):
    cleaned, total = [], PreprocessReport(config=asdict(config))
    for tr in traces:
        out, rep = preprocess(tr, config)
        total = total.merge(rep)
        if len(out):
            cleaned.append(out)
    return cleaned, total
