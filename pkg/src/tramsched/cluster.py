"""Density-based clustering and the ROC-style parameter sweep for stop detection."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geo import EARTH, LocalFrame

NOISE = -1

# Shipped station-detection configuration.
DEFAULT_MINPTS = 100
DEFAULT_EPS_DEG = 0.0002
DEFAULT_DT_DEG = 0.0003

DEFAULT_MINPTS_GRID = (25, 50, 100, 200)
DEFAULT_EPS_GRID = (0.0001, 0.0002, 0.0003, 0.0004, 0.0005)
DEFAULT_DT_GRID = (0.0002, 0.0003, 0.0004, 0.0005)


@dataclass(frozen=True)
class ClusterParams:
    minpts: int = DEFAULT_MINPTS
    eps_deg: float = DEFAULT_EPS_DEG
    dt_deg: float = DEFAULT_DT_DEG

    def __post_init__(self):
        if self.minpts < 1:
            raise ValueError("minpts must be >= 1")
        if not self.eps_deg > 0:
            raise ValueError("eps_deg must be > 0")
        if not self.dt_deg > 0:
            raise ValueError("dt_deg must be > 0")


@dataclass
class ClusterResult:
    labels: np.ndarray  # cluster id per point, NOISE for noise
    core: np.ndarray  # bool per point
    centroids: np.ndarray  # (k, 2) mean (lat, lon) per cluster
    sizes: np.ndarray  # member count per cluster

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def n_noise(self) -> int:
        return int(np.count_nonzero(self.labels == NOISE))

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def _project(points: np.ndarray, eps: float, metric: str):
    """Return planar coordinates and a planar radius for the neighbourhood test."""
    if metric == "degree":
        return points[:, 0], points[:, 1], eps
    if metric == "haversine":
        # eps is in meters; a local frame is exact enough at neighbourhood scale.
        frame = LocalFrame(float(np.mean(points[:, 0])), float(np.mean(points[:, 1])))
        x, y = frame.to_xy(points[:, 0], points[:, 1])
        return y, x, eps
    raise ValueError(f"unknown metric {metric!r}")


def neighbourhoods(points: np.ndarray, eps: float, metric: str = "degree") -> list[np.ndarray]:
    """Indices within eps of each point (itself included), ascending.

    Uses a uniform grid with cell size eps; only the 3x3 block around a point's
    cell is scanned, which gives exactly the same sets as a full scan.
    """
    n = len(points)
    if n == 0:
        return []
    a, b, r = _project(points, eps, metric)
    ca = np.floor(a / r).astype(np.int64)
    cb = np.floor(b / r).astype(np.int64)
    cells: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(ca.tolist(), cb.tolist())):
        cells.setdefault(key, []).append(i)
    cell_arrays = {k: np.asarray(v) for k, v in cells.items()}
    r2 = r * r
    out: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    block_cache: dict[tuple[int, int], np.ndarray] = {}
    for key, idx in cell_arrays.items():
        block = block_cache.get(key)
        if block is None:
            parts = [
                cell_arrays[(key[0] + da, key[1] + db)]
                for da in (-1, 0, 1)
                for db in (-1, 0, 1)
                if (key[0] + da, key[1] + db) in cell_arrays
            ]
            block = np.sort(np.concatenate(parts))
            block_cache[key] = block
        ab, bb = a[block], b[block]
        for i in idx.tolist():
            d2 = (ab - a[i]) ** 2 + (bb - b[i]) ** 2
            out[i] = block[d2 <= r2]
    return out


def dbscan(points, minpts: int, eps: float, metric: str = "degree", weights=None) -> ClusterResult:
    """DBSCAN over (lat, lon) rows.

    A point is core when the total weight of its eps-neighbourhood, itself
    included, reaches ``minpts`` (unit weights give the usual count). Points
    are visited in input order and clusters are grown breadth-first, so a
    border point reachable from several clusters joins the one discovered
    first. ``eps`` is in degrees for ``metric="degree"`` and meters for
    ``metric="haversine"``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if n == 0:
        return ClusterResult(np.empty(0, int), np.empty(0, bool), np.empty((0, 2)), np.empty(0, int))
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite coordinates")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    nbrs = neighbourhoods(points, eps, metric)
    core = np.array([w[nb].sum() >= minpts for nb in nbrs], dtype=bool)
    labels = np.full(n, NOISE, dtype=int)
    k = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = k
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for q in nbrs[j].tolist():
                if labels[q] == NOISE:
                    labels[q] = k
                    queue.append(q)
        k += 1
    return _finish(points, labels, core, k)


def _finish(points, labels, core, k) -> ClusterResult:
    centroids = np.zeros((k, 2))
    sizes = np.zeros(k, dtype=int)
    for c in range(k):
        m = labels == c
        sizes[c] = int(m.sum())
        centroids[c] = points[m].mean(axis=0)
    return ClusterResult(labels, core, centroids, sizes)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    tpr: float
    fpr: float
    precision: float
    recall: float
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (detected, truth)
    false_negatives_hit: int = 0  # negative places with a detected centroid nearby


def match_centroids(detected, truth, dt_deg: float, negatives=None) -> MatchResult:
    """Greedy nearest-first one-to-one matching of detected to true centroids.

    All (detected, truth) pairs closer than ``dt_deg`` are taken in order of
    increasing distance (ties by index), each side used at most once.
    ``negatives`` are the true non-station stop places (traffic lights); the
    false positive rate is the share of them that attract an unmatched
    detection within ``dt_deg``. Without negatives FPR is 0.
    """
    if not dt_deg > 0:
        raise ValueError("dt_deg must be > 0")
    det = np.asarray(detected, dtype=float).reshape(-1, 2)
    tru = np.asarray(truth, dtype=float).reshape(-1, 2)
    pairs = []
    if len(det) and len(tru):
        d = np.hypot(det[:, None, 0] - tru[None, :, 0], det[:, None, 1] - tru[None, :, 1])
        cand = [(d[i, j], i, j) for i, j in zip(*np.nonzero(d <= dt_deg))]
        cand.sort()
        used_d, used_t = set(), set()
        for _, i, j in cand:
            if i in used_d or j in used_t:
                continue
            used_d.add(i)
            used_t.add(j)
            pairs.append((int(i), int(j)))
    tp = len(pairs)
    fp = len(det) - tp
    fn = len(tru) - tp
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    neg_hits = 0
    fpr = 0.0
    neg = np.asarray(negatives if negatives is not None else [], dtype=float).reshape(-1, 2)
    if len(neg):
        matched = {i for i, _ in pairs}
        free = np.array([i for i in range(len(det)) if i not in matched], dtype=int)
        if len(free):
            dn = np.hypot(det[free, None, 0] - neg[None, :, 0], det[free, None, 1] - neg[None, :, 1])
            neg_hits = int(np.count_nonzero((dn <= dt_deg).any(axis=0)))
        fpr = neg_hits / len(neg)
    return MatchResult(tp, fp, fn, recall, fpr, precision, recall, pairs, neg_hits)


@dataclass
class SweepPoint:
    minpts: int
    eps_deg: float
    dt_deg: float
    n_clusters: int
    tpr: float
    fpr: float
    precision: float
    recall: float


@dataclass
class SweepOutcome:
    grid: list[SweepPoint]
    chosen: ClusterParams

    def roc_curves(self) -> dict[tuple[int, float], list[tuple[float, float, float]]]:
        """(minpts, dt) -> [(eps, fpr, tpr), ...] sorted by eps."""
        curves: dict[tuple[int, float], list] = {}
        for p in self.grid:
            curves.setdefault((p.minpts, p.dt_deg), []).append((p.eps_deg, p.fpr, p.tpr))
        return {k: sorted(v) for k, v in sorted(curves.items())}

    @property
    def chosen_point(self) -> SweepPoint:
        c = self.chosen
        return next(p for p in self.grid if (p.minpts, p.eps_deg, p.dt_deg) == (c.minpts, c.eps_deg, c.dt_deg))

    def to_dict(self) -> dict:
        return {
            "chosen": {"minpts": self.chosen.minpts, "eps_deg": self.chosen.eps_deg,
                       "dt_deg": self.chosen.dt_deg},
            "grid": [vars(p) for p in self.grid],
        }


def sweep_parameters(points, truth, minpts_grid=DEFAULT_MINPTS_GRID, eps_grid=DEFAULT_EPS_GRID,
                     dt_grid=DEFAULT_DT_GRID, negatives=None, weights=None,
                     metric: str = "degree") -> SweepOutcome:
    """Run dbscan + match_centroids over the full grid and pick the best triple.

    Selection is lexicographic: highest TPR, then lowest FPR, then smallest
    eps (then smallest minpts and dt, for determinism).
    """
    if not (len(minpts_grid) and len(eps_grid) and len(dt_grid)):
        raise ValueError("grids must be non-empty")
    grid = []
    for minpts, eps in itertools.product(sorted(minpts_grid), sorted(eps_grid)):
        res = dbscan(points, minpts, eps, metric, weights)
        for dt in sorted(dt_grid):
            m = match_centroids(res.centroids, truth, dt, negatives)
            grid.append(SweepPoint(minpts, eps, dt, res.n_clusters, m.tpr, m.fpr, m.precision, m.recall))
    best = min(grid, key=lambda p: (-p.tpr, p.fpr, p.eps_deg, p.minpts, p.dt_deg))
    return SweepOutcome(grid, ClusterParams(best.minpts, best.eps_deg, best.dt_deg))


def deg_to_m(deg: float) -> float:
    """Nominal meters for a degree distance (latitude scale)."""
    return deg * EARTH.meters_per_degree


def m_to_deg(m: float) -> float:
    return m / EARTH.meters_per_degree


__all__ = [
    "NOISE", "ClusterParams", "ClusterResult", "MatchResult", "SweepOutcome", "SweepPoint",
    "dbscan", "match_centroids", "sweep_parameters", "neighbourhoods", "deg_to_m", "m_to_deg",
]
