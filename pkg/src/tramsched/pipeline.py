"""End-to-end composition: preprocess -> detect stop places -> fit delays,
plus scoring against simulator ground truth when it is available."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import match_centroids
from .config import PipelineConfig
from .network import TransitNetwork
from .preprocess import PreprocessReport, preprocess_all
from .stations import DetectionRun, StationsDb, detect_stop_places
from .timing import DistributionStore, ExtractReport, extract_delay_samples
from .trace import Trace


@dataclass
class StationScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    platform_errors: dict = field(default_factory=dict)  # truth id -> relative error

    @property
    def mean_platform_error(self) -> float | None:
        if not self.platform_errors:
            return None
        return float(np.mean(list(self.platform_errors.values())))

    def to_dict(self) -> dict:
        return asdict(self) | {"mean_platform_error": self.mean_platform_error}


def score_stations(db: StationsDb, truth_places: list[dict], dt_deg: float) -> StationScore:
    """Precision/recall of detected stations against true station locations,
    with true lights as negatives, and relative platform-length errors of the
    matched pairs."""
    det = db.stations()
    true_st = [p for p in truth_places if p["kind"] == "station"]
    lights = [p for p in truth_places if p["kind"] == "light"]
    m = match_centroids(np.array([[p.lat, p.lon] for p in det]).reshape(-1, 2),
                        np.array([[p["lat"], p["lon"]] for p in true_st]).reshape(-1, 2), dt_deg,
                        negatives=np.array([[p["lat"], p["lon"]] for p in lights]).reshape(-1, 2))
    errs = {}
    for i, j in m.pairs:
        true_len = true_st[j].get("platform_length_m")
        if true_len and det[i].platform_length_m is not None:
            errs[true_st[j]["id"]] = abs(det[i].platform_length_m - true_len) / true_len
    return StationScore(m.tp, m.fp, m.fn, m.precision, m.recall, errs)


@dataclass
class PipelineResult:
    cleaned: list[Trace]
    preprocess: PreprocessReport
    detection: DetectionRun
    extract: ExtractReport
    store: DistributionStore
    station_score: StationScore | None = None

    def summary(self, config: PipelineConfig | None = None) -> dict:
        out = {
            "preprocess": self.preprocess.to_dict(),
            "stations": {
                "detected_stations": len(self.detection.db.stations()),
                "detected_lights": len(self.detection.db.places("traffic_light")),
                "score": None if self.station_score is None else self.station_score.to_dict(),
            },
            "extract": asdict(self.extract),
            "distributions": [d.to_dict() for d in self.store.values()],
        }
        if config is not None:
            out["config"] = config.to_dict()
        return out


def run_pipeline(traces: list[Trace], network: TransitNetwork, config: PipelineConfig = PipelineConfig(),
                 truth_places: list[dict] | None = None, store: DistributionStore | None = None,
                 db: StationsDb | None = None) -> PipelineResult:
    cleaned, prep = preprocess_all(traces, config.preprocess)
    detection = detect_stop_places(cleaned, config.cluster, config.stations, db)
    raw = {t.device_id: t for t in traces}
    samples, ext = extract_delay_samples(cleaned, detection.db, network, detection.intervals,
                                         config.extract, raw=raw)
    store = store if store is not None else DistributionStore()
    store.ingest(samples, config.fit.lam, config.fit.alpha, config.fit.n_min, config.fit.ks_method)
    score = None
    if truth_places is not None:
        score = score_stations(detection.db, truth_places, config.cluster.dt_deg)
    return PipelineResult(cleaned, prep, detection, ext, store, score)
