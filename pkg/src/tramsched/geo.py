"""Geodesic primitives: coordinates, haversine distance, local planar projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_RADIUS_KM = 6373.0


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class EarthModel:
    """Spherical earth. The 6373 km radius is tuned for mid latitudes; the
    ellipsoidal shape is ignored."""

    radius_km: float = DEFAULT_RADIUS_KM

    def __post_init__(self):
        if not (self.radius_km > 0 and math.isfinite(self.radius_km)):
            raise ValueError("radius_km must be positive")

    @property
    def radius_m(self) -> float:
        return self.radius_km * 1000.0

    @property
    def meters_per_degree(self) -> float:
        """Meters per degree of latitude (and of longitude at the equator)."""
        return self.radius_m * math.pi / 180.0


EARTH = EarthModel()


def haversine_distance(a: GeoCoord, b: GeoCoord, earth: EarthModel = EARTH) -> float:
    """Great-circle distance in meters."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2 + math.sin(dlat / 2) ** 2
    h = min(1.0, max(0.0, h))
    c = 2 * math.atan2(math.sqrt(h), math.sqrt(1 - h))
    return earth.radius_m * c


def haversine_m(lat1, lon1, lat2, lon2, earth: EarthModel = EARTH):
    """Vectorised haversine over numpy arrays (degrees in, meters out)."""
    lat1 = np.radians(lat1)
    lat2 = np.radians(lat2)
    dlat = lat2 - lat1
    dlon = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2 + np.sin(dlat / 2) ** 2
    h = np.clip(h, 0.0, 1.0)
    return earth.radius_m * 2 * np.arctan2(np.sqrt(h), np.sqrt(1 - h))


def degree_displacement(a: GeoCoord, b: GeoCoord) -> tuple[float, float]:
    """Componentwise (dlat, dlon) from a to b, in degrees."""
    return (b.lat - a.lat, b.lon - a.lon)


class LocalFrame:
    """Equirectangular projection around an origin: x east, y north, meters.

    Accurate to well under a meter at city scale, which is all the map
    matching and simulator geometry need.
    """

    def __init__(self, origin_lat: float, origin_lon: float, earth: EarthModel = EARTH):
        self.origin_lat = origin_lat
        self.origin_lon = origin_lon
        self.m_per_deg_lat = earth.meters_per_degree
        self.m_per_deg_lon = earth.meters_per_degree * math.cos(math.radians(origin_lat))

    def to_xy(self, lat, lon):
        x = (np.asarray(lon, dtype=float) - self.origin_lon) * self.m_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.origin_lat) * self.m_per_deg_lat
        return x, y

    def to_latlon(self, x, y):
        lat = self.origin_lat + np.asarray(y, dtype=float) / self.m_per_deg_lat
        lon = self.origin_lon + np.asarray(x, dtype=float) / self.m_per_deg_lon
        return lat, lon
