"""DHS-style cluster displacement.

Each cluster point is moved by a random angle and a random distance capped at
2 km (urban), 5 km (rural) or 10 km (a ~1% subset of rural clusters), and the
draw is repeated until the moved point stays inside the cluster's original
admin area. The zip code of the survey records is then re-derived from the
moved point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import pandas as pd

from .data_model import GeoContext, MicroTable, locate, point_in_polygon
from .errors import RejectionBudgetExceeded, SpecInvalid, UnknownCluster
from .rng import Rng


@dataclass(frozen=True)
class GeomaskParams:
    urban_max_m: float = 2000.0
    rural_max_m: float = 5000.0
    rural_far_max_m: float = 10000.0
    rural_far_fraction: float = 0.01
    max_rejection_iters: int = 10_000

    def __post_init__(self):
        if min(self.urban_max_m, self.rural_max_m, self.rural_far_max_m) <= 0:
            raise SpecInvalid("displacement caps must be positive")
        if not 0.0 <= self.rural_far_fraction <= 1.0:
            raise SpecInvalid("rural far fraction must lie in [0, 1]")
        if self.max_rejection_iters < 1:
            raise SpecInvalid("rejection budget must be >= 1")

    def cap(self, urban: bool, far: bool) -> float:
        if urban:
            return self.urban_max_m
        return self.rural_far_max_m if far else self.rural_max_m


@dataclass(frozen=True)
class Displacement:
    cluster: str
    urban: bool
    far: bool
    angle: float
    distance: float
    iterations: int
    original_zip: str
    masked_zip: str

    @property
    def zip_changed(self) -> bool:
        return self.original_zip != self.masked_zip


@dataclass(frozen=True)
class MaskedGeo:
    masked_points: dict
    reassigned_zip: dict
    log: tuple = field(default=())

    def share_reassigned(self) -> float:
        if not self.log:
            return 0.0
        return sum(d.zip_changed for d in self.log) / len(self.log)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "cluster": d.cluster, "urban": d.urban, "far": d.far, "angle": d.angle,
            "distance": d.distance, "iterations": d.iterations, "original_zip": d.original_zip,
            "masked_zip": d.masked_zip, "zip_changed": d.zip_changed,
        } for d in self.log])


def displace_point(x: float, y: float, angle: float, distance: float) -> tuple:
    return x + distance * math.cos(angle), y + distance * math.sin(angle)


def displace_clusters(geo: GeoContext, urban_flags, params: GeomaskParams, rng: Rng,
                      clusters=None) -> MaskedGeo:
    """Displace every cluster (or the given subset) inside its admin area."""
    ids = sorted(clusters) if clusters is not None else list(geo.cluster_points)
    masked, zips, log = {}, {}, []
    for cid in ids:
        if cid not in geo.cluster_points:
            raise UnknownCluster(f"cluster {cid} has no point location")
        if cid not in urban_flags:
            raise SpecInvalid(f"cluster {cid} has no urban/rural flag")
        urban = bool(urban_flags[cid])
        admin = geo.admin_areas[geo.cluster_admin[cid]]
        x, y = geo.cluster_points[cid]
        gen = rng.child("cluster", cid).generator()
        far = (not urban) and bool(gen.random() < params.rural_far_fraction)
        cap = params.cap(urban, far)
        for it in range(1, params.max_rejection_iters + 1):
            angle = gen.uniform(0.0, 360.0) * math.pi / 180.0
            dist = gen.uniform(0.0, cap)
            point = displace_point(x, y, angle, dist)
            if point_in_polygon(point, admin):
                break
        else:
            raise RejectionBudgetExceeded(
                f"cluster {cid}: no admissible displacement after {params.max_rejection_iters} draws"
            )
        new_zip = locate(point, geo.zip_areas) or geo.cluster_zip[cid]
        masked[cid] = point
        zips[cid] = new_zip
        log.append(Displacement(cid, urban, far, angle, dist, it, geo.cluster_zip[cid], new_zip))
    return MaskedGeo(masked, zips, tuple(log))


def urban_flags_from_table(table: MicroTable, urban_col: str | None = None, urban_label: str = "urban") -> dict:
    col = urban_col or table.schema.role("urban")
    c_col = table.schema.role("cluster")
    pairs = table.data[[c_col, col]].drop_duplicates(c_col)
    return {c: (str(v) == urban_label or str(v).lower() in ("1", "true", "yes"))
            for c, v in zip(pairs[c_col], pairs[col])}


def apply_mask(survey: MicroTable, masked: MaskedGeo) -> MicroTable:
    """Geomasked survey: identical records, zip column rewritten per cluster."""
    c_col = survey.schema.role("cluster")
    z_col = survey.schema.role("zip_code")
    clusters = survey.data[c_col]
    missing = sorted(set(clusters) - set(masked.reassigned_zip))
    if missing:
        raise UnknownCluster(f"survey clusters absent from the displacement: {missing[:5]}")
    data = survey.data.copy()
    data[z_col] = clusters.map(masked.reassigned_zip).to_numpy(dtype=object)
    return MicroTable(survey.schema, data, provenance="geomasked")
