import math

import numpy as np
import pytest

from geosynth.data_model import GeoContext, Polygon
from geosynth.errors import RejectionBudgetExceeded, UnknownCluster
from geosynth.geomask import (
    GeomaskParams,
    MaskedGeo,
    apply_mask,
    displace_clusters,
    displace_point,
    urban_flags_from_table,
)
from geosynth.rng import Rng


def test_displacement_formula():
    x, y = displace_point(0.0, 0.0, 0.0, 1000.0)
    assert (x, y) == (1000.0, 0.0)
    x, y = displace_point(10.0, 10.0, math.pi / 2, 5.0)
    assert x == pytest.approx(10.0) and y == pytest.approx(15.0)


def big_world(n=200, urban_share=0.5):
    admin = {"A": Polygon.box(-1e6, -1e6, 1e6, 1e6)}
    zips = {"Z": Polygon.box(-1e6, -1e6, 1e6, 1e6)}
    pts = {f"c{i}": (0.0, 0.0) for i in range(n)}
    flags = {f"c{i}": i < n * urban_share for i in range(n)}
    return GeoContext(pts, admin, zips), flags


def test_caps_by_category():
    geo, flags = big_world()
    masked = displace_clusters(geo, flags, GeomaskParams(), Rng(4))
    for d in masked.log:
        cap = 2000 if d.urban else (10000 if d.far else 5000)
        px, py = masked.masked_points[d.cluster]
        assert math.hypot(px, py) <= cap + 1e-9
        assert d.distance <= cap


def test_containment_and_zip_reassignment():
    admin = {"A": Polygon.box(0, 0, 4000, 2000)}
    zips = {"L": Polygon.box(0, 0, 2000, 2000), "R": Polygon.box(2000, 0, 4000, 2000)}
    pts = {f"c{i}": (1500.0 + i, 1000.0) for i in range(50)}
    geo = GeoContext(pts, admin, zips)
    masked = displace_clusters(geo, {c: False for c in pts}, GeomaskParams(), Rng(1))
    for cid, p in masked.masked_points.items():
        assert admin["A"].contains(p)
        assert masked.reassigned_zip[cid] == ("L" if p[0] <= 2000 else "R") or zips[masked.reassigned_zip[cid]].contains(p)
    assert 0 < masked.share_reassigned() < 1


def test_rejection_budget():
    geo = GeoContext({"c": (0.5, 0.5)}, {"A": Polygon.box(0, 0, 1, 1)}, {"Z": Polygon.box(0, 0, 1, 1)})
    with pytest.raises(RejectionBudgetExceeded):
        displace_clusters(geo, {"c": False}, GeomaskParams(max_rejection_iters=3), Rng(0))


def test_deterministic_per_cluster():
    geo, flags = big_world(20)
    a = displace_clusters(geo, flags, GeomaskParams(), Rng(2))
    b = displace_clusters(geo, flags, GeomaskParams(), Rng(2), clusters=["c3", "c7"])
    assert a.masked_points["c3"] == b.masked_points["c3"]


def test_apply_mask_locality(desk):
    pop, geo, draw = desk
    true = draw.survey
    clusters = sorted(set(true.role_column("cluster")))
    same = MaskedGeo({}, {c: geo.cluster_zip[c] for c in clusters})
    out = apply_mask(true, same)
    assert out.data.equals(true.data) and out.provenance == "geomasked"
    other = sorted(geo.zip_areas)[0] if geo.cluster_zip[clusters[0]] != sorted(geo.zip_areas)[0] else sorted(geo.zip_areas)[1]
    one = MaskedGeo({}, {**same.reassigned_zip, clusters[0]: other})
    out = apply_mask(true, one)
    changed = out.data.zip_code != true.data.zip_code
    assert set(true.data.cluster[changed]) == {clusters[0]}
    assert out.data.drop(columns="zip_code").equals(true.data.drop(columns="zip_code"))
    with pytest.raises(UnknownCluster):
        apply_mask(true, MaskedGeo({}, {}))


def test_row_share_matches_cluster_weighted_share(desk):
    pop, geo, draw = desk
    true = draw.survey
    masked = displace_clusters(geo, urban_flags_from_table(true), GeomaskParams(), Rng(5),
                               clusters=set(true.role_column("cluster")))
    out = apply_mask(true, masked)
    row_share = float((out.data.zip_code != true.data.zip_code).mean())
    sizes = true.data.groupby("cluster").size()
    flagged = {d.cluster for d in masked.log if d.zip_changed}
    assert row_share == pytest.approx(sizes[sorted(flagged)].sum() / sizes.sum())
