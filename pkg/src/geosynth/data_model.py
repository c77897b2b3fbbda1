"""Tables, schemas, constraints and geography shared by every stage.

Categorical cells are stored as strings, continuous cells as float64 with NaN
for absent values. The distinguished non-response label :data:`MISSING` is part
of every categorical attribute's label set.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DegeneratePolygon, ParseError, SchemaMismatch, SpecInvalid

MISSING = "NA"

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

# "urban" marks the urban/rural flag consumed by the displacement step.
GEO_ROLES = ("stratum", "cluster", "zip_code", "admin_area", "household", "weight", "urban")
PROVENANCES = ("true", "geomasked", "synthetic", "population")


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str
    classes: tuple = ()
    bounds: tuple | None = None
    geo_role: str | None = None
    integer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise SpecInvalid(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.geo_role is not None and self.geo_role not in GEO_ROLES:
            raise SpecInvalid(f"attribute {self.name!r}: unknown geo role {self.geo_role!r}")
        if self.kind == CATEGORICAL:
            if not self.classes and self.geo_role is None:
                raise SpecInvalid(f"categorical attribute {self.name!r} declares no classes")
            if self.bounds is not None:
                raise SpecInvalid(f"categorical attribute {self.name!r} cannot carry bounds")
        elif self.bounds is not None:
            lo, hi = self.bounds
            if not lo <= hi:
                raise SpecInvalid(f"attribute {self.name!r}: bounds {self.bounds} have lo > hi")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def labels(self) -> tuple:
        """Declared classes plus the missing label (empty for open id columns)."""
        if not self.is_categorical or not self.classes:
            return ()
        if MISSING in self.classes:
            return self.classes
        return self.classes + (MISSING,)

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.classes:
            out["classes"] = list(self.classes)
        if self.bounds is not None:
            out["bounds"] = list(self.bounds)
        if self.geo_role is not None:
            out["geo_role"] = self.geo_role
        if self.integer:
            out["integer"] = True
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "AttributeSpec":
        try:
            return cls(
                name=obj["name"],
                kind=obj["kind"],
                classes=tuple(obj.get("classes") or ()),
                bounds=tuple(obj["bounds"]) if obj.get("bounds") is not None else None,
                geo_role=obj.get("geo_role"),
                integer=bool(obj.get("integer", False)),
            )
        except KeyError as exc:
            raise SpecInvalid(f"schema entry missing field {exc}") from None


@dataclass(frozen=True)
class Schema:
    attributes: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SpecInvalid(f"duplicate attribute names in schema: {names}")
        roles = [a.geo_role for a in self.attributes if a.geo_role]
        if len(set(roles)) != len(roles):
            raise SpecInvalid(f"geo role declared more than once: {roles}")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def geo_roles(self) -> dict[str, str]:
        return {a.geo_role: a.name for a in self.attributes if a.geo_role}

    def __getitem__(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaMismatch(f"unknown attribute {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(a.name == name for a in self.attributes)

    def role(self, role: str) -> str:
        try:
            return self.geo_roles[role]
        except KeyError:
            raise SchemaMismatch(f"schema declares no {role!r} column") from None

    def has_role(self, role: str) -> bool:
        return role in self.geo_roles

    @property
    def analysis_attributes(self) -> list[str]:
        """Non-geographic attributes, in schema order."""
        return [a.name for a in self.attributes if a.geo_role is None]

    def subset(self, names: Iterable[str]) -> "Schema":
        wanted = list(names)
        return Schema(tuple(self[n] for n in wanted))

    def extend(self, extra: Iterable[AttributeSpec]) -> "Schema":
        return Schema(self.attributes + tuple(extra))

    def without(self, names: Iterable[str]) -> "Schema":
        drop = set(names)
        return Schema(tuple(a for a in self.attributes if a.name not in drop))

    def to_json(self) -> list:
        return [a.to_json() for a in self.attributes]

    @classmethod
    def from_json(cls, obj) -> "Schema":
        if isinstance(obj, Mapping):
            obj = obj.get("attributes", obj)
        if not isinstance(obj, list):
            raise SpecInvalid("schema JSON must be a list of attribute entries")
        return cls(tuple(AttributeSpec.from_json(o) for o in obj))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"schema {path}: {exc}") from None
        return cls.from_json(obj)


@dataclass(frozen=True, eq=False)
class MicroTable:
    schema: Schema
    data: pd.DataFrame
    provenance: str = "true"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise SpecInvalid(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "data", _coerce_frame(self.schema, self.data))

    @property
    def n(self) -> int:
        return len(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def column(self, name: str) -> pd.Series:
        return self.data[name]

    def role_column(self, role: str) -> pd.Series:
        return self.data[self.schema.role(role)]

    def with_data(self, data: pd.DataFrame, provenance: str | None = None) -> "MicroTable":
        return MicroTable(self.schema, data, provenance or self.provenance)

    def with_provenance(self, provenance: str) -> "MicroTable":
        return MicroTable(self.schema, self.data, provenance)

    def add_columns(self, specs: Sequence[AttributeSpec], columns: Mapping[str, Sequence]) -> "MicroTable":
        data = self.data.copy()
        for spec in specs:
            data[spec.name] = list(columns[spec.name])
        return MicroTable(self.schema.extend(specs), data, self.provenance)

    def select(self, mask) -> "MicroTable":
        return MicroTable(self.schema, self.data.loc[np.asarray(mask, dtype=bool)], self.provenance)


def _coerce_frame(schema: Schema, data: pd.DataFrame) -> pd.DataFrame:
    cols = list(data.columns)
    unknown = [c for c in cols if c not in schema]
    if unknown:
        raise SchemaMismatch(f"columns not declared in schema: {unknown}")
    absent = [n for n in schema.names if n not in cols]
    if absent:
        raise SchemaMismatch(f"schema attributes missing from table: {absent}")
    out = {}
    for spec in schema.attributes:
        col = data[spec.name]
        if spec.is_categorical:
            values = col.astype(object).where(col.notna(), MISSING).map(str)
            labels = spec.labels
            if labels:
                bad = ~values.isin(labels)
                if bad.any():
                    raise SchemaMismatch(
                        f"attribute {spec.name!r}: undeclared class labels "
                        f"{sorted(set(values[bad]))[:5]}"
                    )
            out[spec.name] = values.to_numpy(dtype=object)
        else:
            values = pd.to_numeric(col, errors="coerce").astype(float)
            arr = values.to_numpy()
            present = ~np.isnan(arr)
            if spec.bounds is not None:
                lo, hi = spec.bounds
                if np.any((arr[present] < lo) | (arr[present] > hi)):
                    raise SchemaMismatch(f"attribute {spec.name!r}: values outside bounds {spec.bounds}")
            if spec.geo_role == "weight" and np.any(~(arr > 0)):
                raise SchemaMismatch("sampling weights must be strictly positive")
            out[spec.name] = arr
    return pd.DataFrame(out, columns=schema.names).reset_index(drop=True)


def load_table(csv_path, schema_path, provenance: str = "true") -> MicroTable:
    """Read an RFC-4180 CSV and validate it against its JSON schema sidecar."""
    schema = schema_path if isinstance(schema_path, Schema) else Schema.load(schema_path)
    try:
        raw = pd.read_csv(csv_path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ParseError(f"{csv_path}: {exc}") from None
    unknown = [c for c in raw.columns if c not in schema]
    if unknown:
        raise SchemaMismatch(f"{csv_path}: unknown columns {unknown}")
    for spec in schema.attributes:
        if spec.name not in raw.columns:
            raise SchemaMismatch(f"{csv_path}: missing column {spec.name!r}")
        if spec.is_categorical:
            raw[spec.name] = raw[spec.name].replace("", MISSING)
        else:
            text = raw[spec.name].str.strip()
            parsed = np.empty(len(text))
            # python float() is correctly rounded; pandas' fast parser is not
            for row, cell in enumerate(text):
                try:
                    parsed[row] = float(cell) if cell else np.nan
                except ValueError:
                    raise ParseError(
                        f"{csv_path}: row {row + 1} column {spec.name!r}: cannot parse {cell!r}"
                    ) from None
            raw[spec.name] = parsed
    return MicroTable(schema, raw[schema.names], provenance)


def format_float(value: float, integer: bool = False) -> str:
    if value != value:
        return ""
    if integer or float(value).is_integer() and abs(value) < 1e15:
        return str(int(round(value)))
    return repr(float(value))


def table_to_frame(table: MicroTable) -> pd.DataFrame:
    """String-formatted copy of the table, as written to CSV."""
    out = {}
    for spec in table.schema.attributes:
        col = table.data[spec.name]
        if spec.is_categorical:
            out[spec.name] = col.astype(str)
        else:
            out[spec.name] = [format_float(v, spec.integer) for v in col.to_numpy()]
    return pd.DataFrame(out, columns=table.schema.names)


def write_table(table: MicroTable, csv_path, schema_path=None) -> None:
    frame = table_to_frame(table)
    frame.to_csv(csv_path, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    if schema_path is not None:
        table.schema.save(schema_path)


# ----------------------------------------------------------------------------- constraints


@dataclass(frozen=True)
class RangeConstraint:
    attribute: str
    lo: float = -math.inf
    hi: float = math.inf

    @property
    def name(self) -> str:
        return f"range({self.attribute})"

    @property
    def attributes(self) -> tuple:
        return (self.attribute,)

    def holds(self, frame: pd.DataFrame) -> np.ndarray:
        v = frame[self.attribute].to_numpy(dtype=float)
        return (v >= self.lo) & (v <= self.hi)


@dataclass(frozen=True)
class LinearSumConstraint:
    lhs: tuple
    rhs: str
    tol: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "lhs", tuple(self.lhs))

    @property
    def name(self) -> str:
        return f"sum({'+'.join(self.lhs)}={self.rhs})"

    @property
    def attributes(self) -> tuple:
        return self.lhs + (self.rhs,)

    def holds(self, frame: pd.DataFrame) -> np.ndarray:
        total = np.zeros(len(frame))
        for col in self.lhs:
            total = total + frame[col].to_numpy(dtype=float)
        return np.abs(total - frame[self.rhs].to_numpy(dtype=float)) <= self.tol


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def __iter__(self):
        return iter(self.constraints)

    def __len__(self) -> int:
        return len(self.constraints)

    def validate(self, schema: Schema) -> None:
        for c in self.constraints:
            for name in c.attributes:
                if name not in schema:
                    raise SchemaMismatch(f"constraint {c.name} references unknown attribute {name!r}")
                if schema[name].is_categorical:
                    raise SchemaMismatch(f"constraint {c.name} references categorical attribute {name!r}")

    def merged(self, other: "ConstraintSet") -> "ConstraintSet":
        return ConstraintSet(self.constraints + tuple(c for c in other.constraints if c not in self.constraints))

    @classmethod
    def from_schema_bounds(cls, schema: Schema, attributes: Iterable[str] | None = None) -> "ConstraintSet":
        names = set(attributes) if attributes is not None else None
        out = []
        for a in schema.attributes:
            if a.bounds is not None and a.geo_role is None and (names is None or a.name in names):
                out.append(RangeConstraint(a.name, a.bounds[0], a.bounds[1]))
        return cls(tuple(out))

    def to_json(self) -> dict:
        items = []
        for c in self.constraints:
            if isinstance(c, RangeConstraint):
                items.append({"type": "range", "attribute": c.attribute, "lo": c.lo, "hi": c.hi})
            else:
                items.append({"type": "linear_sum", "lhs": list(c.lhs), "rhs": c.rhs})
        return {"constraints": items}

    @classmethod
    def from_json(cls, obj) -> "ConstraintSet":
        if isinstance(obj, Mapping):
            obj = obj.get("constraints", [])
        out = []
        for item in obj:
            kind = item.get("type")
            if kind == "range":
                lo = item.get("lo")
                hi = item.get("hi")
                out.append(RangeConstraint(item["attribute"],
                                           -math.inf if lo is None else float(lo),
                                           math.inf if hi is None else float(hi)))
            elif kind == "linear_sum":
                out.append(LinearSumConstraint(tuple(item["lhs"]), item["rhs"]))
            else:
                raise SpecInvalid(f"unknown constraint type {kind!r}")
        return cls(tuple(out))

    @classmethod
    def load(cls, path) -> "ConstraintSet":
        return cls.from_json(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------- geometry


def _as_ring(coords) -> np.ndarray:
    ring = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 3:
        raise DegeneratePolygon(f"polygon ring has {len(ring)} distinct vertices, need >= 3")
    return ring


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


def ring_is_simple(ring: np.ndarray) -> bool:
    n = len(ring)
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a1, a2, ring[j], ring[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Polygon:
    exterior: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))
        lo = self.exterior.min(axis=0)
        hi = self.exterior.max(axis=0)
        object.__setattr__(self, "_bbox", (lo[0], lo[1], hi[0], hi[1]))

    @property
    def bbox(self) -> tuple:
        return self._bbox

    def area(self) -> float:
        def shoelace(r):
            x, y = r[:, 0], r[:, 1]
            return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

        return shoelace(self.exterior) - sum(shoelace(h) for h in self.holes)

    def is_simple(self) -> bool:
        return all(ring_is_simple(r) for r in (self.exterior,) + self.holes)

    def contains(self, point) -> bool:
        return point_in_polygon(point, self)

    def to_coordinates(self) -> list:
        rings = []
        for r in (self.exterior,) + self.holes:
            pts = [[float(x), float(y)] for x, y in r]
            rings.append(pts + [pts[0]])
        return rings

    @classmethod
    def box(cls, x0: float, y0: float, x1: float, y1: float) -> "Polygon":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def _on_segment(px, py, ax, ay, bx, by, eps) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    scale = max(1.0, abs(bx - ax) + abs(by - ay))
    if abs(cross) > eps * scale:
        return False
    return (min(ax, bx) - eps <= px <= max(ax, bx) + eps) and (min(ay, by) - eps <= py <= max(ay, by) + eps)


def _ring_position(px: float, py: float, ring: np.ndarray, eps: float) -> int:
    """1 strictly inside, 0 on the boundary, -1 outside (even-odd rule)."""
    inside = False
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        if _on_segment(px, py, ax, ay, bx, by, eps):
            return 0
        if (ay > py) != (by > py):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_cross:
                inside = not inside
    return 1 if inside else -1


def point_in_polygon(p, poly, eps: float = 1e-9) -> bool:
    """Ray-casting containment; points on any boundary count as inside."""
    if not isinstance(poly, Polygon):
        poly = Polygon(np.asarray(poly, dtype=float))
    px, py = float(p[0]), float(p[1])
    x0, y0, x1, y1 = poly.bbox
    if px < x0 - eps or px > x1 + eps or py < y0 - eps or py > y1 + eps:
        return False
    if _ring_position(px, py, poly.exterior, eps) < 0:
        return False
    for hole in poly.holes:
        if _ring_position(px, py, hole, eps) > 0:
            return False
    return True


def locate(point, areas: Mapping[str, Polygon]) -> str | None:
    """First area id (sorted order) whose polygon contains the point."""
    for area_id in sorted(areas):
        if point_in_polygon(point, areas[area_id]):
            return area_id
    return None


@dataclass(frozen=True, eq=False)
class GeoContext:
    cluster_points: Mapping[str, tuple]
    admin_areas: Mapping[str, Polygon]
    zip_areas: Mapping[str, Polygon]
    cluster_admin: Mapping[str, str] = field(default=None, compare=False)
    cluster_zip: Mapping[str, str] = field(default=None, compare=False)

    def __post_init__(self):
        pts = {str(k): (float(v[0]), float(v[1])) for k, v in self.cluster_points.items()}
        object.__setattr__(self, "cluster_points", dict(sorted(pts.items())))
        object.__setattr__(self, "admin_areas", dict(sorted((str(k), v) for k, v in self.admin_areas.items())))
        object.__setattr__(self, "zip_areas", dict(sorted((str(k), v) for k, v in self.zip_areas.items())))
        if self.cluster_admin is None:
            object.__setattr__(self, "cluster_admin", self._contain(self.admin_areas, "admin"))
        if self.cluster_zip is None:
            object.__setattr__(self, "cluster_zip", self._contain(self.zip_areas, "zip"))

    def _contain(self, areas, level) -> dict:
        out = {}
        for cid, pt in self.cluster_points.items():
            area = locate(pt, areas)
            if area is None:
                raise SpecInvalid(f"cluster {cid} at {pt} lies in no {level} area")
            out[cid] = area
        return out

    def containment_counts(self, level: str = "admin") -> dict[str, int]:
        mapping = self.cluster_admin if level == "admin" else self.cluster_zip
        areas = self.admin_areas if level == "admin" else self.zip_areas
        counts = {a: 0 for a in areas}
        for area in mapping.values():
            counts[area] += 1
        return counts

    def to_geojson(self) -> dict:
        feats = []
        for level, areas in (("admin", self.admin_areas), ("zip", self.zip_areas)):
            for area_id, poly in areas.items():
                feats.append({
                    "type": "Feature",
                    "properties": {"area_id": area_id, "level": level},
                    "geometry": {"type": "Polygon", "coordinates": poly.to_coordinates()},
                })
        for cid, (x, y) in self.cluster_points.items():
            feats.append({
                "type": "Feature",
                "properties": {"area_id": cid, "level": "cluster"},
                "geometry": {"type": "Point", "coordinates": [x, y]},
            })
        return {"type": "FeatureCollection", "features": feats}

    @classmethod
    def from_geojson(cls, obj: Mapping) -> "GeoContext":
        if obj.get("type") != "FeatureCollection":
            raise ParseError("geometry must be a GeoJSON FeatureCollection")
        admin, zips, points = {}, {}, {}
        for feat in obj.get("features", []):
            props = feat.get("properties") or {}
            geom = feat.get("geometry") or {}
            level = props.get("level")
            area_id = str(props.get("area_id"))
            if level in ("admin", "zip"):
                if geom.get("type") != "Polygon":
                    raise ParseError(f"area {area_id}: expected Polygon geometry")
                rings = geom["coordinates"]
                poly = Polygon(np.asarray(rings[0], dtype=float), tuple(np.asarray(h, dtype=float) for h in rings[1:]))
                if not poly.is_simple():
                    raise DegeneratePolygon(f"area {area_id}: ring self-intersects")
                (admin if level == "admin" else zips)[area_id] = poly
            elif level == "cluster":
                points[area_id] = tuple(geom["coordinates"][:2])
            else:
                raise ParseError(f"feature {area_id}: unknown level {level!r}")
        return cls(points, admin, zips)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_geojson()) + "\n")

    @classmethod
    def load(cls, path) -> "GeoContext":
        try:
            return cls.from_geojson(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None

    def with_points(self, points: Mapping[str, tuple]) -> "GeoContext":
        return replace(self, cluster_points=dict(points), cluster_admin=None, cluster_zip=None)
