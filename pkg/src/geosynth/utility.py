"""Utility measures: per-zip normalised KL grids, composite indicators, prediction metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .data_model import MISSING, AttributeSpec, MicroTable, Schema
from .errors import SchemaMismatch, SpecInvalid, TooFewAreas

N_BINS = 20
SMOOTHING = 0.5
YES, NO = "1", "0"


# ----------------------------------------------------------------------------- KL


def kl_divergence(p, q) -> float:
    """D_KL(p || q) in bits over cells with p > 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))


def normalized_kl(p, q) -> float:
    return 1.0 / (1.0 + kl_divergence(p, q))


def smoothed(p_counts: np.ndarray, q_counts: np.ndarray) -> np.ndarray:
    """Add a half count to survey cells that are empty where the census is not."""
    q = np.asarray(q_counts, dtype=float).copy()
    q[(q == 0) & (np.asarray(p_counts) > 0)] += SMOOTHING
    return q


def _cell_codes(spec: AttributeSpec, values: pd.Series, edges: np.ndarray | None) -> tuple:
    """Integer cell index per row plus the number of cells."""
    if spec.is_categorical:
        labels = list(spec.labels) if spec.classes else sorted(set(values))
        lookup = {c: i for i, c in enumerate(labels)}
        return values.map(lookup).to_numpy(), len(labels)
    x = values.to_numpy(dtype=float)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, N_BINS - 1)
    idx = np.where(np.isnan(x), N_BINS, idx)  # missing gets its own cell
    return idx, N_BINS + 1


def _bin_edges(census: pd.Series) -> np.ndarray:
    x = census.to_numpy(dtype=float)
    x = x[~np.isnan(x)]
    lo, hi = (float(x.min()), float(x.max())) if len(x) else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, N_BINS + 1)


@dataclass(eq=False)
class KlGrid:
    """Z_KL per attribute (rows) and zip (columns); NaN where the zip has no survey rows."""
    z: pd.DataFrame
    sample_size: pd.Series
    class_count: pd.Series

    @property
    def overall(self) -> float:
        return float(np.nanmean(self.z.to_numpy())) if self.z.notna().any().any() else float("nan")

    def ordered(self) -> pd.DataFrame:
        rows = self.class_count.sort_values(kind="mergesort").index
        cols = self.sample_size.sort_values(ascending=False, kind="mergesort").index
        return self.z.loc[rows, cols]

    def long(self) -> pd.DataFrame:
        out = self.z.rename_axis(index="attribute", columns="zip").stack(future_stack=True).rename("z").reset_index()
        return out.dropna(subset=["z"]).reset_index(drop=True)

    def size_trend(self) -> float:
        """Spearman rank correlation between zip sample size and column-mean Z."""
        col = self.z.mean(axis=0, skipna=True)
        keep = col.notna() & (self.sample_size.reindex(col.index) > 0)
        if keep.sum() < 3:
            return float("nan")
        return float(stats.spearmanr(self.sample_size.reindex(col.index)[keep], col[keep]).statistic)


def kl_grid(survey: MicroTable, census: MicroTable, attributes: Sequence[str] | None = None,
            use_weights: bool = False, zips: Sequence | None = None) -> KlGrid:
    z_col = census.schema.role("zip_code")
    if z_col not in survey.schema:
        raise SchemaMismatch(f"survey lacks zip column {z_col!r}")
    attributes = list(attributes) if attributes is not None else census.schema.analysis_attributes
    for a in attributes:
        if a not in survey.schema:
            raise SchemaMismatch(f"survey lacks attribute {a!r}")
        if survey.schema[a].kind != census.schema[a].kind or survey.schema[a].classes != census.schema[a].classes:
            raise SchemaMismatch(f"attribute {a!r} differs between survey and census")
    zips = sorted(set(census.data[z_col])) if zips is None else list(zips)
    zip_index = {z: i for i, z in enumerate(zips)}
    c_zip = census.data[z_col].map(zip_index).to_numpy()
    s_zip = survey.data[z_col].map(zip_index)
    if s_zip.isna().any():
        raise SchemaMismatch("survey contains zips unknown to the census")
    s_zip = s_zip.to_numpy(dtype=int)
    w = survey.role_column("weight").to_numpy(dtype=float) if use_weights else np.ones(survey.n)
    n_k = np.bincount(s_zip, minlength=len(zips))
    grid = np.full((len(attributes), len(zips)), np.nan)
    n_classes = []
    for r, a in enumerate(attributes):
        spec = census.schema[a]
        edges = None if spec.is_categorical else _bin_edges(census.data[a])
        c_idx, n_cells = _cell_codes(spec, census.data[a], edges)
        s_idx, _ = _cell_codes(spec, survey.data[a], edges)
        n_classes.append(len(spec.classes) if spec.is_categorical else N_BINS)
        P = np.zeros((len(zips), n_cells))
        Q = np.zeros((len(zips), n_cells))
        np.add.at(P, (c_zip, c_idx.astype(int)), 1.0)
        np.add.at(Q, (s_zip, s_idx.astype(int)), w)
        for k in np.flatnonzero(n_k > 0):
            if P[k].sum() == 0:
                continue
            grid[r, k] = normalized_kl(P[k], smoothed(P[k], Q[k]))
    z = pd.DataFrame(grid, index=attributes, columns=zips)
    return KlGrid(z, pd.Series(n_k.astype(float), index=zips), pd.Series(n_classes, index=attributes))


def average_grids(grids: Sequence[KlGrid]) -> KlGrid:
    """Cellwise mean across replicates, ignoring empty cells.

    The sample size of a zip is averaged over the replicates that sampled it,
    matching the cells that contribute to its mean divergence.
    """
    if not grids:
        raise SpecInvalid("no grids to average")
    stack = np.stack([g.z.to_numpy() for g in grids])
    with np.errstate(all="ignore"):
        counts = np.sum(~np.isnan(stack), axis=0)
        mean = np.where(counts > 0, np.nansum(stack, axis=0) / np.maximum(counts, 1), np.nan)
    sizes = pd.concat([g.sample_size for g in grids], axis=1).astype(float)
    size = sizes.where(sizes > 0).mean(axis=1).fillna(0.0)
    first = grids[0]
    return KlGrid(pd.DataFrame(mean, index=first.z.index, columns=first.z.columns), size, first.class_count)


# ----------------------------------------------------------------------------- composite


OPS = {
    "in": lambda x, v: x.isin(list(v)),
    "not_in": lambda x, v: ~x.isin(list(v)),
    "eq": lambda x, v: x == v,
    "lt": lambda x, v: x < v,
    "le": lambda x, v: x <= v,
    "gt": lambda x, v: x > v,
    "ge": lambda x, v: x >= v,
}


@dataclass(frozen=True)
class Indicator:
    name: str
    attribute: str
    op: str
    value: object

    def evaluate(self, frame: pd.DataFrame) -> np.ndarray:
        x = frame[self.attribute]
        return np.asarray(OPS[self.op](x, self.value), dtype=bool)


@dataclass(frozen=True)
class CompositeSpec:
    indicators: tuple
    dimensions: Mapping
    composite: str = "composite"

    def __post_init__(self):
        names = [i.name for i in self.indicators]
        if len(set(names)) != len(names):
            raise SpecInvalid("indicator names must be unique")
        for i in self.indicators:
            if i.op not in OPS:
                raise SpecInvalid(f"indicator {i.name}: unknown operation {i.op!r}")
        if not self.dimensions:
            raise SpecInvalid("composite needs at least one dimension")
        for d, members in self.dimensions.items():
            if not members:
                raise SpecInvalid(f"dimension {d!r} is empty")
            unknown = set(members) - set(names)
            if unknown:
                raise SpecInvalid(f"dimension {d!r} references unknown indicators {sorted(unknown)}")

    @property
    def attributes(self) -> list:
        return sorted({i.attribute for i in self.indicators})

    def columns(self, level: str) -> list:
        if level == "indicator":
            return [i.name for i in self.indicators]
        if level == "dimension":
            return list(self.dimensions)
        if level == "composite":
            return [self.composite]
        raise SpecInvalid(f"unknown level {level!r}")

    def validate(self, schema: Schema) -> None:
        for i in self.indicators:
            if i.attribute not in schema:
                raise SpecInvalid(f"indicator {i.name} references unknown attribute {i.attribute!r}")
            spec = schema[i.attribute]
            if spec.is_categorical:
                vals = i.value if i.op in ("in", "not_in") else [i.value]
                bad = [v for v in vals if v not in spec.labels]
                if bad:
                    raise SpecInvalid(f"indicator {i.name}: classes {bad} not declared for {i.attribute}")
                if i.op not in ("in", "not_in", "eq"):
                    raise SpecInvalid(f"indicator {i.name}: {i.op!r} needs a continuous attribute")

    def to_json(self) -> dict:
        return {"composite": self.composite,
                "indicators": [{"name": i.name, "attribute": i.attribute, "op": i.op, "value": i.value}
                               for i in self.indicators],
                "dimensions": {k: list(v) for k, v in self.dimensions.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CompositeSpec":
        try:
            inds = tuple(Indicator(d["name"], d["attribute"], d["op"], d["value"]) for d in obj["indicators"])
            return cls(inds, {k: tuple(v) for k, v in obj["dimensions"].items()}, obj.get("composite", "composite"))
        except (KeyError, TypeError) as exc:
            raise SpecInvalid(f"malformed composite spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "CompositeSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "CompositeSpec":
        text = resources.files("geosynth").joinpath("data/composite_default.json").read_text()
        return cls.from_json(json.loads(text))


def compute_composite(table: MicroTable, spec: CompositeSpec) -> pd.DataFrame:
    """Boolean indicator, dimension (OR) and composite (OR) columns for each row."""
    spec.validate(table.schema)
    flags = pd.DataFrame({i.name: i.evaluate(table.data) for i in spec.indicators}, index=table.data.index)
    return aggregate(flags, spec)


def aggregate(indicators: pd.DataFrame, spec: CompositeSpec) -> pd.DataFrame:
    """OR indicators into dimensions and dimensions into the composite."""
    out = {name: indicators[name].to_numpy(dtype=bool) for name in spec.columns("indicator")}
    for d, members in spec.dimensions.items():
        out[d] = np.logical_or.reduce([out[m] for m in members])
    out[spec.composite] = np.logical_or.reduce([out[d] for d in spec.dimensions])
    return pd.DataFrame(out, index=indicators.index)


def direct_column(name: str) -> str:
    return f"direct:{name}"


def with_direct_indicators(table: MicroTable, spec: CompositeSpec) -> MicroTable:
    """Append every indicator, dimension and the composite as binary categorical attributes.

    Synthesising this extended table gives the "directly synthesised" values.
    """
    frame = compute_composite(table, spec)
    names = spec.columns("indicator") + spec.columns("dimension") + spec.columns("composite")
    specs = [AttributeSpec(direct_column(n), "categorical", (NO, YES)) for n in names]
    cols = {direct_column(n): np.where(frame[n].to_numpy(), YES, NO).astype(object) for n in names}
    return table.add_columns(specs, cols)


def pearson(a, b) -> float:
    """Pearson correlation; 1 for identical vectors, 0 when either is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        return 1.0
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def binary_zkl(direct: np.ndarray, recomputed: np.ndarray) -> float:
    p = np.array([np.sum(~direct), np.sum(direct)], dtype=float)
    q = np.array([np.sum(~recomputed), np.sum(recomputed)], dtype=float)
    return normalized_kl(p, smoothed(p, q))


def composite_report(synthetic: MicroTable, true_survey: MicroTable, spec: CompositeSpec) -> pd.DataFrame:
    """Direct versus recomputed indicators at indicator, dimension and composite level."""
    recomputed = compute_composite(synthetic, spec)
    truth = compute_composite(true_survey, spec)
    rows = []
    for level in ("indicator", "dimension", "composite"):
        for name in spec.columns(level):
            col = direct_column(name)
            if col in synthetic.schema:
                direct = synthetic.data[col].to_numpy(dtype=object) == YES
            else:
                direct = recomputed[name].to_numpy()
            rec = recomputed[name].to_numpy()
            rows.append({"level": level, "name": name, "rho": pearson(direct, rec),
                         "z_kl": binary_zkl(direct, rec), "incidence_direct": int(direct.sum()),
                         "incidence_recomputed": int(rec.sum()), "incidence_true": int(truth[name].sum())})
    return pd.DataFrame(rows)


def summarize_report(report: pd.DataFrame) -> pd.DataFrame:
    """Mean rho, Z_KL and incidences per level (the table-style view)."""
    cols = ["rho", "z_kl", "incidence_direct", "incidence_recomputed", "incidence_true"]
    return report.groupby("level", sort=False)[cols].mean().reset_index()


# ----------------------------------------------------------------------------- prediction metrics


def prediction_metrics(estimates: Mapping, truth: Mapping, p: int, in_sample: Iterable | None = None) -> dict:
    """Adjusted R^2 over in-sample areas; relative bias and MSE over all areas."""
    areas = sorted(estimates)
    missing = [a for a in areas if a not in truth]
    if missing:
        raise SchemaMismatch(f"no census truth for areas {missing[:5]}")
    est = np.array([estimates[a] for a in areas], dtype=float)
    tru = np.array([truth[a] for a in areas], dtype=float)
    ins = set(areas if in_sample is None else in_sample)
    mask = np.array([a in ins for a in areas])
    n = int(mask.sum())
    if n < p + 2:
        raise TooFewAreas(f"{n} in-sample areas for a model with {p} covariates")
    e, t = est[mask], tru[mask]
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    ss_res = float(np.sum((t - e) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)
    diff = est - tru
    return {"adj_r2": adj, "rel_bias": float(diff.mean() / tru.mean()), "mse": float(np.mean(diff ** 2)),
            "n_in_sample": n, "n_areas": len(areas)}
