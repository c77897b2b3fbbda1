"""Pseudo-population generation and stratified two-stage cluster sampling.

The population is a stand-in for a census: strata (region x urban/rural) hold
admin areas tiled by square zip areas, each zip holds a few PSUs (clusters)
with households of individuals. Attributes are driven by a latent deprivation
score that varies by stratum, zip and cluster, so small-area structure exists
for the downstream risk/utility measures to pick up.

Samples follow the household-survey design: PSUs drawn with probability
proportional to household count (systematic PPS on a randomly ordered list),
then a fixed number of households by simple random sampling without
replacement. Weights are ``1 / (pi_j * pi_h|j)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.stats import norm

from .data_model import (
    CATEGORICAL,
    CONTINUOUS,
    MISSING,
    AttributeSpec,
    GeoContext,
    MicroTable,
    Polygon,
    Schema,
)
from .errors import InsufficientHouseholds, InsufficientPsus, SpecInvalid
from .rng import Rng

STRATUM, ADMIN, ZIP, CLUSTER, HOUSEHOLD, AREA_TYPE, WEIGHT = (
    "stratum", "admin_area", "zip_code", "cluster", "household", "area_type", "weight",
)


@dataclass
class AttributeGenerator:
    """How one attribute is drawn from the latent deprivation model."""

    name: str
    kind: str
    classes: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    mean: float = 0.0
    sd: float = 1.0
    bounds: list | None = None
    integer: bool = False
    loading: float = 0.0
    stratum_sd: float = 0.0
    missing: float = 0.0
    level: str = "individual"

    def validate(self):
        if self.kind == CATEGORICAL:
            if len(self.classes) != len(self.probs) or not self.classes:
                raise SpecInvalid(f"{self.name}: classes and probs must be non-empty and aligned")
            if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-6:
                raise SpecInvalid(f"{self.name}: class probabilities must sum to 1")
        elif self.kind == CONTINUOUS:
            if self.sd <= 0:
                raise SpecInvalid(f"{self.name}: sd must be positive")
        else:
            raise SpecInvalid(f"{self.name}: unknown kind {self.kind!r}")
        if not 0 <= self.missing < 1:
            raise SpecInvalid(f"{self.name}: missing rate must be in [0, 1)")
        if self.level not in ("individual", "household"):
            raise SpecInvalid(f"{self.name}: level must be individual or household")

    def spec(self) -> AttributeSpec:
        if self.kind == CATEGORICAL:
            return AttributeSpec(self.name, CATEGORICAL, tuple(self.classes))
        return AttributeSpec(self.name, CONTINUOUS, bounds=tuple(self.bounds) if self.bounds else None,
                             integer=self.integer)


@dataclass
class PopulationSpec:
    regions: int = 6
    area_types: list = field(default_factory=lambda: ["urban", "rural"])
    admin_per_stratum: int = 2
    zips_per_admin: int = 2
    psus_per_zip: int = 2
    households_per_psu_mean: float = 16.0
    households_per_psu_sd: float = 5.0
    households_per_psu_min: int = 4
    household_size_probs: list = field(default_factory=lambda: [0.12, 0.2, 0.24, 0.2, 0.12, 0.07, 0.05])
    household_size_loading: float = 0.6
    household_size_attribute: str = "hh_size"
    zip_side_m: dict = field(default_factory=lambda: {"urban": 3000.0, "rural": 7500.0})
    stratum_gap_m: float = 20000.0
    area_type_shift: dict = field(default_factory=lambda: {"urban": -0.5, "rural": 0.5})
    stratum_effect_sd: float = 0.3
    zip_effect_sd: float = 0.6
    cluster_effect_sd: float = 0.2
    attributes: list = field(default_factory=list)
    correlations: list = field(default_factory=list)

    def __post_init__(self):
        self.attributes = [a if isinstance(a, AttributeGenerator) else AttributeGenerator(**a)
                           for a in self.attributes]

    def validate(self) -> None:
        for name in ("regions", "admin_per_stratum", "zips_per_admin", "psus_per_zip"):
            if getattr(self, name) < 1:
                raise SpecInvalid(f"{name} must be >= 1")
        if self.households_per_psu_min < 1 or self.households_per_psu_mean <= 0:
            raise SpecInvalid("PSU household counts must be positive")
        p = np.asarray(self.household_size_probs, dtype=float)
        if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise SpecInvalid("household size probabilities must sum to 1")
        for t in self.area_types:
            if self.zip_side_m.get(t, 0) <= 0:
                raise SpecInvalid(f"zip side for area type {t!r} must be positive")
            if t not in self.area_type_shift:
                raise SpecInvalid(f"no deprivation shift for area type {t!r}")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names) or self.household_size_attribute in names:
            raise SpecInvalid("attribute names must be unique and distinct from the household size column")
        for a in self.attributes:
            a.validate()
        for c in self.correlations:
            if c["a"] not in names or c["b"] not in names or not -1 < c["rho"] < 1:
                raise SpecInvalid(f"bad correlation knob {c}")

    @property
    def max_household_size(self) -> int:
        return len(self.household_size_probs)

    def to_json(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "PopulationSpec":
        try:
            spec = cls(**obj)
        except TypeError as exc:
            raise SpecInvalid(str(exc)) from None
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "PopulationSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "PopulationSpec":
        text = resources.files("geosynth.data").joinpath("population_default.json").read_text()
        return cls.from_json(json.loads(text))

    def schema(self) -> Schema:
        strata = [stratum_id(r, t) for r in range(self.regions) for t in self.area_types]
        zips = [f"Z{k:03d}" for k in range(len(strata) * self.admin_per_stratum * self.zips_per_admin)]
        admins = [f"A{a:02d}" for a in range(len(strata) * self.admin_per_stratum)]
        geo = [
            AttributeSpec(STRATUM, CATEGORICAL, tuple(strata), geo_role="stratum"),
            AttributeSpec(ADMIN, CATEGORICAL, tuple(admins), geo_role="admin_area"),
            AttributeSpec(ZIP, CATEGORICAL, tuple(zips), geo_role="zip_code"),
            AttributeSpec(CLUSTER, CATEGORICAL, geo_role="cluster"),
            AttributeSpec(HOUSEHOLD, CATEGORICAL, geo_role="household"),
            AttributeSpec(AREA_TYPE, CATEGORICAL, tuple(self.area_types), geo_role="urban"),
        ]
        hh = AttributeSpec(self.household_size_attribute, CONTINUOUS,
                           bounds=(1.0, float(self.max_household_size)), integer=True)
        return Schema(tuple(geo) + (hh,) + tuple(a.spec() for a in self.attributes))


def stratum_id(region: int, area_type: str) -> str:
    return f"R{region + 1}{area_type[0].upper()}"


def _latent_correlation(spec: PopulationSpec) -> np.ndarray:
    names = [a.name for a in spec.attributes]
    r = np.eye(len(names))
    for c in spec.correlations:
        i, j = names.index(c["a"]), names.index(c["b"])
        r[i, j] = r[j, i] = c["rho"]
    w, v = np.linalg.eigh(r)
    if w.min() < 1e-8:
        w = np.clip(w, 1e-8, None)
        r = (v * w) @ v.T
        d = np.sqrt(np.diag(r))
        r = r / np.outer(d, d)
    return r


def _uniform_point(poly: Polygon, gen: np.random.Generator) -> tuple:
    x0, y0, x1, y1 = poly.bbox
    while True:
        p = (gen.uniform(x0, x1), gen.uniform(y0, y1))
        if poly.contains(p):
            return p


def generate_population(spec: PopulationSpec, rng: Rng) -> tuple[MicroTable, GeoContext]:
    """Simulate a census-like population and its geography."""
    spec.validate()
    g_geo = rng.child("geography").generator()
    g_units = rng.child("units").generator()
    g_attr = rng.child("attributes").generator()

    # geography ---------------------------------------------------------------
    admin_areas, zip_areas, points = {}, {}, {}
    units = []  # (stratum, admin, zip, cluster, area_type, deprivation)
    shift_sq = np.mean([spec.area_type_shift[t] ** 2 for t in spec.area_types])
    x_offset = 0.0
    a_idx = k_idx = c_idx = 0
    strata_ids = []
    for r in range(spec.regions):
        for t in spec.area_types:
            s = stratum_id(r, t)
            strata_ids.append(s)
            side = float(spec.zip_side_m[t])
            d_stratum = spec.area_type_shift[t] + g_units.normal(0, spec.stratum_effect_sd)
            n_cols = int(np.ceil(np.sqrt(spec.zips_per_admin)))
            n_rows = int(np.ceil(spec.zips_per_admin / n_cols))
            for _ in range(spec.admin_per_stratum):
                a = f"A{a_idx:02d}"
                a_idx += 1
                width = n_cols * side
                # zips fill an n_rows x n_cols grid row-major; a partial last row gives an L-shaped admin
                corners = [(x_offset, 0.0), (x_offset + width, 0.0)]
                for z in range(spec.zips_per_admin):
                    k = f"Z{k_idx:03d}"
                    k_idx += 1
                    zx = x_offset + (z % n_cols) * side
                    zy = (z // n_cols) * side
                    zip_areas[k] = Polygon.box(zx, zy, zx + side, zy + side)
                last = spec.zips_per_admin - (n_rows - 1) * n_cols
                if last == n_cols:
                    corners += [(x_offset + width, n_rows * side), (x_offset, n_rows * side)]
                else:
                    corners += [(x_offset + width, (n_rows - 1) * side),
                                (x_offset + last * side, (n_rows - 1) * side),
                                (x_offset + last * side, n_rows * side), (x_offset, n_rows * side)]
                admin_areas[a] = Polygon(np.asarray(corners))
                for z in range(spec.zips_per_admin):
                    k = f"Z{k_idx - spec.zips_per_admin + z:03d}"
                    d_zip = d_stratum + g_units.normal(0, spec.zip_effect_sd)
                    for _ in range(spec.psus_per_zip):
                        c = f"C{c_idx:04d}"
                        c_idx += 1
                        points[c] = _uniform_point(zip_areas[k], g_geo)
                        d_cluster = d_zip + g_units.normal(0, spec.cluster_effect_sd)
                        units.append((s, a, k, c, t, d_cluster))
                x_offset += width
            x_offset += spec.stratum_gap_m
    geo = GeoContext(points, admin_areas, zip_areas)

    var_d = shift_sq + spec.stratum_effect_sd ** 2 + spec.zip_effect_sd ** 2 + spec.cluster_effect_sd ** 2

    # households --------------------------------------------------------------
    size_cum = np.cumsum(spec.household_size_probs)
    size_cum[-1] = 1.0
    size_sd = np.sqrt(spec.household_size_loading ** 2 * var_d + 1.0)
    rows_geo, hh_dep, hh_sizes = [], [], []
    h_idx = 0
    for s, a, k, c, t, d in units:
        n_hh = max(spec.households_per_psu_min,
                   int(round(g_units.normal(spec.households_per_psu_mean, spec.households_per_psu_sd))))
        latent = (spec.household_size_loading * d + g_units.standard_normal(n_hh)) / size_sd
        sizes = np.searchsorted(size_cum, norm.cdf(latent), side="right") + 1
        sizes = np.minimum(sizes, spec.max_household_size)
        for size in sizes:
            h = f"H{h_idx:05d}"
            h_idx += 1
            rows_geo.extend([(s, a, k, c, h, t)] * int(size))
            hh_dep.extend([d] * int(size))
            hh_sizes.extend([int(size)] * int(size))

    n = len(rows_geo)
    frame = pd.DataFrame(rows_geo, columns=[STRATUM, ADMIN, ZIP, CLUSTER, HOUSEHOLD, AREA_TYPE])
    frame[spec.household_size_attribute] = np.asarray(hh_sizes, dtype=float)
    dep = np.asarray(hh_dep)

    # attributes --------------------------------------------------------------
    corr = _latent_correlation(spec)
    noise = g_attr.multivariate_normal(np.zeros(len(corr)), corr, size=n, method="cholesky")
    head = frame.groupby(HOUSEHOLD, sort=False).cumcount().to_numpy() == 0
    head_index = np.maximum.accumulate(np.where(head, np.arange(n), 0))
    strata_pos = {s: i for i, s in enumerate(strata_ids)}
    stratum_idx = frame[STRATUM].map(strata_pos).to_numpy()
    for col, gen_spec in enumerate(spec.attributes):
        e = noise[:, col]
        if gen_spec.level == "household":
            e = e[head_index]
        s_shift = g_attr.normal(0, gen_spec.stratum_sd, size=len(strata_ids)) if gen_spec.stratum_sd > 0 else np.zeros(len(strata_ids))
        latent = gen_spec.loading * dep + s_shift[stratum_idx] + e
        sd_tot = np.sqrt(gen_spec.loading ** 2 * var_d + gen_spec.stratum_sd ** 2 + 1.0)
        z = latent / sd_tot
        miss = g_attr.random(n) < gen_spec.missing
        if gen_spec.level == "household":
            miss = miss[head_index]
        if gen_spec.kind == CATEGORICAL:
            cum = np.cumsum(gen_spec.probs)
            cum[-1] = 1.0
            idx = np.minimum(np.searchsorted(cum, norm.cdf(z), side="right"), len(cum) - 1)
            values = np.asarray(gen_spec.classes, dtype=object)[idx]
            values[miss] = MISSING
        else:
            values = gen_spec.mean + gen_spec.sd * z
            if gen_spec.bounds:
                values = np.clip(values, gen_spec.bounds[0], gen_spec.bounds[1])
            if gen_spec.integer:
                values = np.round(values)
            values = values.astype(float)
            values[miss] = np.nan
        frame[gen_spec.name] = values

    table = MicroTable(spec.schema(), frame, provenance="population")
    return table, geo


# ----------------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplingDesign:
    n_per_stratum: int | Mapping = 6
    m: int = 10
    min_psu_households: int = 10
    pps_measure: str = "household_count"

    def n_for(self, stratum: str) -> int:
        if isinstance(self.n_per_stratum, Mapping):
            return int(self.n_per_stratum[stratum])
        return int(self.n_per_stratum)

    def validate(self) -> None:
        if self.m < 1:
            raise SpecInvalid("households per PSU must be >= 1")
        if self.pps_measure != "household_count":
            raise SpecInvalid(f"unsupported PPS measure {self.pps_measure!r}")
        values = self.n_per_stratum.values() if isinstance(self.n_per_stratum, Mapping) else [self.n_per_stratum]
        if any(int(v) < 1 for v in values):
            raise SpecInvalid("at least one PSU per stratum is required")

    def to_json(self) -> dict:
        n = dict(self.n_per_stratum) if isinstance(self.n_per_stratum, Mapping) else self.n_per_stratum
        return {"n_per_stratum": n, "m": self.m, "min_psu_households": self.min_psu_households,
                "pps_measure": self.pps_measure}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SamplingDesign":
        return cls(**obj)


def systematic_pps(sizes: np.ndarray, n: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Systematic PPS without replacement on a random permutation.

    Units whose size would give an inclusion probability >= 1 are taken with
    certainty and removed before the systematic pass. Returns the selected unit
    indices (sorted) and the inclusion probability of every unit.
    """
    sizes = np.asarray(sizes, dtype=float)
    if n > len(sizes):
        raise InsufficientPsus(f"cannot select {n} of {len(sizes)} units")
    pi = np.zeros(len(sizes))
    remaining = np.arange(len(sizes))
    certain = []
    n_left = n
    while n_left > 0:
        total = sizes[remaining].sum()
        big = n_left * sizes[remaining] >= total
        if not big.any():
            break
        certain.extend(remaining[big].tolist())
        n_left -= int(big.sum())
        remaining = remaining[~big]
    certain = np.asarray(sorted(certain), dtype=int)
    pi[certain] = 1.0
    picks = np.array([], dtype=int)
    if n_left > 0:
        total = sizes[remaining].sum()
        pi[remaining] = n_left * sizes[remaining] / total
        order = gen.permutation(remaining)
        cum = np.cumsum(sizes[order])
        step = total / n_left
        points = gen.uniform(0.0, step) + step * np.arange(n_left)
        picks = order[np.searchsorted(cum, points, side="right")]
    return np.sort(np.concatenate([certain, picks])).astype(int), pi


@dataclass(frozen=True, eq=False)
class SampleDraw:
    survey: MicroTable
    selected: pd.DataFrame  # one row per selected cluster
    excluded_clusters: tuple

    @property
    def selected_clusters(self) -> list[str]:
        return self.selected[CLUSTER].tolist()

    def manifest(self, seed=None, design: SamplingDesign | None = None) -> dict:
        return {
            "seed": seed,
            "design": design.to_json() if design else None,
            "n_individuals": int(self.survey.n),
            "selected": [
                {k: (float(v) if isinstance(v, (float, np.floating)) else (int(v) if isinstance(v, (np.integer,)) else v))
                 for k, v in row.items()}
                for row in self.selected.to_dict("records")
            ],
            "excluded_clusters": list(self.excluded_clusters),
        }


def survey_schema(population_schema: Schema) -> Schema:
    if population_schema.has_role("weight"):
        return population_schema
    return population_schema.extend([AttributeSpec(WEIGHT, CONTINUOUS, geo_role="weight")])


def draw_sample(pop: MicroTable, geo: GeoContext | None, design: SamplingDesign, rng: Rng) -> SampleDraw:
    """Stratified two-stage cluster sample with household-level weights."""
    design.validate()
    schema = pop.schema
    s_col, c_col, h_col = schema.role("stratum"), schema.role("cluster"), schema.role("household")
    df = pop.data
    hh = df[[s_col, c_col, h_col]].drop_duplicates()
    if geo is not None:
        unknown = set(hh[c_col]) - set(geo.cluster_points)
        if unknown:
            raise InsufficientPsus(f"clusters without geography: {sorted(unknown)[:5]}")
    psu_sizes = hh.groupby([s_col, c_col], sort=True).size()

    chosen_households = []
    selected_rows = []
    excluded = []
    for stratum in sorted(psu_sizes.index.get_level_values(0).unique()):
        sizes = psu_sizes.loc[stratum]
        small = sizes[sizes < design.min_psu_households]
        excluded.extend(small.index.tolist())
        eligible = sizes[sizes >= design.min_psu_households]
        n_s = design.n_for(stratum)
        if len(eligible) < n_s:
            raise InsufficientPsus(
                f"stratum {stratum}: {len(eligible)} eligible PSUs, {n_s} required"
            )
        gen = rng.child("stratum", stratum).generator()
        picks, pi = systematic_pps(eligible.to_numpy(), n_s, gen)
        for i in picks:
            cluster = eligible.index[i]
            m_j = int(eligible.iloc[i])
            if m_j < design.m:
                raise InsufficientHouseholds(f"cluster {cluster}: {m_j} households, {design.m} required")
            households = np.sort(hh.loc[(hh[s_col] == stratum) & (hh[c_col] == cluster), h_col].to_numpy())
            take = np.sort(gen.choice(households, size=design.m, replace=False))
            pi_j = float(pi[i])
            pi_h = design.m / m_j
            selected_rows.append({
                CLUSTER: cluster, STRATUM: stratum, "households": m_j,
                "pi_j": pi_j, "pi_h_given_j": pi_h, "weight": 1.0 / (pi_j * pi_h),
            })
            chosen_households.extend((h, 1.0 / (pi_j * pi_h)) for h in take)

    weights = dict(chosen_households)
    mask = df[h_col].isin(weights)
    data = df.loc[mask].copy()
    data[WEIGHT] = data[h_col].map(weights).astype(float)
    sschema = survey_schema(schema)
    data = data[sschema.names]
    survey = MicroTable(sschema, data, provenance="true")
    return SampleDraw(survey, pd.DataFrame(selected_rows), tuple(sorted(excluded)))


def horvitz_thompson_population(survey: MicroTable) -> float:
    """HT estimate of the number of individuals (sum of weights over persons)."""
    return float(survey.role_column("weight").sum())


DEFAULT_COVARIATES = (
    ("electricity", "share", "no"),
    ("rooms", "mean", None),
    ("area_type", "share", "urban"),
    ("hh_size", "mean", None),
)


def area_covariates(population: MicroTable, rng: Rng, features=DEFAULT_COVARIATES,
                    noise_sd: float = 0.25) -> pd.DataFrame:
    """Zip-level auxiliary covariates (stand-in for satellite-derived aggregates).

    Each covariate is a census zip aggregate plus Gaussian noise scaled to
    ``noise_sd`` times the aggregate's spread across zips.
    """
    gen = rng.generator()
    z_col = population.schema.role("zip_code")
    df = population.data
    zips = sorted(df[z_col].unique())
    grouped = df.groupby(z_col, sort=True)
    out = pd.DataFrame({"zip_id": zips})
    i = 0
    for col, how, level in features:
        if col not in population.schema:
            continue
        i += 1
        if how == "share":
            values = grouped[col].apply(lambda s: float((s == level).mean()))
        else:
            values = grouped[col].mean()
        values = values.reindex(zips).to_numpy(dtype=float)
        spread = values.std() if values.std() > 0 else 1.0
        out[f"cov_{i}"] = values + gen.normal(0.0, noise_sd * spread, size=len(values))
    return out
