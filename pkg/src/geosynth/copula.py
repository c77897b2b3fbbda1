"""Gaussian copula fitting and cluster-conditional synthesis.

A copula is fitted per fitting unit (whole survey, stratum or zip) on the
encoded attributes plus the frequency-encoded cluster column. Synthetic rows
for a cluster are drawn from the latent multivariate normal conditioned on
that cluster's latent code, pushed back through the fitted marginals, decoded,
and filtered by rejection against the declared constraints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import ndtr, ndtri

from .data_model import ConstraintSet, MicroTable, Schema
from .encoding import Encoder, EncodedTable, fit_encoder, transform
from .errors import (
    NumericalFailure,
    RejectionBudgetExceeded,
    SingularConditioner,
    SingularCovariance,
    SmallSample,
    SpecInvalid,
)
from .rng import Rng

# latent values are computed from u clipped into [U_EPS, 1 - U_EPS]
U_EPS = 1e-10
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LEVELS = ("country", "strata", "zip")
MARGINAL_MODES = ("gaussian", "ks_select")
KS_FAMILIES = ("gaussian", "uniform", "beta", "gamma")


# ----------------------------------------------------------------------------- marginals


@dataclass(frozen=True)
class MarginalModel:
    family: str
    params: dict

    def _dist(self):
        p = self.params
        if self.family == "gaussian":
            return stats.norm(loc=p["mean"], scale=p["sd"])
        if self.family == "uniform":
            return stats.uniform(loc=p["lo"], scale=p["hi"] - p["lo"])
        if self.family == "beta":
            return stats.beta(p["a"], p["b"], loc=p["lo"], scale=p["hi"] - p["lo"])
        if self.family == "gamma":
            return stats.gamma(p["shape"], loc=p["lo"], scale=p["scale"])
        raise SpecInvalid(f"no distribution for family {self.family!r}")

    @property
    def is_constant(self) -> bool:
        return self.family == "constant"

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_constant:
            return np.where(x < self.params["value"], 0.0, 1.0)
        if self.family == "gaussian":
            return ndtr((x - self.params["mean"]) / self.params["sd"])
        return self._dist().cdf(x)

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.is_constant:
            return np.full(u.shape, self.params["value"])
        if self.family == "gaussian":
            return self.params["mean"] + self.params["sd"] * ndtri(u)
        return self._dist().ppf(u)

    def mean(self) -> float:
        return float(self.params["value"]) if self.is_constant else float(self._dist().mean())

    def var(self) -> float:
        return 0.0 if self.is_constant else float(self._dist().var())

    def to_json(self) -> dict:
        return {"family": self.family, "params": {k: float(v) for k, v in self.params.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "MarginalModel":
        return cls(obj["family"], dict(obj["params"]))


def _fit_family(x: np.ndarray, family: str) -> MarginalModel | None:
    n = len(x)
    lo_obs, hi_obs = float(x.min()), float(x.max())
    span = hi_obs - lo_obs
    pad = span / n
    m, v = float(x.mean()), float(x.var(ddof=1))
    if family == "gaussian":
        return MarginalModel("gaussian", {"mean": m, "sd": math.sqrt(v)})
    if family == "uniform":
        return MarginalModel("uniform", {"lo": lo_obs - pad, "hi": hi_obs + pad})
    if family == "beta":
        lo, hi = lo_obs - pad, hi_obs + pad
        y_m = (m - lo) / (hi - lo)
        y_v = v / (hi - lo) ** 2
        common = y_m * (1 - y_m) / y_v - 1
        if not common > 0:
            return None
        return MarginalModel("beta", {"a": y_m * common, "b": (1 - y_m) * common, "lo": lo, "hi": hi})
    if family == "gamma":
        lo = lo_obs - pad
        y_m = m - lo
        return MarginalModel("gamma", {"shape": y_m ** 2 / v, "scale": v / y_m, "lo": lo})
    raise SpecInvalid(f"unknown marginal family {family!r}")


def fit_marginal(x, mode: str = "gaussian") -> MarginalModel:
    """Gaussian by moments, or the KS-closest of gaussian/uniform/beta/gamma.

    KS selection compares the observed column with a deterministic sample of
    the candidate (its quantiles at (i - 0.5) / n) by the two-sample statistic.
    """
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    if len(x) == 0:
        raise SmallSample("marginal has no observed values")
    if len(x) < 2 or float(x.max()) == float(x.min()):
        return MarginalModel("constant", {"value": float(x[0])})
    if mode == "gaussian":
        return _fit_family(x, "gaussian")
    if mode != "ks_select":
        raise SpecInvalid(f"unknown marginal mode {mode!r}")
    probe = (np.arange(1, len(x) + 1) - 0.5) / len(x)
    best, best_stat = None, math.inf
    for family in KS_FAMILIES:
        cand = _fit_family(x, family)
        if cand is None:
            continue
        sample = cand.ppf(probe)
        if not np.all(np.isfinite(sample)):
            continue
        stat = stats.ks_2samp(x, sample).statistic
        if stat < best_stat - 1e-12:
            best, best_stat = cand, stat
    return best


# ----------------------------------------------------------------------------- correlation


def repair_psd(sigma: np.ndarray) -> np.ndarray:
    """Nearest-PSD correlation by eigenvalue clipping and unit-diagonal rescale.

    Matrices that are already PSD are returned (symmetrised) unchanged.
    """
    s = (np.asarray(sigma, dtype=float) + np.asarray(sigma, dtype=float).T) / 2.0
    w, v = np.linalg.eigh(s)
    if w.min() >= 0.0:
        return s
    w = np.clip(w, 0.0, None)
    r = (v * w) @ v.T
    d = np.sqrt(np.clip(np.diag(r), 1e-300, None))
    r = r / np.outer(d, d)
    np.fill_diagonal(r, 1.0)
    return (r + r.T) / 2.0


def latent_correlation(z: np.ndarray, constant: Iterable[int] = ()) -> np.ndarray:
    """Pairwise-complete Pearson correlation of latent normal scores."""
    frame = pd.DataFrame(z)
    corr = frame.corr(method="pearson", min_periods=2).to_numpy()
    corr = np.where(np.isfinite(corr), corr, 0.0)
    for i in constant:
        corr[i, :] = 0.0
        corr[:, i] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


# ----------------------------------------------------------------------------- model


@dataclass(frozen=True, eq=False)
class CopulaModel:
    columns: tuple
    marginals: tuple
    corr: np.ndarray
    unit: str = "country"
    cond_index: int | None = None
    constant_columns: tuple = ()
    layout: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.columns)

    def to_json(self) -> dict:
        return {
            "unit": self.unit,
            "columns": list(self.columns),
            "marginals": [m.to_json() for m in self.marginals],
            "corr": self.corr.tolist(),
            "cond_index": self.cond_index,
            "constant_columns": list(self.constant_columns),
            "layout": self.layout,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CopulaModel":
        return cls(tuple(obj["columns"]), tuple(MarginalModel.from_json(m) for m in obj["marginals"]),
                   np.asarray(obj["corr"], dtype=float), obj.get("unit", "country"), obj.get("cond_index"),
                   tuple(obj.get("constant_columns", ())), dict(obj.get("layout", {})))


def probability_integral_transform(model_marginals, x: np.ndarray) -> np.ndarray:
    u = np.column_stack([m.cdf(x[:, i]) for i, m in enumerate(model_marginals)]) if x.size else x
    return u


def fit_copula(table: EncodedTable, unit: str = "country", cond_column: str | None = None,
               marginal_mode: str = "gaussian") -> CopulaModel:
    """Fit marginals and the latent correlation of one fitting unit."""
    x = table.values.to_numpy(dtype=float)
    n, d = x.shape
    if n < d + 1:
        raise SmallSample(f"fitting unit {unit}: {n} rows for {d} encoded columns (need >= {d + 1})", unit=unit)
    marginals = tuple(fit_marginal(x[:, i], marginal_mode) for i in range(d))
    constant = tuple(i for i, m in enumerate(marginals) if m.is_constant)
    u = probability_integral_transform(marginals, x)
    z = ndtri(np.clip(u, U_EPS, 1 - U_EPS))
    missing = np.isnan(x)
    z[missing] = np.nan
    if np.any(~np.isfinite(z[~missing])):
        raise NumericalFailure(f"fitting unit {unit}: non-finite latent scores")
    for i in constant:
        z[:, i] = 0.0
    corr = repair_psd(latent_correlation(z, constant))
    cols = tuple(table.values.columns)
    cond_index = cols.index(cond_column) if cond_column is not None else None
    layout = {
        "passthrough": list(table.passthrough),
        "encoded": {k: list(v) for k, v in table.encoded.items()},
        "schema": table.schema.to_json(),
        "cluster_attribute": cond_column,
    }
    return CopulaModel(cols, marginals, corr, unit, cond_index, constant, layout)


# ----------------------------------------------------------------------------- conditioning


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    mean: np.ndarray
    cov: np.ndarray
    a_index: tuple
    b_index: tuple


def conditional_gaussian(mu: np.ndarray, sigma: np.ndarray, b_index, x_b) -> ConditionalGaussian:
    """Parameters of x_a | x_b for a joint normal N(mu, sigma)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    b = np.atleast_1d(np.asarray(b_index, dtype=int))
    a = np.setdiff1d(np.arange(len(mu)), b)
    x_b = np.atleast_1d(np.asarray(x_b, dtype=float))
    s_bb = sigma[np.ix_(b, b)]
    if len(b) == 1:
        if not s_bb[0, 0] > 1e-12:
            raise SingularConditioner(f"conditioning variance {s_bb[0, 0]:.3g} is not positive")
    elif np.linalg.eigvalsh(s_bb).min() <= 1e-12:
        raise SingularConditioner("conditioning block is singular")
    s_ab = sigma[np.ix_(a, b)]
    s_aa = sigma[np.ix_(a, a)]
    gain = np.linalg.solve(s_bb, s_ab.T).T  # s_ab @ inv(s_bb)
    mean = mu[a] + gain @ (x_b - mu[b])
    cov = s_aa - gain @ s_ab.T
    cov = (cov + cov.T) / 2.0
    return ConditionalGaussian(mean, cov, tuple(a.tolist()), tuple(b.tolist()))


def latent_code(model: CopulaModel, value: float) -> float:
    m = model.marginals[model.cond_index]
    return float(ndtri(np.clip(m.cdf(np.array([value]))[0], U_EPS, 1 - U_EPS)))


def condition(model: CopulaModel, cluster_value: float) -> ConditionalGaussian:
    """Condition the latent standard normal on the encoded cluster value."""
    if model.cond_index is None:
        raise SingularConditioner("model has no conditioning column")
    z_b = latent_code(model, cluster_value)
    return conditional_gaussian(np.zeros(model.d), model.corr, [model.cond_index], [z_b])


def unconditional(model: CopulaModel) -> ConditionalGaussian:
    b = () if model.cond_index is None else (model.cond_index,)
    a = tuple(i for i in range(model.d) if i not in b)
    return ConditionalGaussian(np.zeros(len(a)), model.corr[np.ix_(a, a)].copy(), a, b)


def cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    if cov.size == 0:
        return cov
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            continue
    raise SingularCovariance("covariance is not positive definite even with 1e-6 jitter")


def sample_latent(cond: ConditionalGaussian, n: int, gen: np.random.Generator) -> np.ndarray:
    chol = cholesky_with_jitter(cond.cov)
    eps = gen.standard_normal((n, len(cond.mean)))
    return cond.mean + eps @ chol.T


# ----------------------------------------------------------------------------- density


def gaussian_copula_density(model, u):
    """Density c(u) = det(S)^(-1/2) exp(-1/2 q^T (S^-1 - I) q), q = Phi^-1(u).

    ``u`` is one point (float result) or an (n, d) batch (array result).
    """
    sigma = model.corr if isinstance(model, CopulaModel) else np.asarray(model, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise SpecInvalid("u must lie strictly inside the unit cube")
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0 or not np.isfinite(logdet):
        raise SingularCovariance("copula correlation matrix is singular")
    q = ndtri(u)
    inv = np.linalg.inv(sigma) - np.eye(sigma.shape[0])
    if q.ndim == 2:
        return np.exp(-0.5 * logdet - 0.5 * np.einsum("ij,jk,ik->i", q, inv, q))
    return float(np.exp(-0.5 * logdet - 0.5 * q @ inv @ q))


# ----------------------------------------------------------------------------- sampling


def _decode(model: CopulaModel, latent: np.ndarray, enc: Encoder, a_index: tuple) -> pd.DataFrame:
    layout = model.layout
    schema = Schema.from_json(layout["schema"])
    encoded_vals = {}
    for pos, col in zip(a_index, (model.columns[i] for i in a_index)):
        encoded_vals[col] = model.marginals[pos].ppf(ndtr(latent[:, a_index.index(pos)]))
    out = {}
    for p in layout["passthrough"]:
        v = encoded_vals[p]
        if schema[p].integer:
            v = np.floor(v + 0.5)
        out[p] = v
    cluster_attr = layout.get("cluster_attribute")
    for attr, cols in layout["encoded"].items():
        if attr == cluster_attr:
            continue
        mat = np.column_stack([encoded_vals[c] for c in cols])
        out[attr] = enc.codebooks[attr].decode(mat)
    return pd.DataFrame(out)


def sample_synthetic(model: CopulaModel, cluster, n_j: int, constraints: ConstraintSet | None,
                     enc: Encoder, rng: Rng, budget_factor: int = 1000) -> pd.DataFrame:
    """Draw ``n_j`` constraint-satisfying rows for one cluster."""
    if n_j < 1:
        raise SpecInvalid("n_j must be >= 1")
    constraints = constraints or ConstraintSet()
    cluster_attr = model.layout.get("cluster_attribute")
    if cluster_attr is not None:
        book = enc.codebooks[cluster_attr]
        if cluster not in book.classes:
            raise SpecInvalid(f"cluster {cluster!r} not in the fitted codebook of unit {model.unit}")
        value = float(book.midpoints[book.classes.index(cluster)])
        try:
            cond = condition(model, value)
        except SingularConditioner:
            cond = unconditional(model)
    else:
        cond = unconditional(model)
    gen = rng.generator()
    budget = budget_factor * n_j
    accepted = []
    n_acc = drawn = 0
    rejections = {c.name: 0 for c in constraints}
    rate = 1.0
    while n_acc < n_j:
        if drawn >= budget:
            raise RejectionBudgetExceeded(
                f"unit {model.unit} cluster {cluster}: {n_acc}/{n_j} rows accepted after {drawn} draws",
                counts=rejections,
            )
        need = n_j - n_acc
        batch = int(min(budget - drawn, max(8, math.ceil(1.2 * need / max(rate, 1e-3)))))
        latent = sample_latent(cond, batch, gen)
        rows = _decode(model, latent, enc, cond.a_index)
        ok = np.ones(batch, dtype=bool)
        for c in constraints:
            holds = c.holds(rows)
            rejections[c.name] += int((~holds).sum())
            ok &= holds
        drawn += batch
        rate = max(ok.mean(), 1.0 / batch)
        keep = rows.loc[ok].head(need)
        accepted.append(keep)
        n_acc += len(keep)
    out = pd.concat(accepted, ignore_index=True)
    if cluster_attr is not None:
        out[cluster_attr] = cluster
    return out


# ----------------------------------------------------------------------------- survey level


@dataclass(frozen=True, eq=False)
class FittedUnit:
    unit: str
    encoder: Encoder
    model: CopulaModel


def _units(survey: MicroTable, level: str) -> list:
    if level == "country":
        return [("country", np.ones(survey.n, dtype=bool))]
    role = {"strata": "stratum", "zip": "zip_code"}.get(level)
    if role is None:
        raise SpecInvalid(f"unknown fitting level {level!r}; expected one of {LEVELS}")
    col = survey.role_column(role).to_numpy(dtype=object)
    return [(u, col == u) for u in sorted(set(col))]


def synthesize_survey(survey: MicroTable, level: str = "strata", scheme: str = "frequency",
                      marginal_mode: str = "gaussian", constraints: ConstraintSet | None = None,
                      rng: Rng | None = None, rate: float = 1.0, attributes: Iterable[str] | None = None,
                      fitted: list | None = None) -> MicroTable:
    """Synthetic survey: per unit copula fit, per cluster conditional sampling.

    Geographic columns (stratum, zip, cluster location, urban flag) are copied
    from the true cluster; weights are copied and divided by ``rate``.
    """
    if rate <= 0:
        raise SpecInvalid("synthetic sampling rate must be positive")
    rng = rng or Rng(0)
    schema = survey.schema
    attrs = list(attributes) if attributes is not None else schema.analysis_attributes
    c_col = schema.role("cluster")
    all_constraints = ConstraintSet.from_schema_bounds(schema, attrs)
    if constraints is not None:
        constraints.validate(schema)
        all_constraints = all_constraints.merged(constraints)
    geo_cols = [c for r, c in schema.geo_roles.items() if r not in ("cluster", "household", "weight")]
    h_col = schema.geo_roles.get("household")
    w_col = schema.geo_roles.get("weight")
    categorical = [a for a in attrs if schema[a].is_categorical]

    pieces = []
    for unit, mask in _units(survey, level):
        sub = survey.select(mask)
        enc = fit_encoder(sub, scheme, columns=categorical, frequency_columns=[c_col])
        et = transform(sub, enc, attrs + [c_col])
        model = fit_copula(et, unit=str(unit), cond_column=c_col, marginal_mode=marginal_mode)
        if fitted is not None:
            fitted.append(FittedUnit(str(unit), enc, model))
        clusters = sub.data[c_col].to_numpy(dtype=object)
        for cluster in sorted(set(clusters)):
            rows_j = sub.data.loc[clusters == cluster]
            n_j = len(rows_j)
            n_out = max(1, int(round(n_j * rate)))
            synth = sample_synthetic(model, cluster, n_out, all_constraints, enc,
                                     rng.child("unit", unit, "cluster", cluster))
            first = rows_j.iloc[0]
            for g in geo_cols:
                synth[g] = first[g]
            if h_col is not None:
                synth[h_col] = [f"{cluster}-S{i:04d}" for i in range(n_out)]
            if w_col is not None:
                w = rows_j[w_col].to_numpy(dtype=float)
                synth[w_col] = w if rate == 1.0 else np.full(n_out, w.mean() / rate)
            pieces.append(synth)
    frame = pd.concat(pieces, ignore_index=True)
    keep = [c for c in schema.names if c in frame.columns]
    out_schema = schema.subset(keep)
    return MicroTable(out_schema, frame[keep], provenance="synthetic")
