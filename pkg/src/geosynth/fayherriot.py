"""Area-level Fay-Herriot model for zip-code estimates.

Direct estimates are weighted (Hajek) means per zip with a linearised
variance that treats sampled clusters as PSUs within strata. The random-effect
variance is fitted by Fisher scoring on the REML (default) or ML likelihood,
and every area gets the EBLUP  gamma * direct + (1 - gamma) * x'beta.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data_model import MicroTable
from .errors import (
    InsufficientData,
    MissingCovariates,
    NoConvergence,
    RankDeficientDesign,
    SpecInvalid,
    TooFewAreas,
)

log = logging.getLogger(__name__)

METHODS = ("REML", "ML")
TOL = 1e-8
MAX_ITER = 200
MAX_HALVINGS = 40
VAR_FLOOR = 1e-10  # relative to the pooled variance of a mean


# ----------------------------------------------------------------------------- data


@dataclass(eq=False)
class AreaData:
    """One row per area: direct estimate, sampling variance, covariates, in-sample flag."""
    areas: list
    direct: np.ndarray
    var_e: np.ndarray
    X: np.ndarray  # intercept first
    in_sample: np.ndarray
    n_units: np.ndarray = None
    flags: dict = field(default_factory=dict)
    covariate_names: tuple = ()

    def __post_init__(self):
        d = len(self.areas)
        self.direct = np.asarray(self.direct, dtype=float)
        self.var_e = np.asarray(self.var_e, dtype=float)
        self.X = np.asarray(self.X, dtype=float).reshape(d, -1)
        self.in_sample = np.asarray(self.in_sample, dtype=bool)
        if self.n_units is None:
            self.n_units = np.where(self.in_sample, 1, 0)
        if np.any(self.var_e[self.in_sample] <= 0) or np.any(~np.isfinite(self.direct[self.in_sample])):
            raise SpecInvalid("in-sample areas need a finite direct estimate and positive sampling variance")

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def sampled(self) -> tuple:
        m = self.in_sample
        return self.direct[m], self.var_e[m], self.X[m]

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"area": self.areas, "direct": self.direct, "var_e": self.var_e,
                            "in_sample": self.in_sample, "n_units": self.n_units})
        for j, name in enumerate(self.covariate_names or [f"x{j}" for j in range(1, self.p)]):
            out[name] = self.X[:, j + 1]
        return out


def direct_estimates(survey: MicroTable, target, by: str | None = None) -> pd.DataFrame:
    """Hajek mean and linearised variance per area.

    ``target`` is a column name or an array aligned with the survey rows.
    Returns columns area, direct, var_e, n_units, n_clusters, variance_method.
    """
    schema = survey.schema
    by = by or schema.role("zip_code")
    y = np.asarray(survey.data[target] if isinstance(target, str) else target, dtype=float)
    if len(y) != survey.n or np.any(~np.isfinite(y)):
        raise SpecInvalid("target must be numeric, finite and aligned with the survey rows")
    w = survey.role_column("weight").to_numpy(dtype=float)
    area = survey.data[by].to_numpy(dtype=object)
    strata = survey.role_column("stratum").to_numpy(dtype=object)
    clusters = survey.role_column("cluster").to_numpy(dtype=object)
    frame = pd.DataFrame({"area": area, "stratum": strata, "cluster": clusters, "y": y, "w": w})
    # survey-wide unit variance for the degenerate fallback
    pooled = float(np.var(y, ddof=1)) if len(y) > 1 else 0.0
    rows = []
    for k, sub in frame.groupby("area", sort=True):
        n = len(sub)
        if n < 2:
            raise InsufficientData(f"area {k} has {n} unit(s); at least 2 are needed for a variance")
        wk, yk = sub.w.to_numpy(), sub.y.to_numpy()
        total_w = wk.sum()
        theta = float(np.sum(wk * yk) / total_w)
        u = wk * (yk - theta) / total_w
        n_clusters = sub.cluster.nunique()
        if n_clusters >= 2:
            method = "cluster"
            var = 0.0
            for h in sub.stratum.unique():
                # domain estimation: clusters of the stratum outside the area contribute zeros
                in_h = frame[frame.stratum == h].cluster.unique()
                z = pd.Series(0.0, index=in_h)
                sel = sub.stratum.to_numpy() == h
                z = z.add(pd.Series(u[sel]).groupby(sub.cluster.to_numpy()[sel]).sum(), fill_value=0.0)
                n_h = len(z)
                if n_h > 1:
                    var += n_h / (n_h - 1) * float(np.sum((z - z.mean()) ** 2))
        else:
            method = "unit"
            var = n / (n - 1) * float(np.sum(u ** 2))
        # exact cancellation leaves rounding noise; treat it as zero
        if not var > VAR_FLOOR * pooled / n:
            method = "pooled"
            var = pooled / n
        rows.append({"area": k, "direct": theta, "var_e": var, "n_units": n,
                     "n_clusters": n_clusters, "variance_method": method})
    return pd.DataFrame(rows)


def area_data(direct: pd.DataFrame, covariates: pd.DataFrame, key: str = "zip_id") -> AreaData:
    """Join direct estimates onto an area-level covariate table (all areas kept)."""
    if key not in covariates.columns:
        raise MissingCovariates(f"covariate table has no {key!r} column")
    cov = covariates.set_index(key).sort_index()
    names = tuple(c for c in cov.columns)
    unknown = set(direct["area"]) - set(cov.index)
    if unknown:
        raise MissingCovariates(f"no covariates for areas {sorted(unknown)[:5]}")
    values = cov.to_numpy(dtype=float)
    if np.any(~np.isfinite(values)):
        raise MissingCovariates("covariates must be finite for every area")
    d = direct.set_index("area").reindex(cov.index)
    ins = d["direct"].notna().to_numpy()
    X = np.column_stack([np.ones(len(cov)), values])
    flags = {a: m for a, m in zip(d.index, d.get("variance_method", pd.Series(dtype=object))) if isinstance(m, str) and m != "cluster"}
    return AreaData(list(cov.index), d["direct"].to_numpy(dtype=float), d["var_e"].fillna(0).to_numpy(dtype=float),
                    X, ins, d["n_units"].fillna(0).to_numpy(dtype=int), flags, names)


# ----------------------------------------------------------------------------- fit


@dataclass(eq=False)
class FhFit:
    method: str
    beta: np.ndarray
    beta_se: np.ndarray
    sigma2_u: float
    areas: list
    gamma: np.ndarray  # per area; 0 for out-of-sample areas
    eblup: np.ndarray
    synthetic: np.ndarray
    iterations: int
    converged: bool
    in_sample: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def mean_gamma(self) -> float:
        g = self.gamma[self.in_sample]
        return float(g.mean()) if len(g) else float("nan")

    def to_json(self) -> dict:
        return {"method": self.method, "beta": self.beta.tolist(), "beta_se": self.beta_se.tolist(),
                "sigma2_u": self.sigma2_u, "mean_gamma": self.mean_gamma, "iterations": self.iterations,
                "converged": self.converged,
                "trace": [{"iteration": i, "sigma2_u": s, "loglik": l, "score": g} for i, s, l, g in self.trace]}


def gls_beta(X: np.ndarray, y: np.ndarray, v: np.ndarray) -> tuple:
    """GLS coefficients and their covariance for a diagonal covariance ``v``."""
    wx = X / v[:, None]
    xtwx = X.T @ wx
    beta = np.linalg.solve(xtwx, wx.T @ y)
    return beta, np.linalg.inv(xtwx)


def _loglik(sigma2: float, y, X, psi, method: str) -> float:
    v = sigma2 + psi
    beta, cov = gls_beta(X, y, v)
    r = y - X @ beta
    ll = -0.5 * (np.sum(np.log(v)) + np.sum(r * r / v))
    if method == "REML":
        ll -= 0.5 * np.linalg.slogdet(np.linalg.inv(cov))[1]
    return float(ll)


def _score_info(sigma2: float, y, X, psi, method: str) -> tuple:
    v = sigma2 + psi
    vinv = 1.0 / v
    if method == "ML":
        beta, _ = gls_beta(X, y, v)
        r = y - X @ beta
        return -0.5 * vinv.sum() + 0.5 * np.sum(r * r * vinv ** 2), 0.5 * np.sum(vinv ** 2)
    wx = X * vinv[:, None]
    P = np.diag(vinv) - wx @ np.linalg.solve(X.T @ wx, wx.T)
    Py = P @ y
    return -0.5 * np.trace(P) + 0.5 * Py @ Py, 0.5 * np.sum(P * P.T)


def loglik(sigma2: float, data: AreaData, method: str = "REML") -> float:
    y, psi, X = data.sampled()
    return _loglik(sigma2, y, X, psi, method)


def _standardise(X: np.ndarray) -> tuple:
    mean = X[:, 1:].mean(axis=0)
    sd = X[:, 1:].std(axis=0)
    if np.any(sd == 0):
        raise RankDeficientDesign("a covariate is constant over the in-sample areas")
    Z = np.column_stack([X[:, 0], (X[:, 1:] - mean) / sd])
    return Z, mean, sd


def fit_fh(data: AreaData, method: str = "REML", sigma2_u: float | None = None,
           tol: float = TOL, max_iter: int = MAX_ITER) -> FhFit:
    """Fit sigma2_u by Fisher scoring (or fix it), then beta by GLS and the EBLUPs."""
    method = method.upper()
    if method not in METHODS:
        raise SpecInvalid(f"unknown FH method {method!r}")
    y, psi, X = data.sampled()
    D, p = X.shape
    if D <= p + 1:
        raise TooFewAreas(f"{D} in-sample areas for {p} regression coefficients")
    Z, mean, sd = _standardise(X)
    if np.linalg.matrix_rank(Z) < p:
        raise RankDeficientDesign("covariate matrix is rank deficient over the in-sample areas")

    trace = []
    converged = True
    it = 0
    if sigma2_u is None:
        beta0 = np.linalg.lstsq(Z, y, rcond=None)[0]
        s2 = max(float(np.var(y - Z @ beta0, ddof=p)) - float(psi.mean()), 0.0)
        if s2 == 0.0:
            s2 = float(np.median(psi))
        ll = _loglik(s2, y, Z, psi, method)
        converged = False
        for it in range(1, max_iter + 1):
            score, info = _score_info(s2, y, Z, psi, method)
            trace.append((it, s2, ll, float(score)))
            if s2 == 0.0 and score <= 0:
                converged = True
                break
            step = score / info
            new = max(s2 + step, 0.0)
            new_ll = _loglik(new, y, Z, psi, method)
            halvings = 0
            while new_ll < ll - 1e-12 and halvings < MAX_HALVINGS:
                step /= 2.0
                new = max(s2 + step, 0.0)
                new_ll = _loglik(new, y, Z, psi, method)
                halvings += 1
            delta = abs(new - s2)
            s2, ll = new, new_ll
            if delta < tol:
                converged = True
                break
        sigma2_u = s2
    elif sigma2_u < 0:
        raise SpecInvalid("fixed sigma2_u must be >= 0")

    v = sigma2_u + psi
    beta_z, _ = gls_beta(Z, y, v)
    beta = beta_z.copy()
    beta[1:] = beta_z[1:] / sd
    beta[0] = beta_z[0] - np.sum(beta_z[1:] * mean / sd)
    _, cov = gls_beta(X, y, v)
    fit = _finish(data, method, beta, np.sqrt(np.diag(cov)), float(sigma2_u), it, converged, trace)
    if not converged:
        raise NoConvergence(f"{method} did not converge in {max_iter} iterations", fit=fit)
    return fit


def _finish(data, method, beta, se, sigma2_u, it, converged, trace) -> FhFit:
    if np.any(~np.isfinite(data.X)):
        raise MissingCovariates("covariates must be finite for every area")
    synthetic = data.X @ beta
    gamma = np.zeros(len(data.areas))
    m = data.in_sample
    gamma[m] = sigma2_u / (sigma2_u + data.var_e[m])
    eblup = synthetic.copy()
    eblup[m] = gamma[m] * data.direct[m] + (1 - gamma[m]) * synthetic[m]
    return FhFit(method, beta, se, sigma2_u, list(data.areas), gamma, eblup, synthetic, it, converged,
                 m.copy(), trace)


def predict_areas(fit: FhFit, data: AreaData) -> pd.Series:
    """EBLUP for in-sample areas, x'beta for the rest."""
    if data.X.shape[1] != len(fit.beta):
        raise MissingCovariates("covariate columns do not match the fitted coefficients")
    if np.any(~np.isfinite(data.X)):
        raise MissingCovariates("every area needs finite covariates")
    synthetic = data.X @ fit.beta
    out = synthetic.copy()
    m = data.in_sample
    g = fit.sigma2_u / (fit.sigma2_u + data.var_e[m])
    out[m] = g * data.direct[m] + (1 - g) * synthetic[m]
    return pd.Series(out, index=data.areas, name="estimate")


# ----------------------------------------------------------------------------- end to end


def target_values(table: MicroTable, target: str, composite=None) -> np.ndarray:
    """Numeric target per row: a continuous column, ``attr=class`` share, or a composite column."""
    if composite is not None and target in set(composite.columns("indicator") + composite.columns("dimension")
                                               + composite.columns("composite")):
        from .utility import compute_composite
        return compute_composite(table, composite)[target].to_numpy(dtype=float)
    if "=" in target:
        attr, cls = target.split("=", 1)
        if attr not in table.schema or cls not in table.schema[attr].labels:
            raise SpecInvalid(f"unknown target class {target!r}")
        return (table.data[attr].to_numpy(dtype=object) == cls).astype(float)
    if target in table.schema and not table.schema[target].is_categorical:
        values = table.data[target].to_numpy(dtype=float)
        if np.isnan(values).any():
            raise SpecInvalid(f"target {target!r} has missing values")
        return values
    raise SpecInvalid(f"target {target!r} is neither continuous, attr=class nor a composite column")


def area_truth(population: MicroTable, target: str, composite=None) -> dict:
    values = target_values(population, target, composite)
    z = population.role_column("zip_code").to_numpy(dtype=object)
    return pd.Series(values).groupby(z).mean().to_dict()


@dataclass(eq=False)
class AugmentResult:
    predictions: pd.DataFrame
    fit: FhFit
    metrics: dict
    mean_gamma: float


def augment(survey: MicroTable, covariates: pd.DataFrame, target: str, composite=None,
            truth: Mapping | None = None, method: str = "REML") -> AugmentResult:
    """Direct estimates -> FH fit -> predictions for every zip, scored against census truth."""
    from .utility import prediction_metrics

    y = target_values(survey, target, composite)
    direct = direct_estimates(survey, y)
    data = area_data(direct, covariates)
    try:
        fit = fit_fh(data, method)
    except NoConvergence as exc:
        log.warning("%s", exc)
        fit = exc.fit
    pred = predict_areas(fit, data)
    frame = pd.DataFrame({"zip": data.areas, "direct": data.direct, "var_e": np.where(data.in_sample, data.var_e, np.nan),
                          "in_sample": data.in_sample, "gamma": fit.gamma, "synthetic": fit.synthetic,
                          "estimate": pred.to_numpy()})
    metrics = {}
    if truth is not None:
        frame["truth"] = [truth.get(a, np.nan) for a in data.areas]
        in_sample = [a for a, s in zip(data.areas, data.in_sample) if s]
        metrics = prediction_metrics(dict(zip(data.areas, pred.to_numpy())), truth, data.p - 1, in_sample)
    metrics["mean_gamma"] = fit.mean_gamma
    metrics["sigma2_u"] = fit.sigma2_u
    return AugmentResult(frame, fit, metrics, fit.mean_gamma)
