import numpy as np
import pandas as pd
import pytest

from geosynth.data_model import CATEGORICAL, CONTINUOUS, AttributeSpec, MicroTable, Schema
from geosynth.errors import InsufficientData, MissingCovariates, TooFewAreas
from geosynth.fayherriot import (
    AreaData,
    area_data,
    augment,
    direct_estimates,
    fit_fh,
    gls_beta,
    loglik,
    predict_areas,
)


def design_table(y, w, area=None, cluster=None, stratum=None):
    n = len(y)
    area = area if area is not None else ["A"] * n
    cluster = cluster if cluster is not None else [f"c{i}" for i in range(n)]
    stratum = stratum if stratum is not None else ["S"] * n
    schema = Schema((
        AttributeSpec("stratum", CATEGORICAL, tuple(sorted(set(stratum))), geo_role="stratum"),
        AttributeSpec("zip_code", CATEGORICAL, tuple(sorted(set(area))), geo_role="zip_code"),
        AttributeSpec("cluster", CATEGORICAL, tuple(sorted(set(cluster))), geo_role="cluster"),
        AttributeSpec("weight", CONTINUOUS, geo_role="weight"),
        AttributeSpec("y", CONTINUOUS),
    ))
    return MicroTable(schema, pd.DataFrame({"stratum": stratum, "zip_code": area, "cluster": cluster,
                                            "weight": np.asarray(w, float), "y": np.asarray(y, float)}))


def test_hajek_examples():
    d = direct_estimates(design_table([0, 1, 1, 0], [1, 1, 1, 1]), "y")
    assert d.direct[0] == 0.5
    d = direct_estimates(design_table([0, 1], [1, 3]), "y")
    assert d.direct[0] == 0.75
    with pytest.raises(InsufficientData):
        direct_estimates(design_table([1.0], [1.0]), "y")


def test_cancelling_cluster_totals_fall_back_to_pooled():
    # permuted clusters share one total, so the cluster variance is zero up to rounding
    y = [0.1, 0.2, 0.7, 0.7, 0.1, 0.2, 0.2, 0.7, 0.1]
    d = direct_estimates(design_table(y, [1.0] * 9, cluster=list("aaabbbccc")), "y")
    assert d.variance_method[0] == "pooled"
    assert d.var_e[0] == pytest.approx(np.var(y, ddof=1) / 9)


def test_domain_variance_matches_monte_carlo():
    # simple random sampling within one stratum: the linearised variance tracks the empirical spread
    gen = np.random.default_rng(0)
    pop_y = gen.normal(5, 2, 5000)
    pop_area = gen.choice(["A", "B"], 5000, p=[0.3, 0.7])
    est, var = [], []
    for _ in range(400):
        idx = gen.choice(5000, 200, replace=False)
        t = design_table(pop_y[idx], np.full(200, 25.0), list(pop_area[idx]))
        d = direct_estimates(t, "y").set_index("area")
        est.append(d.direct["A"])
        var.append(d.var_e["A"])
    assert np.mean(var) / np.var(est) == pytest.approx(1.0, abs=0.2)


def synthetic_areas(D=200, sigma2_u=0.5, seed=0, p=2):
    gen = np.random.default_rng(seed)
    X = np.column_stack([np.ones(D), gen.normal(size=(D, p - 1))])
    beta = np.arange(1.0, p + 1)
    psi = gen.uniform(0.2, 1.0, D)
    theta = X @ beta + gen.normal(0, np.sqrt(sigma2_u), D)
    y = theta + gen.normal(0, np.sqrt(psi))
    return AreaData([f"a{i}" for i in range(D)], y, psi, X, np.ones(D, bool)), theta


def test_gamma_half_when_variances_equal():
    data, _ = synthetic_areas(20)
    data.var_e[:] = 0.4
    fit = fit_fh(data, sigma2_u=0.4)
    assert np.allclose(fit.gamma, 0.5)
    assert np.allclose(fit.eblup, 0.5 * data.direct + 0.5 * data.X @ fit.beta, atol=1e-10)


def test_tiny_sampling_variance_returns_direct():
    data, _ = synthetic_areas(30)
    data.var_e[:] = 1e-14
    fit = fit_fh(data, sigma2_u=1.0)
    assert np.abs(fit.eblup - data.direct).max() < 1e-10


def test_zero_area_variance_is_weighted_least_squares():
    data, _ = synthetic_areas(50)
    fit = fit_fh(data, sigma2_u=0.0)
    w = 1 / data.var_e
    sw = np.sqrt(w)
    wls = np.linalg.lstsq(data.X * sw[:, None], data.direct * sw, rcond=None)[0]
    assert np.abs(fit.beta - wls).max() < 1e-10
    assert np.abs(fit.eblup - data.X @ wls).max() < 1e-10
    assert np.allclose(gls_beta(data.X, data.direct, data.var_e)[0], wls, atol=1e-10)


@pytest.mark.parametrize("method", ["REML", "ML"])
def test_estimate_matches_grid_oracle(method):
    data, _ = synthetic_areas(200, sigma2_u=0.5, seed=3)
    fit = fit_fh(data, method)
    grid = np.linspace(0.0, 2.0, 20_001)
    best = grid[np.argmax([loglik(s, data, method) for s in grid])]
    assert fit.converged and abs(fit.sigma2_u - best) < 1e-3
    assert abs(fit.sigma2_u - 0.5) < 0.25
    lls = [ll for _, _, ll, _ in fit.trace]
    assert np.all(np.diff(lls) >= -1e-9)


def test_objective_concave_near_optimum():
    data, _ = synthetic_areas(200, seed=4)
    s = fit_fh(data).sigma2_u
    h = 1e-3
    second = loglik(s + h, data) - 2 * loglik(s, data) + loglik(s - h, data)
    assert second < 0


def test_boundary_estimate_at_zero():
    # no between-area signal: the optimum sits at the boundary
    data, _ = synthetic_areas(100, sigma2_u=0.0, seed=1)
    data.direct[:] = data.X @ np.array([1.0, 2.0])
    fit = fit_fh(data)
    assert fit.sigma2_u == 0.0 and np.allclose(fit.gamma, 0.0)


def test_out_of_sample_areas_are_synthetic():
    data, _ = synthetic_areas(60)
    data.in_sample[:10] = False
    data.direct[:10] = np.nan
    fit = fit_fh(data)
    pred = predict_areas(fit, data)
    assert np.allclose(pred.to_numpy()[:10], data.X[:10] @ fit.beta, atol=1e-12)
    assert (fit.gamma[:10] == 0).all() and (fit.gamma[10:] > 0).all()


def test_errors():
    data, _ = synthetic_areas(3, p=2)
    with pytest.raises(TooFewAreas):
        fit_fh(data)
    direct = pd.DataFrame({"area": ["a", "b"], "direct": [1.0, 2.0], "var_e": [0.1, 0.1], "n_units": [5, 5]})
    with pytest.raises(MissingCovariates):
        area_data(direct, pd.DataFrame({"zip_id": ["a"], "x": [1.0]}))
    with pytest.raises(MissingCovariates):
        area_data(direct, pd.DataFrame({"zip_id": ["a", "b"], "x": [1.0, np.nan]}))
    with pytest.raises(MissingCovariates):
        area_data(direct, pd.DataFrame({"zone": ["a", "b"], "x": [1.0, 2.0]}))


def test_augment_on_desk(desk):
    pop, _, draw = desk
    from geosynth.sampling import DEFAULT_COVARIATES, area_covariates
    from geosynth.fayherriot import area_truth
    from geosynth.rng import Rng
    from geosynth.utility import CompositeSpec

    spec = CompositeSpec.default()
    cov = area_covariates(pop, Rng(7).child("covariates"), DEFAULT_COVARIATES)
    truth = area_truth(pop, "nbi", spec)
    res = augment(draw.survey, cov, "nbi", spec, truth=truth)
    assert 0 <= res.mean_gamma <= 1
    assert set(res.predictions.zip) == set(truth)
    assert res.metrics["mse"] >= 0 and np.isfinite(res.metrics["adj_r2"])
