import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosynth.data_model import CATEGORICAL, CONTINUOUS, AttributeSpec, MicroTable, Schema
from geosynth.errors import SchemaMismatch, SpecInvalid, TooFewAreas
from geosynth.utility import (
    CompositeSpec,
    Indicator,
    average_grids,
    binary_zkl,
    composite_report,
    compute_composite,
    kl_divergence,
    kl_grid,
    normalized_kl,
    pearson,
    prediction_metrics,
    smoothed,
    with_direct_indicators,
)


def test_kl_examples():
    assert normalized_kl([0.3, 0.7], [0.3, 0.7]) == 1.0
    d = kl_divergence([0.5, 0.5], [0.25, 0.75])
    brute = sum(p * np.log2(p / q) for p, q in zip([0.5, 0.5], [0.25, 0.75]))
    assert d == pytest.approx(brute, abs=1e-15) and d == pytest.approx(0.2075, abs=1e-4)
    assert normalized_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.828, abs=1e-3)
    assert np.array_equal(smoothed(np.array([3, 0, 1]), np.array([2, 0, 0])), [2, 0, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=12), st.integers(0, 2**31))
def test_kl_vectorised_matches_scalar_sum(p, seed):
    p = np.array(p)
    q = np.random.default_rng(seed).uniform(0.01, 10, len(p))
    pn, qn = p / p.sum(), q / q.sum()
    brute = 0.0
    for a, b in zip(pn, qn):
        brute += a * np.log2(a / b)
    assert kl_divergence(p, q) == pytest.approx(brute, abs=1e-12)
    assert 0 < normalized_kl(p, q) <= 1


def test_grid_identity_and_empty_cells(survey):
    census = survey.with_provenance("population")
    grid = kl_grid(survey, census)
    assert np.allclose(grid.z.to_numpy(), 1.0)
    part = survey.select(survey.data.zip_code != "S1Z1")
    grid = kl_grid(part, census)
    assert grid.z["S1Z1"].isna().all() and grid.sample_size["S1Z1"] == 0
    assert (grid.z.stack() <= 1).all() and (grid.z.stack() > 0).all()
    long = grid.long()
    assert set(long.columns) == {"attribute", "zip", "z"} and "S1Z1" not in set(long.zip)
    ordered = grid.ordered()
    assert list(ordered.index) == list(grid.class_count.sort_values(kind="mergesort").index)


def test_grid_vocab_mismatch(survey):
    other = MicroTable(Schema((AttributeSpec("zip_code", CATEGORICAL, ("S1Z0",), geo_role="zip_code"),
                               AttributeSpec("sex", CATEGORICAL, ("f", "m")))),
                       pd.DataFrame({"zip_code": ["S1Z0"], "sex": ["f"]}))
    with pytest.raises(SchemaMismatch):
        kl_grid(survey, other, ["sex"])


def test_average_grids_conditional_sample_size(survey):
    census = survey.with_provenance("population")
    a = kl_grid(survey, census)
    b = kl_grid(survey.select(survey.data.zip_code != "S1Z1"), census)
    avg = average_grids([a, b])
    assert avg.sample_size["S1Z1"] == a.sample_size["S1Z1"]
    assert avg.z["S1Z1"].equals(a.z["S1Z1"])


def toy_spec():
    inds = (Indicator("well", "water", "eq", "well"), Indicator("river", "water", "in", ["river"]),
            Indicator("old", "age", "ge", 60), Indicator("male", "sex", "eq", "male"))
    return CompositeSpec(inds, {"water": ("well", "river"), "people": ("old", "male")}, "any")


def test_composite_or_aggregation(survey):
    out = compute_composite(survey, toy_spec())
    assert (out.water == (out.well | out.river)).all()
    assert (out["any"] == (out.water | out.people)).all()
    assert out["any"].sum() >= max(out.water.sum(), out.people.sum())
    none = survey.with_data(survey.data.assign(water="pipe", age=1.0, sex="female"))
    assert not compute_composite(none, toy_spec())["any"].any()
    with pytest.raises(SpecInvalid):
        CompositeSpec((Indicator("x", "age", "eq", 1),), {"d": ("y",)})
    with pytest.raises(SpecInvalid):
        compute_composite(survey, CompositeSpec((Indicator("x", "water", "eq", "lake"),), {"d": ("x",)}))


def test_composite_identity_report(survey):
    spec = toy_spec()
    report = composite_report(with_direct_indicators(survey, spec), survey, spec)
    assert (report.rho == 1).all() and (report.z_kl == 1).all()
    assert set(report.level) == {"indicator", "dimension", "composite"}
    assert (report.incidence_direct == report.incidence_true).all()


def test_independent_indicators_oracle():
    gen = np.random.default_rng(0)
    a = gen.random(20_000) < 0.3
    b = gen.random(20_000) < 0.3
    assert abs(pearson(a, b)) < 0.03
    assert binary_zkl(a, b) > 0.999
    assert pearson([1, 1], [0, 1]) == 0.0


def test_default_spec_shape(desk):
    spec = CompositeSpec.default()
    sizes = [len(v) for v in spec.dimensions.values()]
    assert sorted(sizes) == [2, 5, 5, 7] and len(spec.indicators) == 19
    spec.validate(desk[0].schema)
    assert CompositeSpec.from_json(spec.to_json()) == spec


def test_prediction_metrics_examples():
    truth = {f"a{i}": float(i + 1) for i in range(10)}
    m = prediction_metrics(truth, truth, 2)
    assert m["adj_r2"] == 1 and m["rel_bias"] == 0 and m["mse"] == 0
    shifted = {k: v + 0.5 for k, v in truth.items()}
    m = prediction_metrics(shifted, truth, 2)
    assert m["rel_bias"] == pytest.approx(0.5 / np.mean(list(truth.values())))
    assert m["mse"] == pytest.approx(0.25)
    with pytest.raises(TooFewAreas):
        prediction_metrics(truth, truth, 2, in_sample=["a1", "a2", "a3"])
