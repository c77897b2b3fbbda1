import numpy as np
import pandas as pd
import pytest

from geosynth.data_model import CATEGORICAL, AttributeSpec, MicroTable, Schema
from geosynth.errors import InsufficientHouseholds, InsufficientPsus, SpecInvalid
from geosynth.rng import Rng
from geosynth.sampling import (
    PopulationSpec,
    SamplingDesign,
    area_covariates,
    draw_sample,
    generate_population,
    horvitz_thompson_population,
    systematic_pps,
)


def flat_population(psu_households, stratum="S"):
    """One person per household; psu_households lists household counts per PSU."""
    rows = []
    for j, m in enumerate(psu_households):
        for h in range(m):
            rows.append({"stratum": stratum, "cluster": f"C{j}", "household": f"C{j}H{h}", "x": "a"})
    schema = Schema((
        AttributeSpec("stratum", CATEGORICAL, (stratum,), geo_role="stratum"),
        AttributeSpec("cluster", CATEGORICAL, geo_role="cluster"),
        AttributeSpec("household", CATEGORICAL, geo_role="household"),
        AttributeSpec("x", CATEGORICAL, ("a",)),
    ))
    return MicroTable(schema, pd.DataFrame(rows), "population")


def tiny_spec(**kw):
    base = dict(regions=1, area_types=["urban", "rural"], admin_per_stratum=1, zips_per_admin=1, psus_per_zip=3,
                households_per_psu_mean=20, households_per_psu_sd=0, household_size_probs=[1.0],
                attributes=[{"name": "sex", "kind": "categorical", "classes": ["f", "m"], "probs": [0.5, 0.5]}])
    base.update(kw)
    return PopulationSpec.from_json(base)


def test_population_counting():
    pop, geo = generate_population(tiny_spec(), Rng(0))
    assert pop.n == 2 * 3 * 20
    assert pop.data["household"].nunique() == 120
    for cid, z in geo.cluster_zip.items():
        assert geo.zip_areas[z].contains(geo.cluster_points[cid])


def test_population_spec_validation():
    with pytest.raises(SpecInvalid):
        tiny_spec(attributes=[{"name": "s", "kind": "categorical", "classes": ["a", "b"], "probs": [0.5, 0.6]}])
    with pytest.raises(SpecInvalid):
        tiny_spec(psus_per_zip=0)


def test_default_population_roles(desk):
    pop, geo, _ = desk
    for role in ("stratum", "cluster", "zip_code", "admin_area", "household", "urban"):
        assert pop.role_column(role).notna().all()
    assert set(pop.role_column("cluster")) == set(geo.cluster_points)
    assert 4000 <= pop.n <= 7000


def test_census_case_weights_one():
    pop = flat_population([10])
    draw = draw_sample(pop, None, SamplingDesign(1, 10), Rng(0))
    assert np.allclose(draw.survey.role_column("weight"), 1.0)
    assert draw.selected.pi_j.tolist() == [1.0]


def test_equal_psus_weight_four():
    pop = flat_population([10, 10])
    draw = draw_sample(pop, None, SamplingDesign(1, 5), Rng(3))
    assert draw.survey.n == 5
    assert np.allclose(draw.survey.role_column("weight"), 4.0)


def test_small_psus_excluded_and_errors():
    pop = flat_population([12, 12, 4])
    for seed in range(20):
        draw = draw_sample(pop, None, SamplingDesign(2, 5), Rng(seed))
        assert "C2" not in set(draw.survey.role_column("cluster"))
        assert draw.excluded_clusters == ("C2",)
    with pytest.raises(InsufficientPsus):
        draw_sample(pop, None, SamplingDesign(3, 5), Rng(0))
    with pytest.raises(InsufficientHouseholds):
        draw_sample(pop, None, SamplingDesign(1, 13), Rng(0))


def test_systematic_pps_inclusion_probabilities():
    sizes = np.array([10, 20, 30, 40, 100.0])
    gen = np.random.default_rng(0)
    counts = np.zeros(5)
    reps = 20000
    for _ in range(reps):
        picks, pi = systematic_pps(sizes, 2, gen)
        assert len(set(picks)) == 2
        counts[picks] += 1
    # the 100 unit is certain (2*100 >= 200); the rest share one draw by size
    assert pi[4] == 1.0
    assert np.allclose(pi[:4], sizes[:4] / sizes[:4].sum())
    assert np.allclose(counts / reps, pi, atol=0.015)


def test_weights_constant_within_psu_and_households_complete(desk):
    pop, _, draw = desk
    s = draw.survey
    assert (s.data.groupby("cluster").weight.nunique() == 1).all()
    sampled = set(s.role_column("household"))
    pop_sizes = pop.data[pop.data.household.isin(sampled)].groupby("household").size()
    assert pop_sizes.equals(s.data.groupby("household").size())


def test_horvitz_thompson_unbiased(desk):
    pop, geo, _ = desk
    est = [horvitz_thompson_population(draw_sample(pop, geo, SamplingDesign(), Rng(9).child(r)).survey)
           for r in range(100)]
    assert abs(np.mean(est) / pop.n - 1) < 0.02


def test_sample_manifest_and_covariates(desk):
    pop, _, draw = desk
    m = draw.manifest(7, SamplingDesign())
    assert m["n_individuals"] == draw.survey.n
    assert all(0 < r["pi_j"] <= 1 for r in m["selected"])
    cov = area_covariates(pop, Rng(1))
    assert list(cov.columns[:1]) == ["zip_id"] and len(cov) == pop.data.zip_code.nunique()
    assert cov.drop(columns="zip_id").notna().all().all()
