import numpy as np
import pandas as pd
import pytest

from geosynth.data_model import CATEGORICAL, CONTINUOUS, AttributeSpec, MicroTable, Schema
from geosynth.rng import Rng
from geosynth.sampling import PopulationSpec, SamplingDesign, draw_sample, generate_population


def toy_survey(n_clusters=6, per_cluster=30, seed=0, strata=("S1", "S2"), zips_per_stratum=3):
    """Small survey-shaped table with geography roles and a few attributes."""
    gen = np.random.default_rng(seed)
    zips = [f"{s}Z{k}" for s in strata for k in range(zips_per_stratum)]
    rows = []
    for s_i, s in enumerate(strata):
        for c in range(n_clusters):
            z = f"{s}Z{c % zips_per_stratum}"
            shift = 0.4 * (c % zips_per_stratum)
            for i in range(per_cluster):
                rows.append({
                    "stratum": s, "zip_code": z, "cluster": f"{s}C{c}", "household": f"{s}C{c}H{i // 3}",
                    "area_type": "urban" if s_i == 0 else "rural",
                    "age": float(np.clip(np.round(gen.normal(35 + 5 * shift, 12)), 0, 95)),
                    "income": float(gen.normal(10 + shift, 2)),
                    "sex": gen.choice(["female", "male"]),
                    "water": gen.choice(["pipe", "well", "river"], p=[0.6 - 0.2 * shift, 0.3, 0.1 + 0.2 * shift]),
                    "weight": 2.0 + c,
                })
    schema = Schema((
        AttributeSpec("stratum", CATEGORICAL, strata, geo_role="stratum"),
        AttributeSpec("zip_code", CATEGORICAL, tuple(zips), geo_role="zip_code"),
        AttributeSpec("cluster", CATEGORICAL, geo_role="cluster"),
        AttributeSpec("household", CATEGORICAL, geo_role="household"),
        AttributeSpec("area_type", CATEGORICAL, ("urban", "rural"), geo_role="urban"),
        AttributeSpec("age", CONTINUOUS, bounds=(0, 120), integer=True),
        AttributeSpec("income", CONTINUOUS),
        AttributeSpec("sex", CATEGORICAL, ("female", "male", "NA")),
        AttributeSpec("water", CATEGORICAL, ("pipe", "well", "river", "NA")),
        AttributeSpec("weight", CONTINUOUS, geo_role="weight"),
    ))
    return MicroTable(schema, pd.DataFrame(rows))


@pytest.fixture
def survey():
    return toy_survey()


@pytest.fixture(scope="session")
def desk():
    """Bundled desk-scale population plus one sample draw."""
    pop, geo = generate_population(PopulationSpec.default(), Rng(7).child("population"))
    draw = draw_sample(pop, geo, SamplingDesign(), Rng(7).child("sample"))
    return pop, geo, draw


ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store a criterion outcome for the end-of-run report, then assert it."""
    def _record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
