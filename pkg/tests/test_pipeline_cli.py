import json
from pathlib import Path

import pandas as pd
import pytest

from geosynth.cli import main
from geosynth.data_model import load_table
from geosynth.errors import SpecInvalid
from geosynth.pipeline import RunManifest, StudyConfig, run_study, sha256
from geosynth.rng import Rng
from geosynth.sampling import PopulationSpec, SamplingDesign, draw_sample, generate_population


def small_config(out, replicates=1, **kw):
    return StudyConfig(replicates=replicates, seed=3, out_dir=str(out), attack={"n_trees": 10}, **kw)


@pytest.fixture(scope="module")
def one_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    return out, run_study(small_config(out))


def test_single_replicate_outputs(one_run):
    out, manifest = one_run
    assert manifest.exit_code == 0 and manifest.succeeded == [0]
    for name in ("kl_grid", "uniqueness", "attack", "fh_metrics", "fh_predictions", "composite", "samples"):
        assert (out / f"{name}.csv").exists()
    stored = json.loads((out / "manifest.json").read_text())
    for rel, digest in stored["artifacts"].items():
        assert sha256(out / rel) == digest
    assert (out / "replicates" / "r0000" / "synthetic.csv").exists()
    uq = pd.read_csv(out / "uniqueness.csv")
    assert set(uq.survey_type) == {"true", "geomasked", "synthetic", "reidentified"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["z_kl_overall"]["true"] <= 1


def test_two_runs_byte_identical(tmp_path):
    a = run_study(small_config(tmp_path / "a", 2, keep_intermediate=False))
    b = run_study(small_config(tmp_path / "b", 2, keep_intermediate=False), workers=2)
    assert a.artifacts == b.artifacts


def test_exit_codes():
    ok = RunManifest({}, "0", [], {}, {}, [0, 1], [], {})
    part = RunManifest({}, "0", [], {}, {}, [0], [1], {})
    none = RunManifest({}, "0", [], {}, {}, [], [0], {})
    assert (ok.exit_code, part.exit_code, none.exit_code) == (0, 2, 1)
    with pytest.raises(SpecInvalid):
        StudyConfig(replicates=0).validate()
    with pytest.raises(SpecInvalid):
        StudyConfig.from_json({"replicates": 1, "bogus": 2})
    assert StudyConfig.from_json(json.loads(json.dumps(StudyConfig().to_json()))) == StudyConfig()


def test_cli_stages_match_library(tmp_path, one_run, capsys):
    out, _ = one_run
    assert main(["population", "--seed", "3", "--out", str(tmp_path)]) == 0
    # the standalone population stage reproduces the study's census byte for byte
    assert (tmp_path / "population.csv").read_bytes() == (out / "population.csv").read_bytes()
    assert (tmp_path / "covariates.csv").read_bytes() == (out / "covariates.csv").read_bytes()

    pop_csv, geo = str(tmp_path / "population.csv"), str(tmp_path / "geography.geojson")
    assert main(["sample", "--seed", "3", "--population", pop_csv, "--geography", geo,
                 "--out", str(tmp_path / "true.csv")]) == 0
    pop, g = generate_population(PopulationSpec.default(), Rng(3).child("population"))
    draw = draw_sample(pop, g, SamplingDesign(), Rng(3).child("sample"))
    cli = load_table(tmp_path / "true.csv", tmp_path / "true.schema.json")
    assert cli.data.equals(draw.survey.data)

    true_csv = str(tmp_path / "true.csv")
    assert main(["geomask", "--survey", true_csv, "--geography", geo, "--out", str(tmp_path / "geo.csv")]) == 0
    assert main(["synthesize", "--survey", true_csv, "--out", str(tmp_path / "syn.csv")]) == 0
    assert main(["risk", "--population", pop_csv, "--survey", true_csv, str(tmp_path / "syn.csv"),
                 "--true", true_csv, "--trees", "5", "--out", str(tmp_path / "risk")]) == 0
    assert (tmp_path / "risk" / "attack.csv").exists()
    assert main(["utility", "--survey", str(tmp_path / "geo.csv"), "--census", pop_csv,
                 "--out", str(tmp_path / "kl.csv")]) == 0
    kl = pd.read_csv(tmp_path / "kl.csv")
    assert {"attribute", "zip", "z", "n"} <= set(kl.columns) and kl.z.between(0, 1).all()
    assert main(["sae", "--survey", true_csv, "--covariates", str(tmp_path / "covariates.csv"),
                 "--population", pop_csv, "--out", str(tmp_path / "sae.csv")]) == 0
    assert "mean_gamma" in capsys.readouterr().out


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["synthesize", "--survey", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.csv")]) != 0
