"""Command-line entry point: ``geosynth <subcommand>``.

Every stage reads and writes plain files (CSV plus a ``.schema.json``
sidecar) so any stage can be re-run in isolation. ``study`` runs the fused
multi-replicate loop.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from .copula import synthesize_survey
from .data_model import ConstraintSet, GeoContext, load_table, write_table
from .errors import GeoSynthError
from .fayherriot import area_truth, augment
from .forest import ForestParams
from .geomask import GeomaskParams, apply_mask, displace_clusters, urban_flags_from_table
from .pipeline import StudyConfig, run_study
from .privacy import default_risk_attributes, population_uniqueness, reidentified_uniqueness, run_attack
from .rng import Rng
from .sampling import PopulationSpec, SamplingDesign, area_covariates, draw_sample, generate_population
from .utility import CompositeSpec, composite_report, kl_grid, with_direct_indicators

log = logging.getLogger("geosynth")


def sidecar(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".schema.json")


def read(csv_path, provenance="true"):
    return load_table(csv_path, sidecar(csv_path), provenance)


def write(table, csv_path) -> None:
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    write_table(table, csv_path, sidecar(csv_path))


def stage_rng(args, *labels) -> Rng:
    return Rng(args.seed, args.stream).child(*labels)


def composite_spec(path) -> CompositeSpec:
    return CompositeSpec.load(path) if path else CompositeSpec.default()


# ----------------------------------------------------------------------------- subcommands


def cmd_population(args) -> int:
    spec = PopulationSpec.load(args.spec) if args.spec else PopulationSpec.default()
    pop, geo = generate_population(spec, stage_rng(args, "population"))
    out = Path(args.out)
    write(pop, out / "population.csv")
    geo.save(out / "geography.geojson")
    cov = area_covariates(pop, stage_rng(args, "covariates"))
    cov.to_csv(out / "covariates.csv", index=False, lineterminator="\n")
    print(f"population: {pop.n} individuals, {len(geo.zip_areas)} zips -> {out}")
    return 0


def cmd_sample(args) -> int:
    pop = read(args.population)
    geo = GeoContext.load(args.geography) if args.geography else None
    design = SamplingDesign.from_json(json.loads(Path(args.design).read_text())) if args.design else SamplingDesign()
    design.validate()
    draw = draw_sample(pop, geo, design, stage_rng(args, "sample"))
    write(draw.survey, args.out)
    manifest = Path(args.out).with_suffix(".sample.json")
    manifest.write_text(json.dumps(draw.manifest(args.seed, design), indent=1, sort_keys=True))
    print(f"sample: {draw.survey.n} individuals in {len(draw.selected)} clusters -> {args.out}")
    return 0


def cmd_geomask(args) -> int:
    survey = read(args.survey)
    geo = GeoContext.load(args.geography)
    params = GeomaskParams(**json.loads(Path(args.params).read_text())) if args.params else GeomaskParams()
    masked = displace_clusters(geo, urban_flags_from_table(survey), params, stage_rng(args, "geomask"),
                               clusters=set(survey.role_column("cluster")))
    write(apply_mask(survey, masked), args.out)
    masked.log_frame().to_csv(Path(args.out).with_suffix(".displacement.csv"), index=False, lineterminator="\n")
    print(f"geomask: {masked.share_reassigned():.1%} of clusters changed zip -> {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    survey = read(args.survey)
    constraints = ConstraintSet.load(args.constraints) if args.constraints else None
    if args.composite_direct:
        survey = with_direct_indicators(survey, composite_spec(args.composite))
    syn = synthesize_survey(survey, args.level, args.encoding, args.marginals, constraints,
                            stage_rng(args, "synthesize"), args.rate)
    write(syn, args.out)
    print(f"synthesize: {syn.n} synthetic records -> {args.out}")
    return 0


def cmd_risk(args) -> int:
    pop = read(args.population)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    true = read(args.true) if args.true else None
    for path in args.survey:
        table = read(path)
        attrs = default_risk_attributes(table.schema)
        frames.append(population_uniqueness(table, pop, attrs).to_frame().assign(survey=Path(path).stem))
    params = ForestParams(n_trees=args.trees)
    if true is not None:
        attack = []
        for path in args.survey:
            if Path(path).resolve() == Path(args.true).resolve():
                continue
            res = run_attack(read(path), true, "model", params, stage_rng(args, "attack", Path(path).stem))
            attack.append(res.to_frame().assign(survey=Path(path).stem))
            if args.reidentify:
                curve = reidentified_uniqueness(read(path), true, pop, None, params,
                                                stage_rng(args, "reidentify", Path(path).stem))
                frames.append(curve.to_frame().assign(survey=Path(path).stem + ":reidentified"))
        if attack:
            pd.concat(attack, ignore_index=True).to_csv(out / "attack.csv", index=False, lineterminator="\n")
    uq = pd.concat(frames, ignore_index=True)
    uq.to_csv(out / "uniqueness.csv", index=False, lineterminator="\n")
    full = uq[uq.prefix_length == uq.prefix_length.max()]
    for _, row in full.iterrows():
        print(f"uniqueness {row.survey}: {row.xi:.4f}")
    return 0


def cmd_utility(args) -> int:
    census = read(args.census)
    survey = read(args.survey)
    grid = kl_grid(survey, census, use_weights=args.weighted)
    long = grid.long()
    long["n"] = long["zip"].map(grid.sample_size).astype(int)
    long.to_csv(args.out, index=False, lineterminator="\n")
    print(f"utility: overall Z_KL {grid.overall:.4f}, size trend rho {grid.size_trend():.3f} -> {args.out}")
    if args.composite_true:
        spec = composite_spec(args.composite)
        report = composite_report(survey, read(args.composite_true), spec)
        path = Path(args.out).with_suffix(".composite.csv")
        report.to_csv(path, index=False, lineterminator="\n")
        print(f"utility: composite report -> {path}")
    return 0


def cmd_sae(args) -> int:
    survey = read(args.survey)
    covariates = pd.read_csv(args.covariates, dtype={"zip_id": str})
    spec = composite_spec(args.composite)
    truth = area_truth(read(args.population), args.target, spec) if args.population else None
    if not args.rate:
        res = augment(survey, covariates, args.target, spec, truth, args.method)
        res.predictions.to_csv(args.out, index=False, lineterminator="\n")
        Path(args.out).with_suffix(".fit.json").write_text(json.dumps(res.fit.to_json(), indent=1, sort_keys=True))
        print(json.dumps(res.metrics, indent=1, sort_keys=True))
        return 0
    # rate sweep: re-synthesise the (true) survey at each multiplier
    rows = []
    for rate in args.rate:
        syn = synthesize_survey(survey, args.level, "frequency", "gaussian", None,
                                stage_rng(args, "rate_sweep", rate), rate)
        res = augment(syn, covariates, args.target, spec, truth, args.method)
        rows.append({"rate": rate, "n": syn.n, **res.metrics})
    table = pd.DataFrame(rows)
    table.to_csv(args.out, index=False, lineterminator="\n")
    print(table.to_string(index=False))
    return 0


def cmd_study(args) -> int:
    cfg = StudyConfig.load(args.config) if args.config else StudyConfig()
    for name in ("replicates", "seed", "out_dir", "level", "encoding", "marginals", "rate"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.rate_sweep:
        cfg.rate_sweep = list(args.rate_sweep)
    if args.fail_fast:
        cfg.fail_fast = True
    if args.no_intermediate:
        cfg.keep_intermediate = False
    manifest = run_study(cfg, args.workers)
    print(f"study: {len(manifest.succeeded)} of {cfg.replicates} replicates succeeded -> {cfg.out_dir}")
    if manifest.failed:
        print(f"failed replicates: {manifest.failed}", file=sys.stderr)
    return manifest.exit_code


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geosynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--stream", type=int, default=0, help="Philox stream of the master generator")
        return sp

    sp = add("population", cmd_population, "generate a synthetic census with geography and covariates")
    sp.add_argument("--spec", help="PopulationSpec JSON (bundled default otherwise)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("sample", cmd_sample, "draw a stratified two-stage survey")
    sp.add_argument("--population", required=True)
    sp.add_argument("--geography")
    sp.add_argument("--design", help="SamplingDesign JSON")
    sp.add_argument("--out", required=True)

    sp = add("geomask", cmd_geomask, "displace cluster points and rewrite zip codes")
    sp.add_argument("--survey", required=True)
    sp.add_argument("--geography", required=True)
    sp.add_argument("--params", help="GeomaskParams JSON")
    sp.add_argument("--out", required=True)

    sp = add("synthesize", cmd_synthesize, "copula-based synthetic survey")
    sp.add_argument("--survey", required=True)
    sp.add_argument("--level", choices=("country", "strata", "zip"), default="strata")
    sp.add_argument("--encoding", choices=("frequency", "ordinal", "onehot"), default="frequency")
    sp.add_argument("--marginals", choices=("gaussian", "ks_select"), default="gaussian")
    sp.add_argument("--rate", type=float, default=1.0, help="synthetic sampling-rate multiplier")
    sp.add_argument("--constraints", help="ConstraintSet JSON")
    sp.add_argument("--composite-direct", action="store_true", help="synthesise composite indicators directly")
    sp.add_argument("--composite", help="CompositeSpec JSON")
    sp.add_argument("--out", required=True)

    sp = add("risk", cmd_risk, "population uniqueness and zip attack")
    sp.add_argument("--population", required=True)
    sp.add_argument("--survey", required=True, nargs="+", help="one or more released surveys")
    sp.add_argument("--true", help="true survey; enables the attack")
    sp.add_argument("--reidentify", action="store_true", help="uniqueness after attack-predicted zips")
    sp.add_argument("--trees", type=int, default=100)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("utility", cmd_utility, "per-zip normalised KL grid")
    sp.add_argument("--survey", required=True)
    sp.add_argument("--census", required=True)
    sp.add_argument("--weighted", action="store_true")
    sp.add_argument("--composite-true", help="true survey for the composite-indicator report")
    sp.add_argument("--composite", help="CompositeSpec JSON")
    sp.add_argument("--out", required=True)

    sp = add("sae", cmd_sae, "Fay-Herriot augmentation")
    sp.add_argument("--survey", required=True)
    sp.add_argument("--covariates", required=True)
    sp.add_argument("--population", help="census for scoring against area truth")
    sp.add_argument("--target", default="nbi")
    sp.add_argument("--composite", help="CompositeSpec JSON")
    sp.add_argument("--method", choices=("REML", "ML"), default="REML")
    sp.add_argument("--rate", type=float, nargs="*", help="synthetic rate sweep over the given survey")
    sp.add_argument("--level", choices=("country", "strata", "zip"), default="strata")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("study", help="seeded multi-replicate simulation study")
    sp.set_defaults(func=cmd_study)
    sp.add_argument("--config", help="StudyConfig JSON; flags override it")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", dest="out_dir")
    sp.add_argument("--level", choices=("country", "strata", "zip"))
    sp.add_argument("--encoding", choices=("frequency", "ordinal", "onehot"))
    sp.add_argument("--marginals", choices=("gaussian", "ks_select"))
    sp.add_argument("--rate", type=float)
    sp.add_argument("--rate-sweep", type=float, nargs="*")
    sp.add_argument("--workers", type=int, help="worker processes (default: GEOSYNTH_WORKERS or 1)")
    sp.add_argument("--fail-fast", action="store_true")
    sp.add_argument("--no-intermediate", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GeoSynthError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
