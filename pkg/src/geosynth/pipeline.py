"""Seeded multi-replicate simulation study.

Each replicate draws a true survey from the population, geomasks it,
synthesises it, then scores all three versions for utility (KL grid, FH
augmentation, composite indicators) and risk (uniqueness, zip attack).
Results go to long-format CSVs; a manifest records seeds, hashes and timings.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .copula import synthesize_survey
from .data_model import ConstraintSet, MicroTable, write_table
from .errors import GeoSynthError, SpecInvalid
from .fayherriot import area_truth, augment
from .forest import ForestParams
from .geomask import GeomaskParams, apply_mask, displace_clusters, urban_flags_from_table
from .privacy import default_risk_attributes, population_uniqueness, reidentified_uniqueness, run_attack
from .rng import Rng
from .sampling import DEFAULT_COVARIATES, PopulationSpec, SamplingDesign, area_covariates, draw_sample, generate_population
from .utility import CompositeSpec, composite_report, kl_grid, with_direct_indicators

log = logging.getLogger(__name__)

SURVEY_TYPES = ("true", "geomasked", "synthetic")
RESULT_FILES = ("kl_grid", "uniqueness", "attack", "fh_metrics", "fh_predictions", "composite", "rate_sweep",
                "samples", "errors")
WORKERS_ENV = "GEOSYNTH_WORKERS"


@dataclass
class StudyConfig:
    replicates: int = 100
    seed: int = 0
    population: str | None = None  # PopulationSpec JSON; bundled default when None
    design: dict = field(default_factory=lambda: SamplingDesign().to_json())
    geomask: dict = field(default_factory=lambda: asdict(GeomaskParams()))
    level: str = "strata"
    encoding: str = "frequency"
    marginals: str = "gaussian"
    rate: float = 1.0
    rate_sweep: list = field(default_factory=list)
    constraints: str | None = None
    attack: dict = field(default_factory=lambda: {"n_trees": 100})
    composite: str | None = None  # CompositeSpec JSON; bundled default when None
    composite_analysis: bool = True
    covariates: str | None = None  # CSV zip_id, cov_1..; simulated from the population when None
    target: str = "nbi"
    out_dir: str = "study_out"
    keep_intermediate: bool = True
    fail_fast: bool = False

    def validate(self) -> None:
        if self.replicates < 1:
            raise SpecInvalid("replicates must be >= 1")
        if self.rate <= 0 or any(r <= 0 for r in self.rate_sweep):
            raise SpecInvalid("synthetic rates must be positive")
        for name in ("population", "constraints", "composite", "covariates"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise SpecInvalid(f"{name} file {path} does not exist")
        SamplingDesign.from_json(self.design).validate()
        GeomaskParams(**self.geomask)
        ForestParams(**self.attack)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "StudyConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise SpecInvalid(f"bad study config: {exc}") from None

    @classmethod
    def load(cls, path) -> "StudyConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class RunManifest:
    config: dict
    version: str
    replicate_seeds: list
    artifacts: dict
    timings: dict
    succeeded: list
    failed: list
    sample_sizes: dict

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @property
    def exit_code(self) -> int:
        if not self.failed:
            return 0
        return 2 if self.succeeded else 1


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------------- study context


@dataclass(eq=False)
class StudyContext:
    config: StudyConfig
    population: MicroTable
    geo: object
    covariates: pd.DataFrame
    composite: CompositeSpec
    truth: dict
    constraints: ConstraintSet | None
    urban: dict

    @classmethod
    def build(cls, config: StudyConfig) -> "StudyContext":
        root = Rng(config.seed)
        spec = PopulationSpec.load(config.population) if config.population else PopulationSpec.default()
        population, geo = generate_population(spec, root.child("population"))
        if config.covariates:
            covariates = pd.read_csv(config.covariates, dtype={"zip_id": str})
        else:
            covariates = area_covariates(population, root.child("covariates"), DEFAULT_COVARIATES)
        composite = CompositeSpec.load(config.composite) if config.composite else CompositeSpec.default()
        truth = area_truth(population, config.target, composite)
        constraints = ConstraintSet.load(config.constraints) if config.constraints else None
        return cls(config, population, geo, covariates, composite, truth, constraints,
                   urban_flags_from_table(population))


def replicate_rng(config: StudyConfig, r: int) -> Rng:
    return Rng(config.seed).child("replicate", r)


def stage_rngs(config: StudyConfig, r: int) -> dict:
    rr = replicate_rng(config, r)
    return {name: rr.child(name) for name in ("sample", "geomask", "synthesize", "attack", "reidentify",
                                               "composite", "rate_sweep")}


def run_replicate(ctx: StudyContext, r: int, out_dir: Path | None = None) -> dict:
    """All stages of one replicate; returns result frames keyed by file name."""
    cfg = ctx.config
    rngs = stage_rngs(cfg, r)
    timings = {}
    t = time.perf_counter()

    def tick(stage):
        nonlocal t
        now = time.perf_counter()
        timings[stage] = round(now - t, 4)
        t = now

    design = SamplingDesign.from_json(cfg.design)
    draw = draw_sample(ctx.population, ctx.geo, design, rngs["sample"])
    true = draw.survey
    tick("sample")
    masked = displace_clusters(ctx.geo, ctx.urban, GeomaskParams(**cfg.geomask), rngs["geomask"],
                               clusters=set(true.role_column("cluster")))
    geomasked = apply_mask(true, masked)
    tick("geomask")
    synthetic = synthesize_survey(true, cfg.level, cfg.encoding, cfg.marginals, ctx.constraints,
                                  rngs["synthesize"], cfg.rate)
    tick("synthesize")
    surveys = {"true": true, "geomasked": geomasked, "synthetic": synthetic}
    if out_dir is not None and cfg.keep_intermediate:
        rep_dir = out_dir / "replicates" / f"r{r:04d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        for name, table in surveys.items():
            write_table(table, rep_dir / f"{name}.csv", rep_dir / f"{name}.schema.json")
        masked.log_frame().to_csv(rep_dir / "displacement.csv", index=False, lineterminator="\n")
        (rep_dir / "sample.json").write_text(json.dumps(draw.manifest(None, design), indent=1, sort_keys=True))

    out = {}
    kl_rows = []
    for name, table in surveys.items():
        grid = kl_grid(table, ctx.population)
        long = grid.long()
        long["n"] = long["zip"].map(grid.sample_size).astype(int)
        long.insert(0, "survey_type", name)
        kl_rows.append(long)
    out["kl_grid"] = pd.concat(kl_rows, ignore_index=True)
    tick("utility_kl")

    attrs = default_risk_attributes(true.schema)
    curves = {name: population_uniqueness(table, ctx.population, attrs) for name, table in surveys.items()}
    params = ForestParams(**cfg.attack)
    curves["reidentified"] = reidentified_uniqueness(synthetic, true, ctx.population, attrs, params,
                                                     rngs["reidentify"])
    out["uniqueness"] = pd.concat([c.to_frame().assign(survey_type=name) for name, c in curves.items()],
                                  ignore_index=True)[["survey_type", "prefix_length", "attribute", "xi"]]
    attack_frames = []
    for name in ("geomasked", "synthetic"):
        res = run_attack(surveys[name], true, "model", params, rngs["attack"].child(name)).to_frame()
        res.insert(0, "survey_type", name)
        attack_frames.append(res)
    out["attack"] = pd.concat(attack_frames, ignore_index=True)
    tick("risk")

    metric_rows, pred_frames = [], []
    for name, table in surveys.items():
        res = augment(table, ctx.covariates, cfg.target, ctx.composite, ctx.truth)
        metric_rows += [{"survey_type": name, "metric": k, "value": float(v)} for k, v in res.metrics.items()]
        pred_frames.append(res.predictions.assign(survey_type=name))
    out["fh_metrics"] = pd.DataFrame(metric_rows)
    out["fh_predictions"] = pd.concat(pred_frames, ignore_index=True)
    tick("sae")

    if cfg.composite_analysis:
        extended = with_direct_indicators(true, ctx.composite)
        direct = synthesize_survey(extended, cfg.level, cfg.encoding, cfg.marginals, ctx.constraints,
                                   rngs["composite"], cfg.rate)
        out["composite"] = composite_report(direct, true, ctx.composite)
        tick("composite")

    sweep = []
    for rate in cfg.rate_sweep:
        table = synthesize_survey(true, cfg.level, cfg.encoding, cfg.marginals, ctx.constraints,
                                  rngs["rate_sweep"].child(rate), rate)
        res = augment(table, ctx.covariates, cfg.target, ctx.composite, ctx.truth)
        sweep += [{"rate": rate, "metric": k, "value": float(v)} for k, v in res.metrics.items()]
    if sweep:
        out["rate_sweep"] = pd.DataFrame(sweep)
        tick("rate_sweep")

    out["samples"] = pd.DataFrame([{"n_individuals": true.n, "n_clusters": len(draw.selected),
                                    "share_zip_reassigned": masked.share_reassigned()}])
    for key, frame in out.items():
        frame.insert(0, "replicate", r)
    out["_timings"] = timings
    return out


_CTX: StudyContext | None = None


def _init_worker(ctx: StudyContext) -> None:
    global _CTX
    _CTX = ctx
    logging.disable(logging.WARNING)


def _safe_replicate(r: int, out_dir: str | None, ctx: StudyContext | None = None) -> tuple:
    ctx = ctx or _CTX
    try:
        return r, run_replicate(ctx, r, Path(out_dir) if out_dir else None), None
    except GeoSynthError as exc:
        if ctx.config.fail_fast:
            raise
        return r, None, f"{type(exc).__name__}: {exc}"


def run_study(config: StudyConfig, workers: int | None = None) -> RunManifest:
    """Run every replicate, write result CSVs and the manifest, return the manifest."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ctx = StudyContext.build(config)
    setup = round(time.perf_counter() - t0, 4)
    if config.keep_intermediate:
        write_table(ctx.population, out_dir / "population.csv", out_dir / "population.schema.json")
        ctx.geo.save(out_dir / "geography.geojson")
        ctx.covariates.to_csv(out_dir / "covariates.csv", index=False, lineterminator="\n")

    workers = workers or worker_count()
    results = []
    if workers > 1 and config.replicates > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            futures = [pool.submit(_safe_replicate, r, str(out_dir)) for r in range(config.replicates)]
            results = [f.result() for f in futures]
    else:
        for r in range(config.replicates):
            results.append(_safe_replicate(r, str(out_dir), ctx))
    results.sort(key=lambda item: item[0])

    tables = {name: [] for name in RESULT_FILES}
    timings = {"setup": setup}
    succeeded, failed = [], []
    for r, res, err in results:
        if err is not None:
            failed.append(r)
            tables["errors"].append(pd.DataFrame([{"replicate": r, "error": err}]))
            log.error("replicate %d failed: %s", r, err)
            continue
        succeeded.append(r)
        timings[f"r{r:04d}"] = res.pop("_timings")
        for key, frame in res.items():
            tables[key].append(frame)

    artifacts = {}
    for name, frames in tables.items():
        if not frames:
            continue
        path = out_dir / f"{name}.csv"
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, lineterminator="\n")
        artifacts[path.name] = sha256(path)
    summary = summarize(out_dir)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    artifacts["summary.json"] = sha256(out_dir / "summary.json")
    if config.keep_intermediate:
        for path in sorted(out_dir.rglob("*")):
            rel = str(path.relative_to(out_dir))
            if path.is_file() and rel not in artifacts and rel != "manifest.json":
                artifacts[rel] = sha256(path)

    sizes = {}
    if tables["samples"]:
        n = pd.concat(tables["samples"]).n_individuals
        sizes = {"min": int(n.min()), "max": int(n.max()), "mean": float(n.mean())}
    manifest = RunManifest(config.to_json(), __version__,
                           [{"replicate": r, "seed": config.seed, "stream": replicate_rng(config, r).stream,
                             "stages": {k: v.stream for k, v in stage_rngs(config, r).items()}}
                            for r in range(config.replicates)],
                           artifacts, timings, succeeded, failed, sizes)
    manifest.save(out_dir / "manifest.json")
    return manifest


def summarize(out_dir) -> dict:
    """Medians and means that the figures are built from (plot-ready)."""
    out_dir = Path(out_dir)
    summary = {}
    kl_path = out_dir / "kl_grid.csv"
    if kl_path.exists():
        kl = pd.read_csv(kl_path)
        overall = kl.groupby(["survey_type", "replicate"]).z.mean().groupby("survey_type").mean()
        summary["z_kl_overall"] = {k: float(v) for k, v in overall.items()}
    uq_path = out_dir / "uniqueness.csv"
    if uq_path.exists():
        uq = pd.read_csv(uq_path)
        full = uq[uq.prefix_length == uq.prefix_length.max()]
        summary["uniqueness_full"] = {k: float(v) for k, v in full.groupby("survey_type").xi.mean().items()}
    at_path = out_dir / "attack.csv"
    if at_path.exists():
        at = pd.read_csv(at_path)
        med = at.groupby(["survey_type", "method", "stratum"]).accuracy.median()
        summary["attack_median"] = {f"{s}/{m}/{st}": float(v) for (s, m, st), v in med.items()}
    fh_path = out_dir / "fh_metrics.csv"
    if fh_path.exists():
        fh = pd.read_csv(fh_path)
        summary["fh_median"] = {f"{s}/{m}": float(v)
                                for (s, m), v in fh.groupby(["survey_type", "metric"]).value.median().items()}
    return summary
