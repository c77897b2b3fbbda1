"""Disclosure-risk measures: population uniqueness and a zip re-identification attack."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .data_model import MISSING, MicroTable, Schema
from .errors import DegenerateStratum, SchemaMismatch
from .forest import ForestParams, RandomForest, fit_forest
from .rng import Rng

NAN_SENTINEL = -1e12


# ----------------------------------------------------------------------------- uniqueness


@dataclass(frozen=True, eq=False)
class UniquenessCurve:
    attributes: tuple
    xi: np.ndarray
    n_survey: int = 0

    @property
    def full(self) -> float:
        return float(self.xi[-1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"prefix_length": np.arange(1, len(self.attributes) + 1),
                             "attribute": list(self.attributes), "xi": self.xi})


def default_risk_attributes(schema: Schema, target: str | None = None) -> list:
    """Zip (or the given target) first, then analysis attributes in schema order."""
    target = target or schema.role("zip_code")
    return [target] + [a for a in schema.analysis_attributes if a != target]


def _check_vocab(a: Schema, b: Schema, attrs: Sequence[str]) -> None:
    for attr in attrs:
        if attr not in a or attr not in b:
            raise SchemaMismatch(f"attribute {attr!r} missing from one of the tables")
        sa, sb = a[attr], b[attr]
        if sa.kind != sb.kind or tuple(sa.classes) != tuple(sb.classes):
            raise SchemaMismatch(f"attribute {attr!r} has different vocabularies in survey and population")


def _column_keys(survey: pd.Series, population: pd.Series) -> tuple:
    both = pd.concat([survey, population], ignore_index=True)
    if both.dtype.kind == "f":
        both = both.map(lambda v: MISSING if np.isnan(v) else repr(float(v)))
    codes, _ = pd.factorize(both.astype(object), sort=False)
    return codes[: len(survey)], codes[len(survey):]


def population_uniqueness(survey: MicroTable, population: MicroTable, attrs: Sequence[str]) -> UniquenessCurve:
    """Share of survey rows whose attribute tuple occurs exactly once in the population, per prefix."""
    attrs = list(attrs)
    _check_vocab(survey.schema, population.schema, attrs)
    n_s = survey.n
    key_s = np.zeros(n_s, dtype=np.int64)
    key_p = np.zeros(population.n, dtype=np.int64)
    xi = np.empty(len(attrs))
    for i, attr in enumerate(attrs):
        cs, cp = _column_keys(survey.data[attr], population.data[attr])
        width = int(max(cs.max(initial=0), cp.max(initial=0))) + 1
        # refactorise the combined key so it never overflows
        joint, _ = pd.factorize(np.concatenate([key_s * width + cs, key_p * width + cp]))
        key_s, key_p = joint[:n_s].astype(np.int64), joint[n_s:].astype(np.int64)
        counts = np.bincount(key_p, minlength=int(joint.max(initial=0)) + 1)
        xi[i] = float(np.mean(counts[key_s] == 1)) if n_s else 0.0
    return UniquenessCurve(tuple(attrs), xi, n_s)


# ----------------------------------------------------------------------------- attack


def attack_features(schema: Schema, target: str | None = None) -> list:
    target = target or schema.role("zip_code")
    return [a for a in schema.analysis_attributes if a != target]


def feature_matrix(table: MicroTable, features: Sequence[str]) -> np.ndarray:
    """Ordinal codes in schema order for categoricals, raw values for continuous."""
    cols = []
    for f in features:
        spec = table.schema[f]
        if spec.is_categorical:
            lookup = {c: float(i) for i, c in enumerate(spec.labels)}
            cols.append(table.data[f].map(lookup).to_numpy(dtype=float))
        else:
            cols.append(np.nan_to_num(table.data[f].to_numpy(dtype=float), nan=NAN_SENTINEL))
    return np.column_stack(cols) if cols else np.zeros((table.n, 0))


@dataclass(eq=False)
class AttackModel:
    stratum: str
    target: str
    features: tuple
    forest: RandomForest
    label_shares: pd.Series

    def predict(self, table: MicroTable) -> np.ndarray:
        return self.forest.predict(feature_matrix(table, self.features))


def _stratum_rows(table: MicroTable, stratum) -> MicroTable:
    s_col = table.schema.role("stratum")
    return table.select(table.data[s_col].to_numpy(dtype=object) == stratum)


def train_attack(perturbed: MicroTable, stratum, params: ForestParams | None = None,
                 rng: Rng | None = None, target: str | None = None) -> AttackModel:
    params = params or ForestParams()
    rng = rng or Rng(0)
    target = target or perturbed.schema.role("zip_code")
    sub = _stratum_rows(perturbed, stratum)
    labels = sub.data[target].to_numpy(dtype=object)
    if len(set(labels)) < 2:
        raise DegenerateStratum(f"stratum {stratum}: fewer than two {target} labels in the training data")
    features = tuple(attack_features(perturbed.schema, target))
    forest = fit_forest(feature_matrix(sub, features), labels.astype(str), params, rng.generator())
    shares = pd.Series(labels).value_counts(normalize=True).sort_index()
    return AttackModel(str(stratum), target, features, forest, shares)


@dataclass
class AttackResult:
    rows: list = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        cols = ["stratum", "method", "n_zips", "n_rows", "accuracy", "expected_random", "degenerate"]
        return pd.DataFrame(self.rows, columns=cols)

    def extend(self, other: "AttackResult") -> None:
        self.rows.extend(other.rows)


def expected_random_accuracy(guess_shares: pd.Series, true_labels: np.ndarray) -> float:
    true_shares = pd.Series(true_labels).value_counts(normalize=True)
    return float(sum(q * true_shares.get(z, 0.0) for z, q in guess_shares.items()))


def evaluate_attack(model: AttackModel, true_survey: MicroTable, stratum, rng: Rng,
                    method: str = "model") -> AttackResult:
    """Accuracy of the model on the true stratum, plus a frequency-matched random guess."""
    missing = [f for f in model.features if f not in true_survey.schema]
    if missing or model.target not in true_survey.schema:
        raise SchemaMismatch(f"true survey lacks attack columns: {missing or [model.target]}")
    sub = _stratum_rows(true_survey, stratum)
    truth = sub.data[model.target].to_numpy(dtype=object).astype(str)
    pred = model.predict(sub)
    gen = rng.generator()
    guess = gen.choice(model.label_shares.index.to_numpy(dtype=object), size=len(truth),
                       p=model.label_shares.to_numpy(dtype=float))
    n_zips = len(set(truth))
    expected = expected_random_accuracy(model.label_shares, truth)
    return AttackResult([
        (str(stratum), method, n_zips, len(truth), float(np.mean(pred == truth)), expected, False),
        (str(stratum), "random", n_zips, len(truth), float(np.mean(guess == truth)), expected, False),
    ])


def run_attack(perturbed: MicroTable, true_survey: MicroTable, method: str,
               params: ForestParams | None = None, rng: Rng | None = None) -> AttackResult:
    """Per-stratum attack; strata with a single training zip score trivially and are flagged."""
    rng = rng or Rng(0)
    s_col = true_survey.schema.role("stratum")
    z_col = true_survey.schema.role("zip_code")
    out = AttackResult()
    for stratum in sorted(set(true_survey.data[s_col])):
        try:
            model = train_attack(perturbed, stratum, params, rng.child("train", stratum))
        except DegenerateStratum:
            train = _stratum_rows(perturbed, stratum).data[z_col].astype(str)
            truth = _stratum_rows(true_survey, stratum).data[z_col].astype(str).to_numpy()
            only = train.iloc[0] if len(train) else None
            acc = float(np.mean(truth == only))
            n_z = len(set(truth))
            out.rows.append((str(stratum), method, n_z, len(truth), acc, acc, True))
            out.rows.append((str(stratum), "random", n_z, len(truth), acc, acc, True))
            continue
        out.extend(evaluate_attack(model, true_survey, stratum, rng.child("guess", stratum), method))
    return out


def reidentified_uniqueness(synthetic: MicroTable, true_stripped: MicroTable, population: MicroTable,
                            attrs: Sequence[str] | None = None, params: ForestParams | None = None,
                            rng: Rng | None = None, target: str | None = None) -> UniquenessCurve:
    """Uniqueness of the true survey after its target column is replaced by attack predictions."""
    rng = rng or Rng(0)
    schema = true_stripped.schema
    target = target or schema.role("zip_code")
    attrs = list(attrs) if attrs is not None else default_risk_attributes(schema, target)
    s_col = schema.role("stratum")
    predicted = np.empty(true_stripped.n, dtype=object)
    strata = true_stripped.data[s_col].to_numpy(dtype=object)
    for stratum in sorted(set(strata)):
        mask = strata == stratum
        try:
            model = train_attack(synthetic, stratum, params, rng.child("train", stratum), target)
            predicted[mask] = model.predict(true_stripped.select(mask))
        except DegenerateStratum:
            labels = _stratum_rows(synthetic, stratum).data[target]
            predicted[mask] = labels.iloc[0] if len(labels) else MISSING
    data = true_stripped.data.copy()
    data[target] = predicted
    return population_uniqueness(true_stripped.with_data(data), population, attrs)

