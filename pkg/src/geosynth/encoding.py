"""Categorical <-> continuous transforms used before copula fitting.

Three schemes:

* ``frequency`` (default): each observed class gets a sub-interval of [0, 1)
  whose width is its observed share, largest class first (ties in schema
  order). A class is represented by its interval midpoint; decoding maps a
  real value back to the interval containing it, clamping outside [0, 1).
* ``ordinal``: class -> rank in schema order, decoded by nearest rank.
* ``onehot``: class -> indicator columns ``attr=class``, decoded by argmax.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .data_model import MISSING, MicroTable, Schema
from .errors import EmptyColumn, SpecInvalid, UnknownClass

log = logging.getLogger(__name__)

SCHEMES = ("frequency", "ordinal", "onehot")


@dataclass(frozen=True, eq=False)
class FrequencyCodebook:
    classes: tuple
    lower: np.ndarray
    upper: np.ndarray
    unobserved: tuple = ()

    @property
    def midpoints(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def interval(self, label) -> tuple:
        i = self.classes.index(label)
        return float(self.lower[i]), float(self.upper[i])

    def columns(self, attr: str) -> list:
        return [attr]

    def encode(self, values: np.ndarray) -> np.ndarray:
        lookup = dict(zip(self.classes, self.midpoints))
        try:
            return np.array([lookup[v] for v in values], dtype=float).reshape(-1, 1)
        except KeyError as exc:
            raise UnknownClass(f"class {exc.args[0]!r} has no frequency interval") from None

    def decode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        idx = np.searchsorted(self.upper, x, side="right")
        idx = np.clip(idx, 0, len(self.classes) - 1)
        return np.asarray(self.classes, dtype=object)[idx]

    def to_json(self) -> dict:
        return {"scheme": "frequency", "classes": list(self.classes), "lower": self.lower.tolist(),
                "upper": self.upper.tolist(), "unobserved": list(self.unobserved)}


@dataclass(frozen=True)
class OrdinalCodebook:
    classes: tuple

    def columns(self, attr: str) -> list:
        return [attr]

    def encode(self, values: np.ndarray) -> np.ndarray:
        lookup = {c: float(i) for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[v] for v in values], dtype=float).reshape(-1, 1)
        except KeyError as exc:
            raise UnknownClass(f"class {exc.args[0]!r} not in ordinal codebook") from None

    def decode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        idx = np.clip(np.floor(x + 0.5), 0, len(self.classes) - 1).astype(int)
        return np.asarray(self.classes, dtype=object)[idx]

    def to_json(self) -> dict:
        return {"scheme": "ordinal", "classes": list(self.classes)}


@dataclass(frozen=True)
class OneHotCodebook:
    classes: tuple

    def columns(self, attr: str) -> list:
        return [f"{attr}={c}" for c in self.classes]

    def encode(self, values: np.ndarray) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        out = np.zeros((len(values), len(self.classes)))
        try:
            idx = np.array([lookup[v] for v in values], dtype=int)
        except KeyError as exc:
            raise UnknownClass(f"class {exc.args[0]!r} not in one-hot codebook") from None
        out[np.arange(len(values)), idx] = 1.0
        return out

    def decode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, len(self.classes))
        return np.asarray(self.classes, dtype=object)[np.argmax(x, axis=1)]

    def to_json(self) -> dict:
        return {"scheme": "onehot", "classes": list(self.classes)}


def frequency_codebook(values: Iterable, declared: Iterable) -> FrequencyCodebook:
    values = pd.Series(list(values), dtype=object)
    if values.empty:
        raise EmptyColumn("cannot build a frequency codebook from an empty column")
    declared = list(declared)
    counts = values.value_counts(sort=False)
    order = {c: i for i, c in enumerate(declared)}
    extra = [c for c in counts.index if c not in order]
    for c in sorted(extra):
        order[c] = len(order)
    observed = sorted(counts.index, key=lambda c: (-int(counts[c]), order[c]))
    cum = np.concatenate([[0], np.cumsum([int(counts[c]) for c in observed])]).astype(float)
    bounds = cum / cum[-1]
    unobserved = tuple(c for c in declared if c not in counts.index)
    return FrequencyCodebook(tuple(observed), bounds[:-1].copy(), bounds[1:].copy(), unobserved)


@dataclass(frozen=True, eq=False)
class Encoder:
    scheme: str
    codebooks: Mapping

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise SpecInvalid(f"unknown encoding scheme {self.scheme!r}")

    def columns_for(self, attr: str) -> list:
        return self.codebooks[attr].columns(attr)

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "codebooks": {a: cb.to_json() for a, cb in self.codebooks.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Encoder":
        books = {}
        for attr, cb in obj["codebooks"].items():
            kind = cb["scheme"]
            if kind == "frequency":
                books[attr] = FrequencyCodebook(tuple(cb["classes"]), np.asarray(cb["lower"], dtype=float),
                                                np.asarray(cb["upper"], dtype=float), tuple(cb.get("unobserved", ())))
            elif kind == "ordinal":
                books[attr] = OrdinalCodebook(tuple(cb["classes"]))
            else:
                books[attr] = OneHotCodebook(tuple(cb["classes"]))
        return cls(obj["scheme"], books)


def fit_encoder(table: MicroTable, scheme: str = "frequency", columns: Iterable[str] | None = None,
                frequency_columns: Iterable[str] = ()) -> Encoder:
    """Build codebooks for the categorical columns of ``table``.

    ``frequency_columns`` are always frequency-encoded whatever the scheme
    (the copula conditions on a single continuous cluster column).
    """
    if scheme not in SCHEMES:
        raise SpecInvalid(f"unknown encoding scheme {scheme!r}")
    schema = table.schema
    forced = list(frequency_columns)
    if columns is None:
        columns = [a for a in schema.analysis_attributes if schema[a].is_categorical]
    columns = list(columns) + [c for c in forced if c not in columns]
    books = {}
    for attr in columns:
        spec = schema[attr]
        if not spec.is_categorical:
            raise SpecInvalid(f"attribute {attr!r} is not categorical")
        values = table.data[attr]
        if values.empty:
            raise EmptyColumn(f"attribute {attr!r} has no observations")
        declared = spec.labels or tuple(sorted(values.unique()))
        if scheme == "frequency" or attr in forced:
            book = frequency_codebook(values, declared)
            lost = [c for c in book.unobserved if c != MISSING]
            if lost and attr not in forced:
                log.info("attribute %s: declared classes never observed, cannot be synthesized: %s",
                 attr, lost)
        elif scheme == "ordinal":
            book = OrdinalCodebook(tuple(declared))
        else:
            book = OneHotCodebook(tuple(declared))
        books[attr] = book
    return Encoder(scheme, books)


@dataclass(frozen=True, eq=False)
class EncodedTable:
    values: pd.DataFrame
    passthrough: list
    encoded: dict
    schema: Schema

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return len(self.values)

    def column_attribute(self) -> dict:
        out = {p: p for p in self.passthrough}
        for attr, cols in self.encoded.items():
            for c in cols:
                out[c] = attr
        return out


def transform(table: MicroTable, enc: Encoder, attributes: Iterable[str] | None = None) -> EncodedTable:
    """Continuous columns pass through; categorical columns are encoded."""
    schema = table.schema
    if attributes is None:
        attributes = schema.analysis_attributes + [a for a in enc.codebooks if a not in schema.analysis_attributes]
    attributes = list(attributes)
    passthrough = [a for a in attributes if not schema[a].is_categorical]
    categorical = [a for a in attributes if schema[a].is_categorical]
    blocks = {p: table.data[p].to_numpy(dtype=float) for p in passthrough}
    encoded = {}
    for attr in categorical:
        if attr not in enc.codebooks:
            raise UnknownClass(f"no codebook for attribute {attr!r}")
        book = enc.codebooks[attr]
        cols = book.columns(attr)
        mat = book.encode(table.data[attr].to_numpy(dtype=object))
        for i, c in enumerate(cols):
            blocks[c] = mat[:, i]
        encoded[attr] = cols
    frame = pd.DataFrame(blocks, index=range(table.n))
    return EncodedTable(frame, passthrough, encoded, schema.subset(attributes))


def back_transform(table: EncodedTable, enc: Encoder, provenance: str = "synthetic") -> MicroTable:
    data = {}
    for p in table.passthrough:
        data[p] = table.values[p].to_numpy(dtype=float)
    for attr, cols in table.encoded.items():
        data[attr] = enc.codebooks[attr].decode(table.values[cols].to_numpy(dtype=float))
    frame = pd.DataFrame(data)[table.schema.names]
    return MicroTable(table.schema, frame, provenance)


def decode_columns(enc: Encoder, attr: str, x: np.ndarray) -> np.ndarray:
    return enc.codebooks[attr].decode(x)
