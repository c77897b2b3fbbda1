import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosynth.data_model import CATEGORICAL, CONTINUOUS, MISSING, AttributeSpec, MicroTable, Schema
from geosynth.encoding import Encoder, fit_encoder, frequency_codebook, transform, back_transform
from geosynth.errors import EmptyColumn, UnknownClass


def abc_book():
    return frequency_codebook(["A"] * 5 + ["B"] * 3 + ["C"] * 2, ["A", "B", "C"])


def test_frequency_intervals():
    book = abc_book()
    assert np.allclose(book.lower, [0, 0.5, 0.8])
    assert np.allclose(book.upper, [0.5, 0.8, 1.0])
    assert np.allclose(book.midpoints, [0.25, 0.65, 0.9])
    assert book.encode(np.array(["B"]))[0, 0] == pytest.approx(0.65)
    assert book.decode([0.6, -0.2, 1.7, 0.5]).tolist() == ["B", "A", "C", "B"]


def test_single_class_and_ties():
    book = frequency_codebook(["x"] * 4, ["x", "y"])
    assert book.interval("x") == (0.0, 1.0) and book.midpoints[0] == 0.5
    assert book.unobserved == ("y",)
    tie = frequency_codebook(["b", "a", "a", "b"], ["b", "a"])
    assert tie.classes == ("b", "a")


def test_unknown_class_and_empty():
    with pytest.raises(UnknownClass):
        abc_book().encode(np.array(["Z"]))
    with pytest.raises(EmptyColumn):
        frequency_codebook([], ["A"])


def test_uniform_draws_reproduce_proportions():
    book = abc_book()
    u = np.random.default_rng(0).random(100_000)
    got = pd.Series(book.decode(u)).value_counts(normalize=True)
    for c, p in zip("ABC", [0.5, 0.3, 0.2]):
        se = np.sqrt(p * (1 - p) / len(u))
        assert abs(got[c] - p) < 3 * se


@st.composite
def random_table(draw):
    n_attr = draw(st.integers(1, 4))
    n = draw(st.integers(1, 60))
    specs, cols = [], {}
    for a in range(n_attr):
        k = draw(st.integers(1, 50))
        classes = [f"c{i}" for i in range(k)] + [MISSING]
        specs.append(AttributeSpec(f"a{a}", CATEGORICAL, tuple(classes)))
        # skewed choices create ties and unobserved labels
        cols[f"a{a}"] = draw(st.lists(st.sampled_from(classes[: draw(st.integers(1, k + 1))]), min_size=n, max_size=n))
    specs.append(AttributeSpec("x", CONTINUOUS))
    cols["x"] = draw(st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n))
    return MicroTable(Schema(tuple(specs)), pd.DataFrame(cols))


@settings(max_examples=60, deadline=None)
@given(random_table(), st.sampled_from(["frequency", "ordinal", "onehot"]))
def test_round_trip_all_schemes(table, scheme):
    enc = fit_encoder(table, scheme)
    enc = Encoder.from_json(enc.to_json())
    encoded = transform(table, enc)
    n_cat = len([a for a in table.schema.analysis_attributes if table.schema[a].is_categorical])
    if scheme != "onehot":
        assert encoded.width == 1 + n_cat
    back = back_transform(encoded, enc)
    pd.testing.assert_frame_equal(back.data, table.data)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(list("abcdefg")), min_size=1, max_size=200))
def test_frequency_widths(values):
    book = frequency_codebook(values, list("abcdefg"))
    assert abs(book.widths.sum() - 1) < 1e-12
    assert np.all(np.diff(book.widths) <= 1e-15)
    assert set(book.decode(np.linspace(-3, 3, 50))) <= set(book.classes)


def test_ordinal_and_onehot_decode_total():
    t = MicroTable(Schema((AttributeSpec("a", CATEGORICAL, ("x", "y", "z")),)), pd.DataFrame({"a": ["x", "z"]}))
    ordinal = fit_encoder(t, "ordinal").codebooks["a"]
    # the missing label is the last declared class, so large values clamp onto it
    assert ordinal.decode([-5, 0.4, 0.6, 1.5, 9]).tolist() == ["x", "x", "y", "z", MISSING]
    onehot = fit_encoder(t, "onehot").codebooks["a"]
    assert onehot.decode(np.array([[0.1, 0.7, 0.2, 0.0]])).tolist() == ["y"]
