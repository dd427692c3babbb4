import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrgenius.data import ColumnSchema, ObservationTable, load_csv, relevance_diagnostic, write_csv
from mrgenius.errors import DataValidationError, WeakIdentificationWarning

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=20))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    arr = np.array(rows)
    table = ObservationTable(g=arr[:, 0], a=arr[:, 1], y=arr[:, 2])
    schema = ColumnSchema(iv_cols=("g",), exposure_col="a", outcome_col="y")
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv(table, path, schema)
    back = load_csv(path, schema)
    assert np.array_equal(back.g, table.g)
    assert np.array_equal(back.a, table.a)
    assert np.array_equal(back.y, table.y)


def test_load_csv_reports_every_bad_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("g,a,y\n1,2,3\n1,,3\n0,x,1\n1,1,1\n")
    schema = ColumnSchema(iv_cols=("g",), exposure_col="a", outcome_col="y")
    with pytest.raises(DataValidationError) as info:
        load_csv(path, schema)
    assert [row for row, _ in info.value.errors] == [2, 3]


def test_load_csv_missing_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("g,a\n1,2\n")
    with pytest.raises(DataValidationError, match="missing column"):
        load_csv(path, ColumnSchema(iv_cols=("g",), exposure_col="a", outcome_col="y"))


def test_binary_exposure_rejects_other_values():
    with pytest.raises(DataValidationError) as info:
        ObservationTable(g=[0, 1, 0], a=[0, 1, 0.5], y=[1, 2, 3], exposure_kind="binary")
    assert info.value.errors[0][0] == 3


def test_non_finite_values_are_row_indexed():
    with pytest.raises(DataValidationError) as info:
        ObservationTable(g=[0, np.nan, 1], a=[1, 2, np.inf], y=[0, 0, 0])
    assert sorted(r for r, _ in info.value.errors) == [2, 3]


def test_table_is_read_only():
    t = ObservationTable(g=[0, 1], a=[1, 2], y=[3, 4])
    with pytest.raises(ValueError):
        t.a[0] = 5.0


def test_take_and_with_ivs():
    t = ObservationTable(g=np.arange(6.0).reshape(3, 2), a=[1, 2, 3], y=[4, 5, 6])
    sub = t.take([2, 2, 0])
    assert np.array_equal(sub.a, [3, 3, 1])
    one = t.with_ivs([1])
    assert one.p == 1 and one.iv_names == ("g2",)


def test_relevance_diagnostic_matches_group_variance_covariance():
    rng = np.random.default_rng(3)
    g = rng.binomial(1, 0.5, 2000).astype(float)
    a = rng.normal(size=2000) * (1 + g)
    t = ObservationTable(g=g, a=a, y=a)
    diag = relevance_diagnostic(t)
    # oracle: empirical cov(G, var(A|G)) using biased group variances
    v = np.where(g == 1, a[g == 1].var(), a[g == 0].var())
    assert diag.phi_hat == pytest.approx(np.mean((g - g.mean()) * v), rel=1e-10)
    assert not diag.flagged[0]


def test_relevance_diagnostic_warns_under_homoscedasticity():
    rng = np.random.default_rng(4)
    g = rng.binomial(1, 0.5, 500).astype(float)
    a = g + rng.normal(size=500)
    t = ObservationTable(g=g, a=a, y=a)
    with pytest.warns(WeakIdentificationWarning):
        diag = relevance_diagnostic(t, threshold=10.0)
    assert diag.flagged == (True,)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        relevance_diagnostic(t, threshold=10.0, warn=False)
