import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmfvb import data as D
from pmfvb.errors import InvalidArgument
from pmfvb.nn import NnData


class TestSplit:
    def test_census_sizes(self):
        assert D.split_sizes(45221, (0.53, 0.14, 0.33)) == [23967, 6331, 14923]

    @pytest.mark.parametrize("fr", [(1.0, 0.0, 0.0), (0.5, 0.6, -0.1), (0.5, 0.2, 0.2)])
    def test_bad_fractions(self, fr):
        with pytest.raises(InvalidArgument):
            D.split_sizes(100, fr)

    def test_too_few_rows(self):
        with pytest.raises(InvalidArgument):
            D.split_indices(2, (0.5, 0.25, 0.25), 0)

    def test_seeded(self):
        a = D.split_indices(1000, (0.53, 0.14, 0.33), 4)
        b = D.split_indices(1000, (0.53, 0.14, 0.33), 4)
        c = D.split_indices(1000, (0.53, 0.14, 0.33), 5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])

    @given(st.integers(3, 5000), st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5), st.integers(0, 99))
    @settings(max_examples=100, deadline=None)
    def test_partition_property(self, n, raw, seed):
        fr = np.array(raw) / sum(raw)
        parts = D.split_indices(n, fr.tolist(), seed)
        allidx = np.concatenate(parts)
        assert np.array_equal(np.sort(allidx), np.arange(n))
        for p, f in zip(parts, fr):
            assert abs(len(p) - f * n) < 1 + 1e-9

    def test_split_nn_data(self, rng):
        d = NnData(rng.normal(size=(50, 3)), rng.normal(size=50))
        tr, va, te = D.split_dataset(d, (0.6, 0.2, 0.2), seed=1)
        assert (len(tr.y), len(va.y), len(te.y)) == (30, 10, 10)
        assert tr.x.shape == (30, 3)


class TestNonlinear:
    def test_origin(self):
        assert D.nonlinear_mean(np.zeros((1, 20)))[0] == 25.0

    def test_correlation(self):
        tr, _, _ = D.generate_nonlinear_regression(100_000, 1, 1, seed=2)
        c = np.corrcoef(tr.x[:, :3].T)
        assert c[0, 1] == pytest.approx(0.5, abs=0.02)
        assert c[0, 2] == pytest.approx(0.25, abs=0.02)
        assert tr.x.var(axis=0) == pytest.approx(np.ones(20), abs=0.03)

    def test_noise(self):
        tr, _, _ = D.generate_nonlinear_regression(50_000, 1, 1, seed=3)
        assert np.var(tr.y - D.nonlinear_mean(tr.x)) == pytest.approx(1.0, rel=0.03)

    def test_reproducible(self):
        a = D.generate_nonlinear_regression(20, 5, 5, seed=9)
        b = D.generate_nonlinear_regression(20, 5, 5, seed=9)
        assert all(np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y) for x, y in zip(a, b))
        assert [len(s.y) for s in a] == [20, 5, 5]

    def test_sizes_validated(self):
        with pytest.raises(InvalidArgument):
            D.generate_nonlinear_regression(0, 1, 1, seed=0)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestTabular:
    def test_one_hot_columns(self, tmp_path):
        p = _write(tmp_path, "age,colour,y\n30,red,yes\n40,blue,no\n50,green,yes\n60,red,no\n")
        ds = D.load_tabular(p, {"age": "numeric", "colour": "categorical"}, "y", positive="yes")
        assert ds.x.shape == (4, 4)
        np.testing.assert_array_equal(ds.x[:, 1:].sum(axis=1), 1.0)
        assert ds.x[:, 0].mean() == pytest.approx(0.0, abs=1e-12)
        assert ds.x[:, 0].std() == pytest.approx(1.0)
        np.testing.assert_array_equal(ds.y, [1, 0, 1, 0])
        assert ds.feature_names == ["age", "colour=blue", "colour=green", "colour=red"]

    def test_drops_missing_and_malformed(self, tmp_path, caplog):
        p = _write(tmp_path, "a,c,y\n1,x,0\n?,x,1\nabc,y,1\n2,,0\n3,y,1\n")
        with caplog.at_level(logging.WARNING):
            ds = D.load_tabular(p, {"a": "numeric", "c": "categorical"}, "y")
        assert ds.n_dropped == 3 and len(ds.y) == 2
        assert "dropped 3" in caplog.text

    def test_unknown_category(self, tmp_path, caplog):
        train = _write(tmp_path, "a,c,y\n1,x,0\n2,y,1\n", "tr.csv")
        test = _write(tmp_path, "a,c,y\n3,z,1\n", "te.csv")
        schema = {"a": "numeric", "c": "categorical"}
        enc = D.load_tabular(train, schema, "y").encoder
        with caplog.at_level(logging.WARNING):
            ds = D.load_tabular(test, schema, "y", encoder=enc)
        np.testing.assert_array_equal(ds.x[0, 1:], 0.0)
        assert ds.x[0, 0] == pytest.approx((3 - 1.5) / 0.5)
        assert "unseen category" in caplog.text

    def test_missing_column(self, tmp_path):
        p = _write(tmp_path, "a,y\n1,0\n")
        with pytest.raises(InvalidArgument):
            D.load_tabular(p, {"a": "numeric", "b": "numeric"}, "y")

    def test_census_like_has_103_features(self, tmp_path):
        p = tmp_path / "census.csv"
        D.write_rows(p, D.generate_census_like(20_000, seed=1))
        ds = D.load_tabular(p, D.CENSUS_SCHEMA, positive=">50K")
        assert len(D.CENSUS_NUMERIC) + len(D.CENSUS_LEVELS) == 14
        assert ds.x.shape[1] == 103
        assert 0.05 < ds.y.mean() < 0.6

    def test_survey_like_has_43_features(self, tmp_path):
        p = tmp_path / "s.csv"
        D.write_rows(p, D.generate_survey_like(3000, seed=1))
        ds = D.load_tabular(p, D.SURVEY_SCHEMA)
        assert ds.x.shape[1] == 43 and np.all(ds.y > 0)

    def test_train_only_statistics(self, tmp_path):
        p = tmp_path / "n.csv"
        rng = np.random.default_rng(0)
        D.write_matrix(p, rng.normal(3.0, 2.0, size=(400, 2)), rng.integers(0, 2, 400))
        schema = {"x1": "numeric", "x2": "numeric", "y": "response"}
        (tr, va, te), enc, dropped = D.load_tabular_splits(p, schema, (0.5, 0.25, 0.25), seed=3)
        assert dropped == 0
        np.testing.assert_allclose(tr.x.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(tr.x.std(axis=0), 1.0)
        assert np.all(np.abs(va.x.mean(axis=0)) > 1e-6)
        raw = np.loadtxt(p, delimiter=",", skiprows=1)
        parts = D.split_indices(400, (0.5, 0.25, 0.25), 3)
        np.testing.assert_allclose(enc.means["x1"], raw[parts[0], 0].mean())

    def test_matrix_round_trip(self, tmp_path, rng):
        x, y = rng.normal(size=(30, 4)), rng.normal(size=30)
        D.write_matrix(tmp_path / "m.csv", x, y)
        back, names = D.read_matrix(tmp_path / "m.csv")
        np.testing.assert_array_equal(back.x, x)
        np.testing.assert_array_equal(back.y, y)
        assert names == ["x1", "x2", "x3", "x4"]

    def test_save_load_identical(self, tmp_path):
        rows = D.generate_census_like(500, seed=2)
        D.write_rows(tmp_path / "a.csv", rows)
        a = D.load_tabular(tmp_path / "a.csv", D.CENSUS_SCHEMA, positive=">50K")
        b = D.load_tabular(tmp_path / "a.csv", D.CENSUS_SCHEMA, positive=">50K")
        np.testing.assert_array_equal(a.x, b.x)


def test_data_sha():
    a = D.data_sha(np.arange(4.0), np.ones(2))
    assert a == D.data_sha(np.arange(4.0), np.ones(2))
    assert a != D.data_sha(np.arange(4.0), np.ones(3))
    assert a != D.data_sha(np.arange(4.0) + 1e-12, np.ones(2))
