"""Datasets, CSV ingestion, fold splitting, and standardization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modreg import (
    DataError,
    Dataset,
    FusionDataset,
    inverse_standardize,
    load_csv,
    load_fusion_csv,
    split_folds,
    standardize,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestDataset:
    def test_blocks_share_row_count(self):
        with pytest.raises(DataError, match="rows"):
            Dataset(x=np.ones((3, 2)), y=np.ones(4))

    def test_rejects_nan(self):
        with pytest.raises(DataError, match="NaN"):
            Dataset(x=np.array([[1.0], [np.nan]]))

    def test_rejects_inf(self):
        with pytest.raises(DataError, match="NaN or Inf"):
            Dataset(x=np.ones((2, 1)), y=np.array([1.0, np.inf]))

    def test_immutable_storage(self):
        d = Dataset(x=np.ones((2, 2)))
        with pytest.raises(ValueError):
            d.x[0, 0] = 5.0

    def test_take_preserves_availability(self):
        d = Dataset(x=np.arange(6.0).reshape(3, 2), y=np.arange(3.0))
        sub = d.take(np.array([2, 0]))
        assert sub.n == 2 and sub.z is None
        assert sub.y[0] == 2.0


class TestFusionDataset:
    def test_p_x_must_agree(self):
        t = Dataset(x=np.ones((2, 2)), z=np.ones((2, 1)), y=np.ones(2))
        xz = Dataset(x=np.ones((2, 3)), z=np.ones((2, 1)))
        with pytest.raises(DataError, match="p_x"):
            FusionDataset(triples=t, xz_pairs=xz)

    def test_blocks_may_be_absent(self):
        xz = Dataset(x=np.ones((2, 2)), z=np.ones((2, 1)))
        zy = Dataset(z=np.ones((3, 1)), y=np.ones(3))
        fd = FusionDataset(xz_pairs=xz, zy_pairs=zy)
        assert fd.n == 0 and fd.n_xz == 2 and fd.n_yz == 3

    def test_requires_some_block(self):
        with pytest.raises(DataError):
            FusionDataset()


class TestLoadCsv:
    def test_smallest_well_formed_input(self, tmp_path):
        path = write(tmp_path, "d.csv", "a,b\n1,2\n3,4\n5,6\n")
        d = load_csv(path, {"a": "x", "b": "y"})
        assert d.n == 3 and d.p_x == 1
        assert d.y is not None and d.z is None
        np.testing.assert_allclose(d.x.ravel(), [1, 3, 5])

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = write(tmp_path, "d.csv", "a,b\n1,2\nabc,4\n")
        with pytest.raises(DataError, match=r"row 2.*column 'a'"):
            load_csv(path, {"a": "x", "b": "y"})

    def test_paper_scale_schema(self, tmp_path):
        # 4 covariates, 6 auxiliaries, 1 response
        cols = [f"c{i}" for i in range(1, 12)]
        rows = "\n".join(",".join(str(i + j) for j in range(11)) for i in range(5))
        path = write(tmp_path, "d.csv", ",".join(cols) + "\n" + rows + "\n")
        schema = {f"c{i}": "x" for i in range(1, 5)}
        schema.update({f"c{i}": "z" for i in range(5, 11)})
        schema["c11"] = "y"
        d = load_csv(path, schema)
        assert (d.n, d.p_x, d.p_z) == (5, 4, 6)

    def test_missing_file(self):
        with pytest.raises(DataError, match="cannot open"):
            load_csv("/nonexistent/never.csv", {"a": "x"})

    def test_schema_names_absent_column(self, tmp_path):
        path = write(tmp_path, "d.csv", "a,b\n1,2\n")
        with pytest.raises(DataError, match="absent"):
            load_csv(path, {"a": "x", "q": "y"})

    def test_unknown_role_rejected(self, tmp_path):
        path = write(tmp_path, "d.csv", "a\n1\n")
        with pytest.raises(DataError, match="role"):
            load_csv(path, {"a": "response"})

    def test_unlisted_columns_ignored(self, tmp_path):
        path = write(tmp_path, "d.csv", "a,b,c\n1,2,9\n3,4,9\n")
        d = load_csv(path, {"a": "x", "b": "y"})
        assert d.p_x == 1 and d.y is not None

    def test_non_finite_literal_rejected(self, tmp_path):
        path = write(tmp_path, "d.csv", "a,b\ninf,2\n")
        with pytest.raises(DataError, match="non-finite"):
            load_csv(path, {"a": "x", "b": "y"})

    def test_fusion_loader_blocks(self, tmp_path):
        t = write(tmp_path, "t.csv", "a,b,c\n1,2,3\n4,5,6\n")
        xz = write(tmp_path, "xz.csv", "a,b\n1,2\n")
        zy = write(tmp_path, "zy.csv", "b,c\n2,3\n7,8\n9,0\n")
        schema = {"a": "x", "b": "z", "c": "y"}
        fd = load_fusion_csv(t, xz, zy, schema)
        assert (fd.n, fd.n_xz, fd.n_yz) == (2, 1, 3)
        assert fd.zy_pairs.x is None


class TestSplitFolds:
    def test_exact_split(self):
        fa = split_folds(4, 2, 0)
        sizes = np.bincount(fa.fold_of_row)[1:]
        assert sorted(sizes.tolist()) == [2, 2]

    def test_remainder_handling(self):
        fa = split_folds(5, 2, 7)
        sizes = np.bincount(fa.fold_of_row)[1:]
        assert sorted(sizes.tolist()) == [2, 3]

    def test_deterministic(self):
        a = split_folds(200, 2, 1)
        b = split_folds(200, 2, 1)
        np.testing.assert_array_equal(a.fold_of_row, b.fold_of_row)

    def test_seed_changes_assignment(self):
        a = split_folds(200, 2, 1)
        b = split_folds(200, 2, 2)
        assert not np.array_equal(a.fold_of_row, b.fold_of_row)

    def test_k_bounds(self):
        with pytest.raises(DataError):
            split_folds(3, 4, 0)
        with pytest.raises(DataError):
            split_folds(3, 1, 0)

    @given(
        n=st.integers(min_value=2, max_value=60),
        k=st.integers(min_value=2, max_value=10),
        seed=st.integers(min_value=0, max_value=2**32),
    )
    @settings(max_examples=60, deadline=None)
    def test_true_partition(self, n, k, seed):
        if k > n:
            return
        fa = split_folds(n, k, seed)
        seen = np.concatenate([fa.rows_in_fold(f) for f in range(1, k + 1)])
        assert sorted(seen.tolist()) == list(range(n))
        sizes = np.bincount(fa.fold_of_row)[1:]
        assert sizes.max() - sizes.min() <= 1 and sizes.min() >= 1


class TestStandardize:
    def test_two_point_column(self):
        d = Dataset(x=np.array([[1.0], [3.0]]))
        out, specs = standardize(d)
        np.testing.assert_allclose(out.x.ravel(), [-1.0, 1.0])
        assert specs["x"].means[0] == 2.0
        assert specs["x"].scales[0] == 1.0  # population sd of (1,3)

    def test_constant_column(self):
        d = Dataset(x=np.array([[5.0], [5.0], [5.0]]))
        out, specs = standardize(d)
        np.testing.assert_array_equal(out.x.ravel(), [0.0, 0.0, 0.0])
        assert specs["x"].scales[0] == 1.0

    def test_random_block_moments(self):
        rng = np.random.default_rng(3)
        d = Dataset(x=rng.normal(2.0, 3.0, size=(100, 3)))
        out, _ = standardize(d)
        assert np.abs(out.x.mean(axis=0)).max() <= 1e-10
        assert np.abs(out.x.std(axis=0) - 1.0).max() <= 1e-10

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            standardize(Dataset(x=np.ones((1, 1))))

    @given(
        data=st.lists(
            st.lists(
                st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                min_size=2,
                max_size=4,
            ),
            min_size=2,
            max_size=20,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, data):
        x = np.asarray(data, dtype=np.float64)
        y = x[:, 0].copy()
        d = Dataset(x=x, z=x[:, :1] * 0.5, y=y)
        out, specs = standardize(d)
        back = inverse_standardize(out, specs)
        # relative to the column scale: centering mixes magnitudes within
        # a column, so entrywise-relative recovery is not a float64 notion
        col_scale = np.maximum(np.abs(d.x).max(axis=0), 1.0)
        assert np.max(np.abs(back.x - d.x) / col_scale) <= 1e-12
        y_scale = max(np.abs(d.y).max(), 1.0)
        assert np.max(np.abs(back.y - d.y)) / y_scale <= 1e-12
