"""Dataset ingestion, splitting and the synthetic generator."""

import numpy as np
import pytest

from relnet.data import (
    DatasetError,
    MultiTaskDataset,
    SplitError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    kfold,
    load_csv,
    load_manifest,
    sample_task_data,
    split,
    write_csv,
    write_manifest,
)


def toy_dataset(sizes=(10, 8), dim=3, num_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    feats = [rng.standard_normal((n, dim)) for n in sizes]
    labs = [rng.integers(0, num_classes, size=n) for n in sizes]
    names = [f"task{i}" for i in range(len(sizes))]
    return MultiTaskDataset(names, feats, labs, num_classes)


class TestDatasetValidation:
    def test_dim_mismatch(self):
        with pytest.raises(DatasetError):
            MultiTaskDataset(
                ["a", "b"],
                [np.zeros((3, 2)), np.zeros((3, 4))],
                [np.zeros(3, dtype=int)] * 2,
                2,
            )

    def test_label_range(self):
        with pytest.raises(DatasetError):
            MultiTaskDataset(
                ["a"], [np.zeros((2, 2))], [np.array([0, 5])], 3
            )

    def test_empty_task(self):
        with pytest.raises(DatasetError):
            MultiTaskDataset(["a"], [np.zeros((0, 2))], [np.zeros(0, dtype=int)], 2)

    def test_duplicate_names(self):
        with pytest.raises(DatasetError):
            MultiTaskDataset(
                ["a", "a"],
                [np.zeros((2, 2))] * 2,
                [np.zeros(2, dtype=int)] * 2,
                2,
            )


class TestCsv:
    def test_roundtrip_exact(self, tmp_path):
        """write(load(f)) reproduces the numeric content exactly."""
        ds = toy_dataset(seed=1)
        paths = [tmp_path / f"{n}.csv" for n in ds.task_names]
        write_csv(ds, paths)
        loaded = load_csv(paths, ds.num_classes)
        for a, b in zip(loaded.features, ds.features):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.labels, ds.labels):
            np.testing.assert_array_equal(a, b)
        second = [tmp_path / f"again_{n}.csv" for n in ds.task_names]
        write_csv(loaded, second)
        for p1, p2 in zip(paths, second):
            assert p1.read_bytes() == p2.read_bytes()

    def test_nonnumeric_field_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,0\n1.0,oops,1\n")
        with pytest.raises(DatasetError, match=r"bad\.csv:2"):
            load_csv([path], 2)

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("1.0,2.0,0\n1.0,1\n")
        with pytest.raises(DatasetError, match=r"ragged\.csv:2"):
            load_csv([path], 2)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "label.csv"
        path.write_text("1.0,7\n")
        with pytest.raises(DatasetError, match=r"label\.csv:1"):
            load_csv([path], 3)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DatasetError):
            load_csv([path], 2)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        ds = toy_dataset(seed=2)
        manifest = write_manifest(ds, tmp_path / "data")
        loaded = load_manifest(manifest)
        assert loaded.task_names == ds.task_names
        assert loaded.num_classes == ds.num_classes
        for a, b in zip(loaded.features, ds.features):
            np.testing.assert_array_equal(a, b)

    def test_schema_checked(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{"schema_version": 99}')
        with pytest.raises(DatasetError):
            load_manifest(path)


class TestSplit:
    def test_stratified_documented_counts(self):
        """Class counts (10, 10, 20) at fraction 0.1 give (1, 1, 2)."""
        labels = np.array([0] * 10 + [1] * 10 + [2] * 20)
        rng = np.random.default_rng(3)
        ds = MultiTaskDataset(
            ["t"], [rng.standard_normal((40, 2))], [labels], 3
        )
        train, test = split(ds, SplitSpec(0.1, stratified=True, seed=0))
        counts = np.bincount(train.labels[0], minlength=3)
        np.testing.assert_array_equal(counts, [1, 1, 2])
        assert test.task_sizes == (36,)

    def test_folds_partition_rows(self):
        ds = toy_dataset(sizes=(20, 14), seed=4)
        train, test = split(ds, SplitSpec(0.5, seed=1))
        for t in range(ds.num_tasks):
            merged = np.vstack([train.features[t], test.features[t]])
            assert merged.shape[0] == ds.task_sizes[t]
            want = {tuple(row) for row in ds.features[t]}
            got = {tuple(row) for row in merged}
            assert want == got

    def test_unstratified_too_few_samples(self):
        ds = toy_dataset(sizes=(5, 5), seed=5)
        with pytest.raises(SplitError):
            split(ds, SplitSpec(0.1))

    def test_stratified_missing_class(self):
        ds = MultiTaskDataset(
            ["t"], [np.zeros((4, 2))], [np.array([0, 0, 0, 0])], 2
        )
        with pytest.raises(SplitError, match="class 1"):
            split(ds, SplitSpec(0.5, stratified=True))

    def test_stratified_keeps_every_class(self):
        rng = np.random.default_rng(6)
        labels = rng.permutation(np.array([0] * 30 + [1] * 5 + [2] * 15))
        ds = MultiTaskDataset(
            ["t"], [rng.standard_normal((50, 2))], [labels], 3
        )
        train, _ = split(ds, SplitSpec(0.05, stratified=True, seed=2))
        assert set(np.unique(train.labels[0])) == {0, 1, 2}

    def test_deterministic(self):
        ds = toy_dataset(sizes=(12, 9), seed=7)
        a_train, a_test = split(ds, SplitSpec(0.4, seed=5))
        b_train, b_test = split(ds, SplitSpec(0.4, seed=5))
        for x, y in zip(a_train.features, b_train.features):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(a_test.labels, b_test.labels):
            np.testing.assert_array_equal(x, y)

    def test_fraction_bounds(self):
        with pytest.raises(SplitError):
            SplitSpec(0.0)
        with pytest.raises(SplitError):
            SplitSpec(1.0)


class TestSplitEmptyFold:
    def test_fraction_that_empties_test_fold_is_rejected(self):
        """Both folds must stay non-empty for every task."""
        rng = np.random.default_rng(0)
        ds = MultiTaskDataset(
            ["a"],
            [rng.standard_normal((9, 4))],
            [np.arange(9) % 3],
            num_classes=3,
        )
        with pytest.raises(SplitError, match="test fold is empty"):
            split(ds, SplitSpec(train_fraction=0.99, seed=0))


class TestKfold:
    def test_each_row_validated_once(self):
        ds = toy_dataset(sizes=(11, 7), seed=8)
        folds = kfold(ds, 3, seed=1)
        assert len(folds) == 3
        for t in range(ds.num_tasks):
            seen = np.concatenate([val.labels[t] for _, val in folds])
            assert seen.shape[0] == ds.task_sizes[t]
            for train, val in folds:
                assert train.task_sizes[t] + val.task_sizes[t] == ds.task_sizes[t]

    def test_too_many_folds(self):
        ds = toy_dataset(sizes=(3, 9), seed=9)
        with pytest.raises(SplitError):
            kfold(ds, 4)


def block_cov(pairs, size):
    cov = np.eye(size)
    for i, j, rho in pairs:
        cov[i, j] = cov[j, i] = rho
    return cov


class TestSynthetic:
    def test_shapes_and_determinism(self):
        spec = SyntheticSpec(3, 5, 4, 20, np.eye(3), seed=10)
        ds1, w1 = generate_synthetic(spec)
        ds2, w2 = generate_synthetic(spec)
        assert w1.shape == (5, 4, 3)
        assert ds1.task_sizes == (20, 20, 20)
        assert ds1.num_classes == 4
        np.testing.assert_array_equal(w1, w2)
        for a, b in zip(ds1.features, ds2.features):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(ds1.labels, ds2.labels):
            np.testing.assert_array_equal(a, b)

    def test_every_class_represented(self):
        """noise_scale 1, D=20, C=3, N=1000: each class gets at least 1%."""
        spec = SyntheticSpec(2, 20, 3, 1000, np.eye(2), noise_scale=1.0, seed=11)
        ds, _ = generate_synthetic(spec)
        for y in ds.labels:
            counts = np.bincount(y, minlength=3)
            assert counts.min() >= 10

    def test_tiny_noise_gives_argmax_labels(self):
        spec = SyntheticSpec(2, 6, 3, 50, np.eye(2), noise_scale=1e-9, seed=12)
        ds, w = generate_synthetic(spec)
        for t in range(2):
            want = np.argmax(ds.features[t] @ w[:, :, t], axis=1)
            np.testing.assert_array_equal(ds.labels[t], want)

    def test_related_tasks_have_similar_weights(self):
        """corr(A,B)=0.95, corr(.,C)=0: cos(W_A, W_B) beats both
        cross-pair cosines in at least 9 of 10 seeds."""
        hits = 0
        for seed in range(10):
            cov = block_cov([(0, 1, 0.95)], 3)
            _, w = generate_synthetic(SyntheticSpec(3, 8, 3, 1, cov, seed=seed))
            vecs = [w[:, :, t].ravel() for t in range(3)]

            def cos(a, b):
                return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

            ab = cos(vecs[0], vecs[1])
            if ab > cos(vecs[0], vecs[2]) and ab > cos(vecs[1], vecs[2]):
                hits += 1
        assert hits >= 9

    def test_sample_task_data_reuses_weights(self):
        """Fresh draws from the same weights share the generating rule."""
        rng = np.random.default_rng(13)
        spec = SyntheticSpec(2, 4, 3, 10, np.eye(2), seed=14)
        _, w = generate_synthetic(spec)
        extra = sample_task_data(w, [5, 7], 1.0, rng)
        assert extra.task_sizes == (5, 7)
        assert extra.num_classes == 3
        assert extra.feature_dim == 4

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(2, 4, 3, 10, np.eye(3))
        with pytest.raises(ValueError):
            SyntheticSpec(2, 4, 3, 10, np.eye(2), noise_scale=0.0)
