import numpy as np
import pytest

from feddlr.data import (
    DataError,
    Dataset,
    load_csv,
    partition_iid,
    save_csv,
    split_train_test,
    synth_gaussian_mixture,
)

from oracles import nearest_mean_accuracy


def test_generation_is_deterministic():
    a = synth_gaussian_mixture(7, classes=3, dim=4, n_per_class=20, separation=2.0)
    b = synth_gaussian_mixture(7, classes=3, dim=4, n_per_class=20, separation=2.0)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_generation_seed_changes_data():
    a = synth_gaussian_mixture(7, classes=3, dim=4, n_per_class=20, separation=2.0)
    b = synth_gaussian_mixture(8, classes=3, dim=4, n_per_class=20, separation=2.0)
    assert not np.array_equal(a.features, b.features)


def test_exact_class_balance():
    d = synth_gaussian_mixture(0, classes=5, dim=6, n_per_class=17, separation=3.0)
    counts = np.bincount(d.labels, minlength=5)
    assert np.all(counts == 17)


def test_features_standardized():
    d = synth_gaussian_mixture(1, classes=4, dim=8, n_per_class=200, separation=5.0)
    assert np.abs(d.features.mean(axis=0)).max() <= 1e-12
    assert np.abs(d.features.std(axis=0) - 1.0).max() <= 1e-12


def test_large_separation_nearest_mean_oracle():
    d = synth_gaussian_mixture(3, classes=10, dim=32, n_per_class=100, separation=10.0)
    assert nearest_mean_accuracy(d.features, d.labels) > 0.99


def test_generation_validation():
    with pytest.raises(DataError):
        synth_gaussian_mixture(0, classes=1, dim=4, n_per_class=5, separation=1.0)
    with pytest.raises(DataError):
        synth_gaussian_mixture(0, classes=3, dim=4, n_per_class=5, separation=-1.0)


def test_partition_single_client_is_full_reordering():
    d = synth_gaussian_mixture(2, classes=3, dim=4, n_per_class=10, separation=2.0)
    shards = partition_iid(d, 1, seed=5)
    assert len(shards) == 1
    assert len(shards[0]) == len(d)
    assert sorted(map(tuple, shards[0].features)) == sorted(map(tuple, d.features))


def test_partition_equal_shards_and_multiset_union():
    d = synth_gaussian_mixture(4, classes=4, dim=3, n_per_class=15, separation=2.0)
    shards = partition_iid(d, 6, seed=9)
    assert all(len(s) == len(d) // 6 for s in shards)
    original = sorted(
        (tuple(row), int(label)) for row, label in zip(d.features, d.labels)
    )
    combined = sorted(
        (tuple(row), int(label))
        for s in shards
        for row, label in zip(s.features, s.labels)
    )
    assert combined == original


def test_partition_disjoint_shards():
    d = synth_gaussian_mixture(6, classes=2, dim=5, n_per_class=12, separation=2.0)
    shards = partition_iid(d, 4, seed=0)
    seen = set()
    for s in shards:
        for row in s.features:
            key = tuple(row)
            assert key not in seen
            seen.add(key)


def test_partition_rejects_indivisible():
    d = synth_gaussian_mixture(0, classes=3, dim=4, n_per_class=10, separation=2.0)
    with pytest.raises(DataError, match="divisible"):
        partition_iid(d, 7, seed=0)


def test_partition_deterministic():
    d = synth_gaussian_mixture(1, classes=2, dim=3, n_per_class=8, separation=2.0)
    s1 = partition_iid(d, 4, seed=11)
    s2 = partition_iid(d, 4, seed=11)
    for a, b in zip(s1, s2):
        assert np.array_equal(a.features, b.features)


def test_split_train_test_stratified():
    d = synth_gaussian_mixture(5, classes=4, dim=3, n_per_class=25, separation=2.0)
    train, test = split_train_test(d, 10)
    assert np.all(np.bincount(test.labels, minlength=4) == 10)
    assert np.all(np.bincount(train.labels, minlength=4) == 15)
    assert len(train) + len(test) == len(d)


def test_split_rejects_oversized_test():
    d = synth_gaussian_mixture(5, classes=4, dim=3, n_per_class=5, separation=2.0)
    with pytest.raises(DataError):
        split_train_test(d, 6)


def test_csv_two_row_file(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("1.5,-2.0,0\n0.25,3.5,1\n")
    d = load_csv(path, num_classes=2)
    assert len(d) == 2
    assert np.array_equal(d.labels, [0, 1])
    assert d.features[1, 1] == 3.5


def test_csv_round_trip_exact(tmp_path):
    d = synth_gaussian_mixture(9, classes=3, dim=5, n_per_class=7, separation=2.0)
    path = tmp_path / "round.csv"
    save_csv(d, path)
    back = load_csv(path, num_classes=3)
    assert np.abs(back.features - d.features).max() <= 1e-12
    assert np.array_equal(back.labels, d.labels)


def test_csv_label_out_of_range_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,0\n2.0,2\n")
    with pytest.raises(DataError, match="line 2"):
        load_csv(path, num_classes=2)


def test_csv_ragged_row_names_line(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1.0,2.0,0\n1.0,1\n")
    with pytest.raises(DataError, match="line 2"):
        load_csv(path, num_classes=2)


def test_csv_parse_failure_names_line(tmp_path):
    path = tmp_path / "junk.csv"
    path.write_text("1.0,zap,0\n")
    with pytest.raises(DataError, match="line 1"):
        load_csv(path, num_classes=2)


def test_csv_empty_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(DataError, match="no data rows"):
        load_csv(path, num_classes=2)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(features=np.zeros((2, 2)), labels=np.array([0, 5]), num_classes=2)
