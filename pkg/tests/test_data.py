import numpy as np
import pytest
from scipy import stats

from fedcl.data import (
    Dataset,
    DatasetFormatError,
    PartitionError,
    augment,
    augment_two_views,
    generate_gaussian_mixture,
    load_dataset,
    partition,
    save_dataset,
)


def _default(seed=0):
    return generate_gaussian_mixture(10, 200, 32, 4.0, 1.0, seed=seed)


def test_shapes_balance_and_dtypes():
    ds = _default()
    assert ds.x.shape == (2000, 32) and ds.x.dtype == np.float32
    assert np.bincount(ds.labels).tolist() == [200] * 10


def test_well_separated_pair_is_nearly_perfect_for_1nn():
    train = generate_gaussian_mixture(2, 200, 8, 10.0, 1.0, seed=1)
    test = generate_gaussian_mixture(2, 200, 8, 10.0, 1.0, seed=2)
    d2 = ((test.x[:, None, :] - train.x[None, :, :]) ** 2).sum(axis=2)
    pred = train.labels[np.argmin(d2, axis=1)]
    assert np.mean(pred == test.labels) >= 0.99


def test_zero_noise_collapses_to_class_means():
    ds = generate_gaussian_mixture(3, 5, 4, 2.0, 0.0, seed=0)
    for c in range(3):
        expected = np.zeros(4)
        expected[c] = 2.0
        np.testing.assert_array_equal(ds.x[ds.labels == c], np.tile(expected, (5, 1)))


def test_generation_is_deterministic():
    a, b = _default(7), _default(7)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.labels, b.labels)
    assert _default(8).x.tobytes() != a.x.tobytes()


def test_invalid_sizes_rejected():
    with pytest.raises(ValueError):
        generate_gaussian_mixture(1, 10, 4, 1.0, 1.0, seed=0)
    with pytest.raises(ValueError):
        generate_gaussian_mixture(2, 10, 4, 0.0, 1.0, seed=0)
    with pytest.raises(ValueError):
        generate_gaussian_mixture(5, 10, 3, 1.0, 1.0, seed=0, directions=np.eye(3))


def _check_conservation(ds, shards):
    idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(idx)) == len(idx)
    for s in shards:
        np.testing.assert_array_equal(s.labels, ds.labels[s.indices])
        assert set(np.unique(s.labels).tolist()) <= set(s.class_set)
    return idx


def test_mutually_exclusive_partition():
    ds = _default()
    shards = partition(ds, 5, "noniid", 2, seed=0)
    assert [sorted(s.class_set) for s in shards] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    idx = _check_conservation(ds, shards)
    assert sorted(idx.tolist()) == list(range(len(ds)))
    assert {len(s) for s in shards} == {400}


def test_iid_partition_conserves_and_is_balanced():
    ds = _default()
    shards = partition(ds, 3, "iid", seed=4)
    idx = _check_conservation(ds, shards)
    assert sorted(idx.tolist()) == list(range(len(ds)))
    assert max(len(s) for s in shards) - min(len(s) for s in shards) <= 1


def test_iid_split_is_uniform_across_classes():
    ds = _default()
    counts = np.zeros(10)
    for seed in range(20):
        counts += np.bincount(partition(ds, 2, "iid", seed=seed)[0].labels, minlength=10)
    expected = np.full(10, counts.sum() / 10)
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_m_equals_num_classes_gives_every_class_to_everyone():
    ds = generate_gaussian_mixture(4, 30, 6, 4.0, 1.0, seed=0)
    shards = partition(ds, 3, "noniid", 4, seed=0)
    assert all(s.class_set == frozenset(range(4)) for s in shards)
    _check_conservation(ds, shards)


def test_overlapping_assignment_is_round_robin():
    ds = _default()
    shards = partition(ds, 7, "noniid", 3, seed=2)
    assert all(len(s.class_set) == 3 for s in shards)
    holders = np.bincount(np.concatenate([sorted(s.class_set) for s in shards]), minlength=10)
    assert holders.max() - holders.min() <= 1
    assert len({len(s) for s in shards}) == 1
    _check_conservation(ds, shards)


def test_uncovered_classes_are_listed():
    with pytest.raises(PartitionError, match=r"uncovered classes: \[.*\]"):
        partition(_default(), 2, "noniid", 2, seed=0)
    with pytest.raises(PartitionError):
        partition(_default(), 2, "noniid", 11, seed=0)


def test_augmentation_identity_and_determinism():
    x = np.arange(6.0).reshape(2, 3)
    pair = augment_two_views(x, 0.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.view_a, x)
    np.testing.assert_array_equal(pair.view_b, x)
    a = augment_two_views(x, 0.5, 0.1, np.random.default_rng(3))
    b = augment_two_views(x, 0.5, 0.1, np.random.default_rng(3))
    np.testing.assert_array_equal(a.view_a, b.view_a)
    np.testing.assert_array_equal(a.view_b, b.view_b)
    assert not np.array_equal(a.view_a, a.view_b)


def test_augmentation_expected_squared_distance():
    rng = np.random.default_rng(0)
    x = _default().x[17].astype(np.float64)
    p, sigma, drop = x.size, 0.5, 0.1
    views = augment(np.tile(x, (10_000, 1)), sigma, drop, rng)
    measured = np.mean(np.sum((views - x) ** 2, axis=1))
    expected = p * sigma**2 + drop * np.mean(x**2) * p
    assert measured == pytest.approx(expected, rel=0.05)


def test_fcld_roundtrip(tmp_path):
    ds = _default()
    path = tmp_path / "d.fcld"
    save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FCLD" and len(raw) == 4 + 2 + 2 + 4 + 2 + 2000 * 32 * 4 + 2000 * 2
    back = load_dataset(path)
    assert back.x.tobytes() == ds.x.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.num_classes == 10


def test_fcld_rejects_corruption(tmp_path):
    path = tmp_path / "d.fcld"
    save_dataset(Dataset(np.zeros((2, 3), np.float32), np.array([0, 1]), 2), path)
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-1], raw[:5]):
        path.write_bytes(bad)
        with pytest.raises(DatasetFormatError):
            load_dataset(path)


def test_unwritable_path_names_the_path(tmp_path):
    target = tmp_path / "missing" / "d.fcld"
    with pytest.raises(OSError, match="missing"):
        save_dataset(_default(), target)
