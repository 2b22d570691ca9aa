import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcl.bank import ENCRYPTED_LOCAL, MemoryBank, RemoteBankSet, assemble_remote, enqueue_batch


def _rows(*values, d=2):
    return np.array([[v] + [0.0] * (d - 1) for v in values], dtype=np.float32)


def test_fifo_evicts_oldest():
    bank = MemoryBank(3, 2)
    enqueue_batch(bank, _rows(1, 2, 3))
    enqueue_batch(bank, _rows(4))
    assert bank.features[:, 0].tolist() == [2, 3, 4]


def test_partial_fill_preserves_order():
    bank = MemoryBank(10, 2)
    bank.enqueue(_rows(5, 6, 7))
    assert len(bank) == 3
    assert bank.features[:, 0].tolist() == [5, 6, 7]


def test_oversized_enqueue_keeps_newest_with_warning():
    bank = MemoryBank(2, 2)
    with pytest.warns(UserWarning):
        bank.enqueue(_rows(1, 2, 3, 4, 5))
    assert bank.features[:, 0].tolist() == [4, 5]


@settings(max_examples=50, deadline=None)
@given(capacity=st.integers(1, 12), sizes=st.lists(st.integers(0, 12), max_size=8))
def test_fifo_matches_list_model(capacity, sizes):
    bank = MemoryBank(capacity, 2)
    model: list[float] = []
    counter = 0
    for size in sizes:
        vals = list(range(counter, counter + size))
        counter += size
        with np.testing.suppress_warnings() as sup:
            sup.filter(UserWarning)
            bank.enqueue(_rows(*vals) if vals else np.zeros((0, 2)))
        model = (model + vals)[-capacity:]
        assert len(bank) <= capacity
    assert bank.features[:, 0].tolist() == model


def test_snapshots_are_immutable_and_stable():
    bank = MemoryBank(2, 2)
    bank.enqueue(_rows(1, 2))
    snap = bank.features
    bank.enqueue(_rows(3))
    assert snap[:, 0].tolist() == [1, 2]
    with pytest.raises(ValueError):
        snap[0, 0] = 9.0


def test_wrong_dimension_rejected():
    with pytest.raises(ValueError):
        MemoryBank(3, 2).enqueue(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        MemoryBank(0, 2)


def test_label_side_channel_and_replace():
    bank = MemoryBank(4, 2, ENCRYPTED_LOCAL)
    bank.enqueue(_rows(1, 2, 3), np.array([0, 2, 2]))
    assert bank.label_histogram(3).tolist() == [1, 0, 2]
    bank.replace(_rows(9), np.array([1]))
    assert bank.features[:, 0].tolist() == [9]
    assert bank.label_histogram(3).tolist() == [0, 1, 0]


def test_two_clients_remote_is_the_other_bank():
    banks = {0: _rows(1, 2), 1: _rows(3, 4)}
    remote = assemble_remote(banks, 0)
    np.testing.assert_array_equal(remote.features, banks[1])


def test_three_clients_remote_cardinality_and_exclusion():
    rng = np.random.default_rng(0)
    banks = {c: rng.standard_normal((4, 3)).astype(np.float32) for c in range(3)}
    for c in range(3):
        remote = assemble_remote(banks, c)
        assert len(remote) == 8 and remote.features.shape == (8, 3)
        own = {row.tobytes() for row in banks[c]}
        assert not own & {row.tobytes() for row in remote.features}


def test_absent_self_means_all_banks_in_id_order():
    banks = {2: _rows(5), 0: _rows(1)}
    remote = assemble_remote(banks, 7)
    assert remote.features[:, 0].tolist() == [1, 5]


def test_from_flat_roundtrip_and_empty():
    flat = _rows(1, 2, 3)
    np.testing.assert_array_equal(RemoteBankSet.from_flat(0, flat).features, flat)
    empty = RemoteBankSet.from_flat(0, np.zeros((0, 2), np.float32))
    assert len(empty) == 0 and empty.features.shape == (0, 2)
