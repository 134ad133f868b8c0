import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contistream.errors import ContractError, FormatError
from contistream.memory import RehearsalMemory, class_quotas


def task_data(classes, per_class=30, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(classes, per_class)
    x = rng.normal(size=(len(y), dim)) + y[:, None]
    return x, y


def fill(memory, tasks, per_task=2, per_class=30):
    seen = 0
    for t in range(tasks):
        classes = np.arange(seen, seen + per_task)
        seen += per_task
        memory.update_after_task(*task_data(classes, per_class, seed=t), seen)
    return memory


def test_quotas():
    assert class_quotas(10, 4).tolist() == [3, 3, 2, 2]
    assert class_quotas(200, 10).tolist() == [20] * 10


@settings(max_examples=40, deadline=None)
@given(capacity=st.integers(10, 120), tasks=st.integers(1, 5))
def test_capacity_and_balance(capacity, tasks):
    memory = fill(RehearsalMemory(capacity, seed=1), tasks)
    counts = list(memory.counts().values())
    assert len(memory) <= capacity
    assert max(counts) - min(counts) <= 1
    assert counts == sorted(counts, reverse=True)


def test_stored_samples_come_from_their_class():
    memory = fill(RehearsalMemory(12, seed=0), 3)
    x, y = memory.contents()
    # class c was drawn around c; stored rows must stay with their label
    assert np.all(np.abs(x.mean(axis=1) - y) < 3)
    assert len(x) == 12


def test_eviction_keeps_subset():
    memory = fill(RehearsalMemory(20, seed=0), 1)
    before = {tuple(r) for r in memory.entries[0]}
    memory.update_after_task(*task_data(np.array([2, 3]), seed=5), 4)
    assert {tuple(r) for r in memory.entries[0]} <= before
    assert memory.counts() == {0: 5, 1: 5, 2: 5, 3: 5}


def test_capacity_below_classes():
    with pytest.raises(ContractError):
        RehearsalMemory(3).update_after_task(*task_data(np.arange(4)), 4)


def test_small_class_keeps_everything():
    memory = RehearsalMemory(100)
    memory.update_after_task(*task_data(np.array([0, 1]), per_class=4), 2)
    assert memory.counts() == {0: 4, 1: 4}


def test_sample_balanced():
    memory = fill(RehearsalMemory(40, seed=2), 2)
    x, y = memory.sample_balanced(32)
    assert x.shape == (32, 3)
    assert np.bincount(y).tolist() == [8, 8, 8, 8]
    _, y = memory.sample_balanced(10)
    assert sorted(np.bincount(y).tolist()) == [2, 2, 3, 3]


def test_sample_with_replacement_only_when_short():
    memory = RehearsalMemory(4, seed=0)
    memory.update_after_task(*task_data(np.array([0, 1])), 2)
    x, y = memory.sample_balanced(4)
    for c in (0, 1):
        assert len({tuple(r) for r in x[y == c]}) == 2
    x, y = memory.sample_balanced(32)
    assert len(y) == 32


def test_empty_memory_sample():
    with pytest.raises(ContractError):
        RehearsalMemory(10).sample_balanced(4)


def test_same_seed_same_contents():
    a = fill(RehearsalMemory(30, seed=4), 3)
    b = fill(RehearsalMemory(30, seed=4), 3)
    assert np.array_equal(a.contents()[0], b.contents()[0])


def test_dump_round_trip(tmp_path):
    memory = fill(RehearsalMemory(30, seed=4), 3)
    path = tmp_path / "mem.bin"
    memory.dump(path)
    assert path.read_bytes()[:4] == b"CLMB"
    loaded = RehearsalMemory.load(path, 30)
    assert loaded.counts() == memory.counts()
    for a, b in zip(loaded.contents(), memory.contents()):
        np.testing.assert_array_equal(a, b)


def test_dump_errors(tmp_path):
    memory = fill(RehearsalMemory(10), 1)
    path = tmp_path / "mem.bin"
    memory.dump(path)
    data = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + data[4:])
    (tmp_path / "short").write_bytes(data[:-3])
    for name in ("bad", "short"):
        with pytest.raises(FormatError):
            RehearsalMemory.load(tmp_path / name, 10)
