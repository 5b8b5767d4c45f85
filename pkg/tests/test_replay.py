import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from edgerl.mdp import OBS_DIM
from edgerl.replay import Experience, InsufficientData, ReplayBuffer


def make_experience(i: int, terminal: bool = False) -> Experience:
    obs = np.full(OBS_DIM, i, dtype=np.float32)
    return Experience(obs, (i % 7) / 7, -0.01 * i, obs + 1, terminal)


def filled(n: int, capacity: int | None = None) -> ReplayBuffer:
    buf = ReplayBuffer(capacity or n)
    for i in range(n):
        buf.push(make_experience(i))
    return buf


def ids(batch) -> np.ndarray:
    return batch.obs[:, 0].astype(int)


def test_push_into_empty():
    buf = ReplayBuffer(4)
    e = make_experience(3, terminal=True)
    buf.push(e)
    assert len(buf) == 1
    latest = buf.latest
    assert np.array_equal(latest.obs, e.obs) and latest.terminal and latest.action == pytest.approx(e.action)


def test_fifo_eviction():
    buf = filled(11, capacity=10)
    assert len(buf) == 10 and buf.pushed == 11
    stored = [int(e.obs[0]) for e in buf]
    assert stored == list(range(1, 11))
    assert int(buf.latest.obs[0]) == 10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 60))
def test_eviction_order_property(capacity, n):
    buf = filled(n, capacity)
    assert len(buf) == min(n, capacity)
    assert [int(e.obs[0]) for e in buf] == list(range(max(0, n - capacity), n))
    assert int(buf.latest.obs[0]) == n - 1


def test_invalid_capacity():
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_empty_has_no_latest():
    with pytest.raises(InsufficientData):
        ReplayBuffer(3).latest


class TestCer:
    def test_single_item(self):
        buf = filled(1)
        batch = buf.sample_cer(1, np.random.default_rng(0))
        assert ids(batch).tolist() == [0]

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            filled(5).sample_cer(6, np.random.default_rng(0))

    def test_latest_in_every_batch(self):
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(300)
        for i in range(1000):
            buf.push(make_experience(i))
            if len(buf) >= 128:
                batch = buf.sample_cer(128, rng)
                assert len(batch) == 128
                assert ids(batch)[-1] == i
                assert i in ids(batch)

    def test_uniform_portion_chi_square(self):
        n, draws, b = 128, 10_000, 128
        buf = filled(n)
        rng = np.random.default_rng(2)
        counts = np.zeros(n)
        for _ in range(draws):
            idx = buf.sample_indices_cer(b, rng)
            counts += np.bincount(idx[:-1], minlength=n)
        total = draws * (b - 1)
        p = 1 / n
        sigma = np.sqrt(total * p * (1 - p))
        assert np.all(np.abs(counts - total * p) < 3 * sigma)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_sampling_does_not_mutate(self):
        buf = filled(20)
        before = buf.state_arrays()
        buf.sample_cer(8, np.random.default_rng(3))
        buf.sample_uniform(8, np.random.default_rng(3))
        after = buf.state_arrays()
        for key in before:
            assert np.array_equal(before[key], after[key])

    def test_reproducible(self):
        buf = filled(100)
        a = buf.sample_cer(32, np.random.default_rng(4))
        b = buf.sample_cer(32, np.random.default_rng(4))
        assert np.array_equal(a.obs, b.obs)


class TestUniform:
    def test_single_item(self):
        assert ids(filled(1).sample_uniform(1, np.random.default_rng(0))).tolist() == [0]

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            filled(3).sample_uniform(4, np.random.default_rng(0))

    def test_chi_square(self):
        n = 128
        buf = filled(n)
        rng = np.random.default_rng(5)
        counts = np.zeros(n)
        for _ in range(10_000):
            counts += np.bincount(buf.sample_indices_uniform(128, rng), minlength=n)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_latest_not_guaranteed(self):
        buf = filled(1000)
        rng = np.random.default_rng(6)
        misses = sum(999 not in ids(buf.sample_uniform(8, rng)) for _ in range(20))
        assert misses > 0


def test_persistence_round_trip(tmp_path):
    buf = filled(15, capacity=10)
    path = tmp_path / "replay.npz"
    buf.save(path)
    back = ReplayBuffer.load(path, 10)
    assert back.pushed == 15
    assert [int(e.obs[0]) for e in back] == [int(e.obs[0]) for e in buf]
    assert int(back.latest.obs[0]) == 14
    with pytest.raises(ValueError):
        ReplayBuffer.load(path, 5)
