import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gorila.replay import (
    GlobalReplay,
    LocalReplay,
    RemoteReplay,
    ReplayNotReady,
    ReplayService,
    aggregate_capacity,
    global_put,
    global_sample,
    sample_minibatch,
    shard_for,
)
from gorila.rl import Transition
from gorila.transport import ServiceHost


def tr(i, actor=0):
    return Transition([float(i)], i % 3, float(i), [float(i + 1)], False, actor, i)


def ids(batch):
    return [int(t.state[0]) for t in batch]


# --- local ring --------------------------------------------------------------------------


def test_ring_eviction():
    r = LocalReplay(3)
    for i in range(4):
        r.insert(tr(i))
    assert ids(r.contents()) == [1, 2, 3]
    assert r.evicted == 1


def test_singleton_sample():
    r = LocalReplay(5)
    r.insert(tr(7))
    assert ids(sample_minibatch(r, 1, np.random.default_rng(0))) == [7]
    assert ids(r.sample(4, np.random.default_rng(0))) == [7, 7, 7, 7]


@given(st.integers(1, 50), st.integers(0, 200))
def test_size_counts_and_fifo(capacity, n):
    r = LocalReplay(capacity)
    for i in range(n):
        r.insert(tr(i))
    assert len(r) == min(n, capacity)
    assert ids(r.contents()) == list(range(max(0, n - capacity), n))
    assert r.inserted - r.evicted == len(r)


def test_empty_sample_not_ready():
    with pytest.raises(ReplayNotReady):
        LocalReplay(3).sample(1, np.random.default_rng(0))


def test_same_seed_same_minibatches():
    r = LocalReplay(100)
    for i in range(100):
        r.insert(tr(i))
    a = np.random.default_rng(5)
    b = np.random.default_rng(5)
    for _ in range(10):
        assert ids(r.sample(32, a)) == ids(r.sample(32, b))


def test_sample_never_returns_evicted():
    r = LocalReplay(10)
    rng = np.random.default_rng(0)
    for i in range(100):
        r.insert(tr(i))
        assert min(ids(r.sample(16, rng))) >= max(0, i - 9)


def test_local_sampling_uniform_chi_square():
    r = LocalReplay(1000)
    for i in range(1000):
        r.insert(tr(i))
    rng = np.random.default_rng(11)
    counts = np.zeros(1000)
    # 100,000 draws of batch 32
    for _ in range(100_000 // 32 + 1):
        np.add.at(counts, ids(r.sample(32, rng)), 1)
    assert stats.chisquare(counts).pvalue > 0.01


def test_one_writer_one_reader_concurrently():
    r = LocalReplay(64)
    stop = threading.Event()
    errors = []

    def reader():
        rng = np.random.default_rng(0)
        while not stop.is_set():
            try:
                batch = r.sample(8, rng)
                assert all(t is not None for t in batch)
            except ReplayNotReady:
                pass
            except Exception as exc:
                errors.append(exc)

    t = threading.Thread(target=reader)
    t.start()
    for i in range(20_000):
        r.insert(tr(i))
    stop.set()
    t.join()
    assert not errors
    assert ids(r.contents()) == list(range(20_000 - 64, 20_000))


def test_aggregate_capacity():
    assert aggregate_capacity([LocalReplay(100) for _ in range(4)]) == 400


# --- global store --------------------------------------------------------------------------


def test_conservation():
    g = GlobalReplay(2, 100)
    for i in range(10):
        global_put(g, tr(i))
    assert sum(g.sizes()) == 10


@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 300))
def test_conservation_with_eviction(n_shards, cap, n):
    g = GlobalReplay(n_shards, cap)
    for i in range(n):
        g.put(tr(i, actor=i % 4))
    assert len(g) == n - g.evicted()
    assert all(s <= cap for s in g.sizes())


def test_shard_key_deterministic_and_spread():
    counts = np.bincount([shard_for(a, s, 4) for a in range(10) for s in range(2000)], minlength=4)
    assert shard_for(3, 17, 4) == shard_for(3, 17, 4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_single_shard_matches_local():
    g = GlobalReplay(1, 50)
    r = LocalReplay(50)
    for i in range(80):
        g.put(tr(i))
        r.insert(tr(i))
    assert ids(g.shards[0].contents()) == ids(r.contents())
    draws_g = ids(global_sample(g, 10_000, np.random.default_rng(0)))
    assert set(draws_g) == set(ids(r.contents()))


def test_global_sampling_uniform_over_items():
    # deliberately unequal shard sizes
    g = GlobalReplay(3, 1000)
    for i in range(1200):
        g.put(tr(i, actor=i % 7))
    assert len(set(g.sizes())) > 1
    counts = np.zeros(1200)
    np.add.at(counts, ids(g.sample(100_000, np.random.default_rng(3))), 1)
    assert stats.chisquare(counts).pvalue > 0.01


def test_global_empty_not_ready():
    with pytest.raises(ReplayNotReady):
        GlobalReplay(2, 5).sample(1, np.random.default_rng(0))


# --- replay service ------------------------------------------------------------------------


def test_remote_replay_round_trip():
    store = GlobalReplay(2, 100)
    host = ServiceHost(ReplayService(store, seed=0, warmup=3).handle)
    remote = RemoteReplay(host.connect_in_process())
    remote.insert(tr(1))
    with pytest.raises(ReplayNotReady):
        remote.sample(2)
    remote.insert(tr(2))
    remote.insert(tr(3))
    assert set(ids(remote.sample(50))) == {1, 2, 3}
    st_ = remote.stats()
    assert st_["total"] == 3 and st_["puts"] == 3 and sum(st_["sizes"]) == 3


def test_remote_put_returns_shard():
    store = GlobalReplay(4, 10)
    remote = RemoteReplay(ServiceHost(ReplayService(store).handle).connect_in_process())
    t = tr(9, actor=2)
    assert remote.put(t) == shard_for(2, 9, 4)
