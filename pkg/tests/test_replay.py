import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lofo.replay import (
    FIFOBuffer,
    GridSpec,
    LoFoBuffer,
    LofoParams,
    ReservoirBuffer,
    Transition,
    export_histogram,
    fifo_insert,
    lofo_insert,
    make_buffer,
    neighborhood,
    reservoir_insert,
    sample_batch,
)
from oracles import brute_neighbourhood, lofo_reference, lofo_reference_py


def tr(x, tick=-1, emb=None):
    return Transition(np.array([x], float), 0, float(x), np.array([x], float), False, tick, emb)


def held(buf):
    return sorted(buf.batch().obs[:, 0].tolist())


# --- FIFO ---------------------------------------------------------------

def test_fifo_evicts_oldest():
    buf = FIFOBuffer(2, (1,))
    assert fifo_insert(buf, tr(1)) is None
    assert fifo_insert(buf, tr(2)) is None
    ev = fifo_insert(buf, tr(3))
    assert ev.obs[0] == 1 and ev.tick == 0
    assert held(buf) == [2, 3]


def test_fifo_capacity_one_evicts_in_order():
    buf = FIFOBuffer(1, (1,))
    evicted = [fifo_insert(buf, tr(i)) for i in range(6)]
    assert evicted[0] is None
    assert [e.tick for e in evicted[1:]] == [0, 1, 2, 3, 4]
    assert buf.evictions == 5


def test_fifo_saturation_by_phase_two_data():
    buf = FIFOBuffer(50, (1,))
    for i in range(200):
        buf.insert([-1.0], 0, 0.0, [-1.0], False)
    for i in range(50):
        buf.insert([1.0], 0, 0.0, [1.0], False)
    assert np.all(buf.observations() == 1.0)


def test_fifo_allocates_lazily():
    buf = FIFOBuffer(4_500_000, (2,))
    buf.insert([0, 0], 0, 0.0, [0, 0], False)
    assert buf._cols.n_slots < 10_000


# --- reservoir ------------------------------------------------------------

def test_reservoir_fill_phase_keeps_everything():
    buf = ReservoirBuffer(5, (1,), rng=0)
    assert all(reservoir_insert(buf, tr(i)) is None for i in range(5))
    assert held(buf) == [0, 1, 2, 3, 4]


class ForcedRng:
    def __init__(self, value):
        self.value = value

    def integers(self, high):
        return self.value


def test_reservoir_forced_replacement_of_slot_zero():
    buf = ReservoirBuffer(3, (1,))
    for i in range(3):
        buf.insert_transition(tr(i))
    ev = reservoir_insert(buf, tr(9), rng=ForcedRng(0))
    assert ev.obs[0] == 0
    assert buf._cols.obs[0, 0] == 9


def test_reservoir_discard_counts_as_eviction():
    buf = ReservoirBuffer(3, (1,))
    for i in range(3):
        buf.insert_transition(tr(i))
    ev = reservoir_insert(buf, tr(9), rng=ForcedRng(3))
    assert ev.obs[0] == 9
    assert len(buf) == 3 == buf.inserts - buf.evictions


def test_reservoir_capacity_one_retention():
    # 1e5 trials of 10 inserts: each item survives with probability 1/10
    rng = np.random.default_rng(0)
    trials, n = 100_000, 10
    counts = np.zeros(n)
    for _ in range(trials // 1000):
        for _ in range(1000):
            buf = ReservoirBuffer(1, (1,), rng=rng)
            for i in range(n):
                buf.insert([i], 0, 0.0, [i], False)
            counts[int(buf._cols.obs[0, 0])] += 1
    sigma = np.sqrt(trials * 0.1 * 0.9)
    assert np.all(np.abs(counts - trials * 0.1) <= 3 * sigma)


# --- LoFo ---------------------------------------------------------------

def lofo(d, n, dim=1):
    return LoFoBuffer(LofoParams(d, n), dim, (dim,))


def test_lofo_params_validated():
    with pytest.raises(ValueError):
        LofoParams(0.0, 1)
    with pytest.raises(ValueError):
        LofoParams(0.1, 0)


def test_lofo_empty_neighbourhood_grows():
    buf = lofo(0.5, 1)
    assert lofo_insert(buf, tr(0, emb=[0.0])) is None
    assert lofo_insert(buf, tr(5, emb=[5.0])) is None
    assert len(buf) == 2


def test_lofo_single_neighbour_evicted():
    buf = lofo(0.5, 1)
    buf.insert_transition(tr(0, emb=[0.0]))
    ev = buf.insert_transition(tr(1, emb=[0.1]))
    assert ev.tick == 0 and len(buf) == 1


def test_lofo_overlap_excess_evicts_only_oldest():
    # three points on a circle of radius 0.9 are pairwise 1.56 apart, so each
    # was admitted freely, yet all three lie within D=1 of the centre
    buf = lofo(1.0, 1, dim=2)
    angles = np.deg2rad([90, 210, 330])
    for k, a in enumerate(angles):
        e = [0.9 * np.cos(a), 0.9 * np.sin(a)]
        assert buf.insert(e, k, 0.0, e, False, embedding=e) is None
    assert len(buf.neighborhood([0.0, 0.0])) == 3
    ev = buf.insert([0.0, 0.0], 9, 0.0, [0.0, 0.0], False, embedding=[0.0, 0.0])
    assert ev.tick == 0
    assert len(buf) == 3
    assert len(buf.neighborhood([0.0, 0.0])) == 3


def test_neighbourhood_is_strict():
    buf = lofo(0.5, 10)
    buf.insert_transition(tr(0, emb=[0.0]))
    buf.insert_transition(tr(1, emb=[0.5]))
    assert neighborhood(buf, [0.0]).tolist() == [0]
    assert neighborhood(buf, [0.5]).tolist() == [1]


def test_neighbourhood_matches_brute_force():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(1000, 4))
    buf = LoFoBuffer(LofoParams(1.0, 10_000), 4, (1,))
    buf.extend_embeddings(pts)
    for q in rng.normal(size=(20, 4)):
        assert buf.neighborhood(q).tolist() == brute_neighbourhood(pts.tolist(), q.tolist(), 1.0)


def test_neighbourhood_width_mismatch():
    buf = lofo(0.5, 1, dim=2)
    with pytest.raises(ValueError):
        buf.neighborhood([0.0, 0.0, 0.0])


def test_lofo_insert_requires_embedding():
    with pytest.raises(ValueError):
        lofo(0.5, 1).insert([0.0], 0, 0.0, [0.0], False)


def test_lofo_payload_survives_slot_reuse():
    rng = np.random.default_rng(1)
    buf = lofo(0.3, 2)
    ref = {}
    for tick in range(500):
        x = float(rng.uniform(0, 3))
        buf.insert([x], tick % 3, -x, [x + 1], tick % 2 == 0, embedding=[x])
        ref[tick] = x
    b = buf.batch()
    for i, t in enumerate(b.ticks):
        assert b.obs[i, 0] == np.float32(ref[t])
        assert b.rewards[i] == -ref[t]
        assert b.actions[i] == t % 3
        assert b.terminals[i] == (t % 2 == 0)


@settings(max_examples=60, deadline=None)
@given(
    xs=st.lists(st.integers(0, 30), min_size=1, max_size=120),
    d=st.sampled_from([0.5, 1.0, 1.5, 3.0]),
    n=st.integers(1, 4),
)
def test_lofo_matches_python_reference(xs, d, n):
    # integer lattice embeddings hit the strict boundary exactly
    embs = [(float(x) / 2.0,) for x in xs]
    buf = lofo(d, n)
    for e in embs:
        buf.insert([e[0]], 0, 0.0, [e[0]], False, embedding=e)
    assert buf.ticks().tolist() == lofo_reference_py(embs, d, n)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5), d=st.floats(0.05, 0.6))
def test_lofo_insert_equals_extend(seed, n, d):
    rng = np.random.default_rng(seed)
    embs = rng.uniform(0, 1, size=(300, 2))
    one = LoFoBuffer(LofoParams(d, n), 2, (2,))
    for e in embs:
        one.insert(e, 0, 0.0, e, False, embedding=e)
    many = LoFoBuffer(LofoParams(d, n), 2, (2,))
    many.extend_embeddings(embs)
    assert one.ticks().tolist() == many.ticks().tolist()
    assert one.ticks().tolist() == sorted(lofo_reference(embs, d, n).tolist())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6), d=st.floats(0.05, 0.5))
def test_lofo_local_growth_bound(seed, n, d):
    rng = np.random.default_rng(seed)
    buf = LoFoBuffer(LofoParams(d, n), 2, (2,))
    for e in rng.uniform(0, 1, size=(400, 2)):
        pre = len(buf.neighborhood(e))
        buf.insert(e, 0, 0.0, e, False, embedding=e)
        post = len(buf.neighborhood(e))
        assert post <= max(n, pre)
        if pre < n:
            assert post == pre + 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["fifo", "reservoir", "lofo"]))
def test_size_accounting(seed, kind):
    rng = np.random.default_rng(seed)
    buf = make_buffer(kind, (1,), capacity=int(rng.integers(1, 30)),
                      lofo=LofoParams(0.1, int(rng.integers(1, 4))), embed_dim=1, rng=seed)
    n_evicted = 0
    for i in range(int(rng.integers(1, 200))):
        x = rng.uniform()
        ev = buf.insert([x], 0, 0.0, [x], False, embedding=[x])
        n_evicted += ev is not None
        assert len(buf) == buf.inserts - buf.evictions
        assert buf.evictions == n_evicted
        assert len(buf.ticks()) == len(buf) == len(set(buf.ticks().tolist()))


def test_lofo_spread_survives_distribution_shift():
    # broad data, then data confined to one corner: LoFo keeps its coverage
    rng = np.random.default_rng(0)
    grid = GridSpec(np.linspace(0, 1, 11), np.linspace(0, 1, 11), lambda o: (o[:, 0], o[:, 1]))
    buf = LoFoBuffer(LofoParams(0.05, 5), 2, (2,))
    for e in rng.uniform(0, 1, size=(20_000, 2)):
        buf.insert(e, 0, 0.0, e, False, embedding=e)
    before = np.count_nonzero(buf.stats(grid).bins)
    for e in rng.uniform(0, 0.2, size=(100_000, 2)):
        buf.insert(e, 0, 0.0, e, False, embedding=e)
    after = np.count_nonzero(buf.stats(grid).bins)
    assert after >= 0.8 * before


# --- sampling and export ------------------------------------------------------

def test_sample_singleton_and_empty():
    rng = np.random.default_rng(0)
    buf = FIFOBuffer(4, (1,))
    with pytest.raises(ValueError):
        sample_batch(buf, 3, rng)
    buf.insert_transition(tr(7))
    b = sample_batch(buf, 5, rng)
    assert b.obs[:, 0].tolist() == [7] * 5
    assert sample_batch(buf, 0, rng).obs.shape == (0, 1)


@pytest.mark.parametrize("kind", ["fifo", "lofo"])
def test_sample_uniform(kind):
    rng = np.random.default_rng(0)
    buf = make_buffer(kind, (1,), capacity=20, lofo=LofoParams(0.01, 1), embed_dim=1)
    for i in range(20):
        buf.insert([i], 0, 0.0, [i], False, embedding=[float(i)])
    draws = 100_000
    counts = np.bincount(sample_batch(buf, draws, rng).obs[:, 0].astype(int), minlength=20)
    p = 1 / 20
    assert np.all(np.abs(counts - draws * p) <= 3 * np.sqrt(draws * p * (1 - p)))


def test_histogram_and_dump(tmp_path):
    grid = GridSpec(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0]), lambda o: (o[:, 0], o[:, 1]))
    buf = FIFOBuffer(10, (2,))
    path = export_histogram(buf, grid, tmp_path / "h.csv")
    assert path.read_text().splitlines()[1:] == ["0,0,0", "1,0,0"]
    buf.insert([1.5, 0.5], 2, 1.0, [1.6, 0.5], True)
    rows = (export_histogram(buf, grid, tmp_path / "h.csv")).read_text().splitlines()
    assert rows == ["bin_x,bin_y,count", "0,0,0", "1,0,1"]
    recs = [json.loads(x) for x in buf.dump_ndjson(tmp_path / "d.ndjson").read_text().splitlines()]
    assert recs == [{"tick": 0, "obs": [1.5, 0.5], "action": 2, "reward": 1.0,
                     "next_obs": [1.600000023841858, 0.5], "terminal": True}]
