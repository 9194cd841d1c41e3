from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pyramid, random_store
from transduce import LabelMap, MemorySample, MemoryStore, SearchConfig, predict_raw, sparsify
from transduce.memory import EmptyMemoryError, StoreError, novelty_select


def _sample(rng, res=(8, 8), n=3, sid="a"):
    pyr = random_pyramid(rng, res, n)
    return MemorySample(sid, pyr, LabelMap.from_classes(rng.integers(0, 3, res), 3))


def test_novelty_identical_features_picks_first():
    assert novelty_select(np.ones((4, 3))) == 0


def test_novelty_picks_orthogonal_member():
    patch = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    # brute force: mean cosine to the three siblings
    scores = [np.mean([patch[i] @ patch[j] for j in range(4) if j != i]) for i in range(4)]
    assert novelty_select(patch) == int(np.argmin(scores)) == 2


def test_novelty_singleton_patch():
    assert novelty_select(np.array([[0.3, 0.1]])) == 0


@given(st.integers(0, 2**32 - 1))
def test_novelty_permutation_consistent(seed):
    rng = np.random.default_rng(seed)
    patch = rng.standard_normal((4, 3))
    perm = rng.permutation(4)
    assert perm[novelty_select(patch[perm])] == novelty_select(patch)


def test_sparsify_identity_for_zero(rng):
    s = _sample(rng)
    assert sparsify(s, 0) is s


def test_sparsify_counts_examples(rng):
    s8 = _sample(rng, (8, 8), 3)
    assert sparsify(s8, 1).pyramid.features(1).shape[0] == 16
    s64 = _sample(rng, (64, 64), 5)
    out = sparsify(s64, 3)
    for l in range(1, 4):
        assert out.pyramid.features(l).shape[0] == 64
    assert out.pyramid.features(4).shape[0] == 64 and not out.pyramid.is_sparse(4)


@pytest.mark.parametrize("n_sp", [1, 2, 3])
def test_sparsify_cascade_and_labels(rng, n_sp):
    s = _sample(rng, (16, 16), 4)
    out = sparsify(s, n_sp)
    p = s.pyramid.schedule.p(n_sp + 1)
    for l in range(1, n_sp + 1):
        assert out.pyramid.features(l).shape[0] == p
    # each retained node's structural parent is retained one level up
    for l in range(1, n_sp):
        kids = out.pyramid.node_indices(l)
        res, res_up = s.pyramid.schedule.res(l), s.pyramid.schedule.res(l + 1)
        parents = {(v // res[1] // 2) * res_up[1] + (v % res[1]) // 2 for v in kids}
        assert parents == set(out.pyramid.node_indices(l + 1).tolist())
    leaves = out.pyramid.node_indices(1)
    assert out.labels.valid.sum() == len(leaves)
    assert np.array_equal(out.labels.values[leaves], s.labels.values[leaves])


def test_sparsify_errors(rng):
    s = _sample(rng, (8, 8), 3)
    with pytest.raises(StoreError):
        sparsify(s, 3)
    with pytest.raises(StoreError):
        sparsify(sparsify(s, 1), 1)


def test_serialized_size_decreases_with_n_sp(rng):
    s = _sample(rng, (32, 32), 5)
    sizes = [sparsify(s, k).nbytes() for k in range(5)]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_store_add_remove_and_ids(rng):
    store = MemoryStore()
    a = store.consolidate_add(random_pyramid(rng), LabelMap.from_classes(np.zeros((8, 8), int), 2))
    b = store.consolidate_add(random_pyramid(rng), LabelMap.from_classes(np.ones((8, 8), int), 2))
    assert store.ids == [a, b] and store.m == 2
    with pytest.raises(StoreError):
        store.consolidate_add(_sample(rng, sid=a))
    store.consolidate_remove(a)
    assert store.ids == [b]
    with pytest.raises(StoreError):
        store.consolidate_add(random_pyramid(rng, (4, 4), 2), LabelMap.from_classes(np.zeros((4, 4), int), 2))


def test_empty_store_snapshot_raises():
    with pytest.raises(EmptyMemoryError, match="empty memory"):
        MemoryStore().snapshot()


def test_update_labels_masks(rng):
    store = random_store(rng, m=1)
    sid = store.ids[0]
    new = LabelMap.from_classes(np.full((8, 8), 2), 3)
    assert store.update_labels(sid, new, np.zeros(64, bool)) == 0
    mask = np.zeros(64, bool)
    mask[:10] = True
    store.update_labels(sid, new, mask)
    got = store.get(sid).labels
    assert np.all(got.classes()[:10] == 2)
    store.update_labels(sid, new)
    assert store.get(sid).labels.equals(new)
    with pytest.raises(StoreError):
        store.update_labels("nope", new)


def test_update_labels_changes_retrieval(rng):
    store = random_store(rng, m=2)
    query = store.get(store.ids[0]).pyramid
    cfg = SearchConfig(phi=0.5)
    before, _ = predict_raw(query, store, cfg)
    mask = np.zeros(64, bool)
    mask[20:30] = True
    store.update_labels(store.ids[0], LabelMap.from_classes(np.full((8, 8), 2), 3), mask)
    after, _ = predict_raw(query, store, cfg)
    assert np.all(after.classes()[20:30] == 2)
    assert np.array_equal(after.classes()[~mask], before.classes()[~mask])


def test_unlearning_is_exact(rng):
    store = random_store(rng, m=3)
    query = random_pyramid(rng)
    before, _ = predict_raw(query, store)
    sid = store.consolidate_add(random_pyramid(rng), LabelMap.from_classes(rng.integers(0, 3, (8, 8)), 3))
    store.consolidate_remove(sid)
    after, _ = predict_raw(query, store)
    assert after.equals(before)


def test_save_load_round_trip(tmp_path, rng):
    store = random_store(rng, m=3, n_sp=1)
    store.save(tmp_path / "s")
    back = MemoryStore.load(tmp_path / "s")
    assert back.ids == store.ids and back.n_sp == 1
    for sid in store.ids:
        assert back.get(sid).pyramid.equals(store.get(sid).pyramid)
        assert back.get(sid).labels.equals(store.get(sid).labels)
    query = random_pyramid(rng)
    assert predict_raw(query, back)[0].equals(predict_raw(query, store)[0])
    store.save(tmp_path / "t")
    for f in (tmp_path / "s").iterdir():
        assert f.read_bytes() == (tmp_path / "t" / f.name).read_bytes()


def test_manifest_field_order(tmp_path, rng):
    random_store(rng, m=1).save(tmp_path / "s")
    keys = [line.split()[0] for line in (tmp_path / "s" / "manifest.txt").read_text().splitlines()]
    assert keys[:7] == ["transduce-store", "dim", "schedule", "n_sp", "label_kind", "extractor", "samples"]
