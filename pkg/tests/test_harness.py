from __future__ import annotations

import math

import numpy as np
import pytest

from transduce import LabelMap, MemoryStore
from transduce.features import SyntheticExtractorConfig, synth_extract
from transduce.grid import GridError
from transduce.harness import (
    ScenarioConfig,
    ScenarioError,
    ScenarioSpec,
    make_dataset,
    make_stream,
    measure_learning_time,
    miou,
    parse_scenario,
    rmse_depth,
    run_scenario,
    tta_predict,
)
from transduce.harness.shapes import BACKGROUND, class_color
from transduce.mp import MPConfig
from transduce.search import SearchConfig
from transduce.solver import Solver, SolverConfig

# --- metrics -----------------------------------------------------------------


def test_miou_examples():
    gt = np.array([0, 0, 1, 1, 2, 2])
    assert miou(gt, gt, [0, 1, 2]) == 1.0
    assert miou(np.array([1, 1, 2, 2, 0, 0]), gt, [0, 1, 2]) == 0.0
    # class 1: I=1 U=2, class 2: I=2 U=3 -> micro 3/5
    assert miou(np.array([0, 0, 1, 2, 2, 2]), gt, [1, 2]) == pytest.approx(3 / 5)
    assert math.isnan(miou(gt, gt, [5]))


def test_miou_ignores_masked_and_invalid_gt():
    gt = LabelMap.from_classes(np.array([[1, 1, 2, 2]]), 3, valid=np.array([True, True, True, False]))
    pred = np.array([1, 2, 2, 1])
    assert miou(pred, gt, [1, 2]) == pytest.approx(2 / 4)
    assert miou(pred, gt, [1, 2], ignore_mask=np.array([False, True, False, False])) == 1.0


def test_invalid_prediction_is_wrong():
    gt = np.array([1, 1])
    pred = LabelMap.from_classes(np.array([[1, 1]]), 2, valid=np.array([True, False]))
    assert miou(pred, gt, [1]) == 0.5


def test_rmse_examples():
    gt = LabelMap.scalar(np.arange(4.0), res=(2, 2))
    assert rmse_depth(gt, gt) == 0.0
    assert rmse_depth(LabelMap.scalar(np.arange(4.0) + 2.0, res=(2, 2)), gt) == pytest.approx(2.0)
    # only nodes 0 and 2 valid in both: errors 1 and 3
    pred = LabelMap.scalar(np.array([1.0, 9.0, 5.0, 9.0]), valid=np.array([True, True, True, False]), res=(2, 2))
    gt2 = LabelMap.scalar(np.array([0.0, 1.0, 2.0, 3.0]), valid=np.array([True, False, True, True]), res=(2, 2))
    assert rmse_depth(pred, gt2) == pytest.approx(math.sqrt(5.0))
    with pytest.raises(GridError):
        rmse_depth(gt, LabelMap.scalar(np.zeros(3)))


# --- shapes ------------------------------------------------------------------


def test_shapes_reproducible():
    a, b = make_dataset(7, 2, (16, 16), (1, 2)), make_dataset(7, 2, (16, 16), (1, 2))
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.classes, y.classes) for x, y in zip(a, b))
    assert a[0].image.shape == (16, 16, 3) and a[0].image.dtype == np.float32
    assert set(np.unique(a[0].classes)) <= {BACKGROUND, 1, 2}
    assert np.array_equal(class_color(3), class_color(3))


# --- TTA ---------------------------------------------------------------------


def _solver(store, **mp):
    cfg = SolverConfig(SearchConfig(phi=1.0, k_init=4), MPConfig(**mp) if mp else MPConfig(), use_mp=bool(mp))
    return Solver(store, SyntheticExtractorConfig(n=3), cfg)


def _shape_store(res=(16, 16)):
    store = MemoryStore()
    for s in make_dataset(1, 2, res, (1, 2)):
        store.consolidate_add(synth_extract(s.image, SyntheticExtractorConfig(n=3)), LabelMap.from_classes(s.classes, 3))
    return store


def test_tta_single_scale_is_identity():
    solver = _solver(_shape_store())
    img = make_dataset(2, 1, (16, 16), (1, 2))[0].image
    assert tta_predict(solver, img, (1.0,)).equals(solver(img))


def test_tta_constant_memory_gives_constant_output():
    store = MemoryStore()
    store.consolidate_add(synth_extract(np.random.default_rng(0).random((16, 16, 3)), SyntheticExtractorConfig(n=3)),
                          LabelMap.from_classes(np.full((16, 16), 2), 3))
    out = tta_predict(_solver(store), np.random.default_rng(1).random((16, 16, 3)), (0.8, 0.9, 1.0))
    assert np.all(out.valid) and np.all(out.classes() == 2)
    assert np.allclose(out.values[:, 2], 1.0)


def test_tta_reproducible_and_on_simplex():
    solver = _solver(_shape_store())
    img = make_dataset(3, 1, (16, 16), (1, 2))[0].image
    a, b = tta_predict(solver, img), tta_predict(solver, img)
    assert a.equals(b)
    assert np.allclose(a.values[a.valid].sum(axis=1), 1.0, atol=1e-5)


def test_tta_rejects_bad_scales():
    solver = _solver(_shape_store())
    img = np.zeros((16, 16, 3))
    for bad in ((), (0.0,), (1.2,)):
        with pytest.raises(GridError):
            tta_predict(solver, img, bad)


# --- timing ------------------------------------------------------------------


def test_learning_time_stats(rng):
    empty = measure_learning_time(MemoryStore(), [])
    assert empty.n == 0 and empty.total == 0.0
    items = [(synth_extract(rng.random((16, 16, 3))), LabelMap.from_classes(np.zeros((16, 16), int), 2)) for _ in range(3)]
    stats = measure_learning_time(MemoryStore(), items)
    assert stats.n == 3 and all(t > 0 for t in stats.times)
    assert stats.total == pytest.approx(sum(stats.times))


# --- scenarios ---------------------------------------------------------------


def test_scenario_names():
    s = ScenarioSpec.parse("2-2(4)")
    assert s.steps == ((1, 2), (3, 4), (5, 6), (7, 8))
    t = ScenarioSpec.parse("13-1(7)")
    assert len(t.steps) == 7 and t.steps[0] == tuple(range(1, 14)) and t.steps[-1] == (19,)
    with pytest.raises(ScenarioError):
        ScenarioSpec.parse("two steps")


def test_scenario_rejects_overlap():
    with pytest.raises(ScenarioError):
        ScenarioSpec(((1, 2), (2, 3)))
    with pytest.raises(ScenarioError):
        ScenarioSpec(((0, 1),))


def _cfg():
    search = SearchConfig(phi=0.5, k_init=4)
    return ScenarioConfig(SolverConfig(search, use_mp=False), SyntheticExtractorConfig(n=3), n_sp=0)


def test_single_step_has_empty_delta():
    spec = ScenarioSpec(((1, 2),))
    rep = run_scenario(spec, MemoryStore(), make_stream(spec, 0, (16, 16)), _cfg())
    assert rep.delta.size == 0 and math.isnan(rep.delta_avg)
    assert 0.0 <= rep.initial[0] <= 1.0


def test_relabel_only_retains_exactly():
    spec = ScenarioSpec(((1,), (2,), (3,)))
    stream = make_stream(spec, 4, (16, 16), relabel_only=True)
    rep = run_scenario(spec, MemoryStore(), stream, _cfg())
    assert np.array_equal(rep.delta, np.zeros(2))
    assert all(op == "relabel" for op, _, _ in rep.mutations[3:])


def test_scenario_rerun_bit_identical():
    spec = ScenarioSpec.parse("1-1(3)")
    runs = [run_scenario(spec, MemoryStore(), make_stream(spec, 9, (16, 16)), _cfg()) for _ in range(2)]
    assert runs[0].to_kv() == runs[1].to_kv()
    assert "delta.avg=" in runs[0].to_kv() and "D1" in runs[0].to_table()


def test_scenario_unknown_class_rejected():
    spec = ScenarioSpec(((1,), (2,)))
    stream = make_stream(spec, 0, (16, 16))
    stream[1].train[0][2][0, 0] = 42
    with pytest.raises(ScenarioError, match="42"):
        run_scenario(spec, MemoryStore(), stream, _cfg())


def test_scenario_n_steps_prefix():
    spec = ScenarioSpec.parse("1-1(3)")
    full = run_scenario(spec, MemoryStore(), make_stream(spec, 2, (16, 16)), _cfg())
    part = run_scenario(spec, MemoryStore(), make_stream(spec, 2, (16, 16)), _cfg(), n_steps=2)
    assert np.array_equal(part.history, full.history[:2, :2], equal_nan=True)


def test_scenario_config_round_trip():
    text = """
[scenario]
name = 2-2(4)
seed = 5
res = 16
relabel_only = yes
[search]
phi = 0.25
k_init = 8
[mp]
enabled = no
[tta]
scales = 0.9,1.0
"""
    f = parse_scenario(text)
    assert f.seed == 5 and f.res == (16, 16) and f.relabel_only
    assert f.config.solver.search.phi == 0.25 and not f.config.solver.use_mp
    assert f.config.tta_scales == (0.9, 1.0)
    again = parse_scenario(f.to_text())
    assert again.to_text() == f.to_text()
    assert parse_scenario(text, seed=11).seed == 11
