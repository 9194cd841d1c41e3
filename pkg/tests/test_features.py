from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transduce import ResolutionSchedule
from transduce.features import (
    SyntheticExtractorConfig,
    box_filter,
    export_pyramid,
    import_pyramid,
    synth_extract,
)
from transduce.grid import GridError
from transduce.ptns import write_grid


@given(st.floats(-3, 3), st.integers(0, 50))
def test_constant_input_gives_constant_levels(value, seed):
    pyr = synth_extract(np.full((16, 16, 3), value), SyntheticExtractorConfig(seed=seed))
    for l in range(1, pyr.n + 1):
        f = pyr.features(l)
        assert np.all(f == f[0])


def test_schedule_and_channels():
    pyr = synth_extract(np.zeros((16, 16, 3)))
    assert [pyr.schedule.res(l) for l in range(1, 5)] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert pyr.channel_schedule() == (8, 16, 32, 64)
    assert pyr.features(1).dtype == np.float32


def test_deterministic_and_seed_sensitive(rng):
    img = rng.random((16, 16, 3))
    a = synth_extract(img, SyntheticExtractorConfig(seed=3))
    b = synth_extract(img.copy(), SyntheticExtractorConfig(seed=3))
    c = synth_extract(img, SyntheticExtractorConfig(seed=4))
    assert a.equals(b)
    assert not a.equals(c)


def test_quadrant_interiors_share_features():
    img = np.zeros((16, 16, 3))
    img[:8, 8:] = 1.0
    img[8:, :8] = 0.5
    pyr = synth_extract(img, SyntheticExtractorConfig(radius=1))
    f = pyr.features(1).reshape(16, 16, -1)
    # nodes more than one away from a quadrant border see a constant neighbourhood
    for rows, cols in [(slice(0, 7), slice(0, 7)), (slice(1, 7), slice(9, 16)), (slice(9, 16), slice(1, 7))]:
        block = f[rows, cols].reshape(-1, f.shape[-1])
        assert np.all(block == block[0])
    assert not np.array_equal(f[0, 0], f[0, 15])


def test_box_filter_mean():
    g = np.arange(9, dtype=float).reshape(3, 3)
    out = box_filter(g, 1, 2)
    assert out[1, 1] == pytest.approx(4.0)
    assert np.array_equal(box_filter(g, 0, 2), g)


def test_one_dimensional_input():
    pyr = synth_extract(np.linspace(0, 1, 32)[:, None], SyntheticExtractorConfig(n=3))
    assert pyr.schedule.res(3) == (8,)


def test_bad_input_shape():
    with pytest.raises(GridError):
        synth_extract(np.zeros((4, 4, 4, 3)), dim=2)


def test_extractor_description_round_trip():
    cfg = SyntheticExtractorConfig(seed=9, n=3)
    back = SyntheticExtractorConfig.from_description(cfg.describe())
    assert back.channel_schedule() == cfg.channel_schedule() and back.seed == 9
    with pytest.raises(GridError):
        SyntheticExtractorConfig.from_description({"name": "other"})


def test_export_import_round_trip(tmp_path, rng):
    pyr = synth_extract(rng.random((16, 16, 3)))
    export_pyramid(tmp_path / "p.ptns", pyr)
    assert import_pyramid(tmp_path / "p.ptns").equals(pyr)


def test_import_completes_missing_levels(tmp_path, rng):
    pyr = synth_extract(rng.random((32, 32, 3)), SyntheticExtractorConfig(n=4))
    paths = {}
    for l in range(1, 5):
        paths[l] = tmp_path / f"l{l}.ptns"
        write_grid(paths[l], pyr.grid(l), 2)
    target = ResolutionSchedule.halving((64, 64), 6)
    full = import_pyramid({l + 1: p for l, p in paths.items()}, target)
    assert full.n == 6
    for l in range(2, 6):
        assert np.allclose(full.features(l), pyr.features(l - 1))
    assert full.schedule.res(1) == (64, 64) and full.schedule.res(6) == (2, 2)
    assert np.all(np.isfinite(full.features(1))) and np.all(np.isfinite(full.features(6)))


def test_import_missing_file_names_level(tmp_path):
    with pytest.raises(FileNotFoundError, match="level 3"):
        import_pyramid({3: tmp_path / "nope.ptns"}, ResolutionSchedule.halving((8, 8), 3))
