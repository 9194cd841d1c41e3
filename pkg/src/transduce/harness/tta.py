"""Multi-scale test-time augmentation."""

from __future__ import annotations

import numpy as np

from ..grid import CATEGORICAL, GridError, LabelMap, nearest_resize, resize_linear

DEFAULT_SCALES = (0.8, 0.9, 1.0)


def _scaled_size(res: tuple, s: float) -> tuple:
    return tuple(max(1, int(round(r * s))) for r in res)


def _pads(res: tuple, size: tuple) -> list:
    return [((r - z) // 2, r - z - (r - z) // 2) for r, z in zip(res, size)]


def tta_predict(solver, grid: np.ndarray, scales=DEFAULT_SCALES) -> LabelMap:
    """Average predictions over down-scaled, reflection-padded copies of ``grid``.

    Each copy's prediction is registered back by cropping the scaled region
    and up-scaling it to the full grid. Nodes invalid in every pass stay
    invalid; otherwise the mean runs over the passes where they are valid.
    """
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise GridError("at least one scale is required")
    bad = [s for s in scales if not 0.0 < s <= 1.0]
    if bad:
        raise GridError(f"scales must lie in (0, 1], got {bad}")
    grid = np.asarray(grid)
    dim = grid.ndim - 1  # trailing channel axis
    res = tuple(grid.shape[:dim])
    if len(scales) == 1 and scales[0] == 1.0:
        return solver(grid)

    mean = count = None
    kind = None
    for s in scales:
        size = _scaled_size(res, s)
        if size == res:
            pred = solver(grid)
            values, valid = pred.values.reshape(*res, -1).astype(np.float64), pred.valid.reshape(res)
        else:
            small = resize_linear(grid, size)
            pads = _pads(res, size) + [(0, 0)] * (grid.ndim - dim)
            padded = np.pad(small, pads, mode="reflect" if min(size) > 1 else "edge")
            pred = solver(padded.astype(grid.dtype))
            crop = tuple(slice(a, a + z) for (a, _), z in zip(pads, size))
            values = resize_linear(pred.values.reshape(*res, -1)[crop], res)
            valid = nearest_resize(pred.valid.reshape(res)[crop], res)
        kind = pred.kind
        if mean is None:
            mean = np.zeros_like(values)
            count = np.zeros(res, dtype=np.int64)
        # running mean, exact when every pass agrees
        count = count + valid
        step = np.divide(1.0, count, out=np.zeros(res), where=count > 0)[..., None]
        mean = np.where(valid[..., None], mean + (values - mean) * step, mean)
    values = mean.reshape(-1, mean.shape[-1])
    valid = (count > 0).reshape(-1)
    if kind == CATEGORICAL:
        total = values.sum(axis=1, keepdims=True)
        values = np.divide(values, total, out=np.zeros_like(values), where=total > 0)
    values[~valid] = 0.0
    return LabelMap(kind, res, values.astype(np.float32), valid)
