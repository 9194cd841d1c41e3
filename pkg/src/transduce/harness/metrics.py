"""Evaluation metrics over label grids."""

from __future__ import annotations

import numpy as np

from ..grid import GridError, LabelMap

NO_DATA = float("nan")


def _classes(x) -> np.ndarray:
    # invalid predictions become -1, which matches no class
    if isinstance(x, LabelMap):
        return x.classes(invalid=-1)
    return np.asarray(x, dtype=np.int64).reshape(-1)


def confusion_counts(pred, gt, classes, ignore_mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (intersection, union) counts over non-ignored nodes.

    Nodes whose ground truth is invalid (LabelMap) or negative are ignored.
    """
    p, g = _classes(pred), _classes(gt)
    if p.shape != g.shape:
        raise GridError(f"prediction has {p.size} nodes, ground truth {g.size}")
    keep = g >= 0
    if ignore_mask is not None:
        ignore = np.asarray(ignore_mask, dtype=bool).reshape(-1)
        if ignore.shape != g.shape:
            raise GridError("ignore mask does not match the grid")
        keep &= ~ignore
    p, g = p[keep], g[keep]
    inter = np.array([np.count_nonzero((p == c) & (g == c)) for c in classes], dtype=np.int64)
    union = np.array([np.count_nonzero((p == c) | (g == c)) for c in classes], dtype=np.int64)
    return inter, union


def miou(pred, gt, classes, ignore_mask=None) -> float:
    """Micro-averaged IoU: summed intersections over summed unions.

    Returns ``NO_DATA`` (NaN) when nothing of the listed classes is present.
    """
    inter, union = confusion_counts(pred, gt, classes, ignore_mask)
    total = int(union.sum())
    if total == 0:
        return NO_DATA
    return float(inter.sum()) / total


def rmse_depth(pred: LabelMap, gt: LabelMap, validity=None) -> float:
    """RMSE over nodes valid in both maps (and in ``validity`` if given)."""
    if pred.res != gt.res or pred.channels != gt.channels:
        raise GridError(f"grids differ: {pred.res}x{pred.channels} vs {gt.res}x{gt.channels}")
    mask = pred.valid & gt.valid
    if validity is not None:
        mask &= np.asarray(validity, dtype=bool).reshape(-1)
    if not mask.any():
        return NO_DATA
    diff = pred.values[mask].astype(np.float64) - gt.values[mask].astype(np.float64)
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
