"""Parameter-free message passing over the query's own nearest-neighbour graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import CATEGORICAL, FeaturePyramid, GridError, LabelMap
from .memory import MemorySample, MemoryView
from .search import SearchConfig, hierarchical_search, softmax


@dataclass(frozen=True)
class MPConfig:
    lam: float = 1.0
    kappa: int = 16
    max_steps: int = 32
    tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise GridError(f"lambda must be in (0, 1], got {self.lam}")
        if self.kappa < 1 or self.max_steps < 1:
            raise GridError("kappa and max_steps must be >= 1")


@dataclass
class QueryGraph:
    """Top-kappa neighbours of every level-1 query node (self included).

    ``weights`` are the softmax of the accumulated similarities, so every row
    sums to one; missing neighbours have index -1 and weight 0.
    """

    neighbors: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    kappa: int


@dataclass
class MPReport:
    steps: int = 0
    converged: bool = False
    deltas: list = field(default_factory=list)


def edge_weights(scores: np.ndarray) -> np.ndarray:
    return softmax(scores, axis=-1)


def build_query_graph(query: FeaturePyramid, kappa: int, config: SearchConfig | None = None) -> QueryGraph:
    """Search the query against itself and keep each node's top-kappa matches.

    The beam is held at ``kappa`` on every level; kernel and chunking come
    from ``config``.
    """
    p1 = query.schedule.p(1)
    if not 1 <= kappa <= p1:
        raise GridError(f"kappa must be in [1, {p1}], got {kappa}")
    base = config or SearchConfig()
    cfg = SearchConfig(phi=1.0, k_init=kappa, kernel_mode=base.kernel_mode, chunk=base.chunk, workers=base.workers)
    dummy = LabelMap.scalar(np.zeros(p1), res=query.schedule.res(1))
    view = MemoryView.build([MemorySample("query", query, dummy)])
    cmap = hierarchical_search(query, view, cfg)
    present = cmap.sample >= 0
    neighbors = np.where(present, cmap.node, -1)
    scores = np.where(present, cmap.s, -np.inf)
    return QueryGraph(neighbors, edge_weights(scores), scores, kappa)


def mp_step(y: np.ndarray, graph: QueryGraph, lam: float, valid: np.ndarray | None = None) -> np.ndarray:
    """One synchronous update: y_i <- (1 - lam) y_i + lam * sum_j e_ij y_j.

    Messages from invalid nodes carry zero weight (the rest renormalized); a
    node without any valid neighbour keeps its state. The aggregated message
    is accumulated as offsets from y_i so constant fields stay exact, and the
    result is clamped to the range of the values it averaged.
    """
    y = np.asarray(y, dtype=np.float64)
    nbr = graph.neighbors
    w = np.where(nbr >= 0, graph.weights, 0.0)
    idx = np.where(nbr >= 0, nbr, 0)
    if valid is not None:
        w = w * valid[idx]
    total = w.sum(axis=1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    lo, hi = y.copy(), y.copy()
    msg = np.zeros_like(y)
    for j in range(nbr.shape[1]):
        yj = y[idx[:, j]]
        msg += w[:, j, None] * (yj - y)
        used = w[:, j, None] > 0
        lo = np.where(used, np.minimum(lo, yj), lo)
        hi = np.where(used, np.maximum(hi, yj), hi)
    y_hat = y + msg
    out = y_hat if lam == 1.0 else y + lam * (y_hat - y)
    return np.clip(out, lo, hi)


def mp_run(y_raw: LabelMap, graph: QueryGraph, config: MPConfig | None = None) -> tuple[LabelMap, MPReport]:
    """Iterate :func:`mp_step` until the mean per-node L2 change drops below ``tol``."""
    config = config or MPConfig()
    if graph.neighbors.shape[0] != y_raw.p:
        raise GridError("graph and state grids differ")
    y = y_raw.values.astype(np.float64)
    valid = y_raw.valid
    report = MPReport()
    for step in range(1, config.max_steps + 1):
        nxt = mp_step(y, graph, config.lam, valid)
        delta = float(np.sqrt(((nxt - y) ** 2).sum(axis=1)).mean())
        y = nxt
        report.steps = step
        report.deltas.append(delta)
        if delta < config.tol:
            report.converged = True
            break
    if y_raw.kind == CATEGORICAL:
        total = y.sum(axis=1, keepdims=True)
        y = np.divide(y, total, out=np.zeros_like(y), where=total > 0)
    y[~valid] = 0.0
    return LabelMap(y_raw.kind, y_raw.res, y.astype(np.float32), valid), report
