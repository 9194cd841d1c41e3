"""Hierarchical top-k correspondence search over memory pyramids.

Starting from a virtual root that covers every level-n node of every memory
sample, each query node keeps the ``k`` memory nodes with the highest
accumulated similarity (the product of per-level cosine similarities along
the matched chain) and hands them to its structural children as parents for
the next finer level. The beam width shrinks as ``k <- max(1, floor(phi*k))``
on every level above 1.

Ordering is total: descending accumulated similarity, then ascending sample
id, then ascending node index. Similarities are computed channel by channel
in float64 so every query node's result is independent of how the query is
chunked or how many workers run.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import CATEGORICAL, ConnectivityKernel, FeaturePyramid, GridError, LabelMap, to_coords
from .memory import EmptyMemoryError, MemoryStore, MemoryView

INVALID_SCORE = -100.0
_EMPTY = np.iinfo(np.int64).max


class SearchError(GridError):
    pass


class OracleSizeError(SearchError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    """Search hyperparameters.

    ``k_init`` defaults to the number of memory samples. ``full_beam`` keeps
    every candidate on every level (no pruning, used for exactness checks);
    ``top_k`` then bounds how many matches per leaf end up in the map.
    ``chunk`` processes query nodes in contiguous windows of that size.
    """

    phi: float = 0.5
    k_init: int | None = None
    full_beam: bool = False
    top_k: int | None = None
    kernel_mode: str = "window"
    chunk: int | None = None
    workers: int = 1
    similarity: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.phi <= 1.0:
            raise SearchError(f"phi must be in (0, 1], got {self.phi}")
        if self.k_init is not None and self.k_init < 1:
            raise SearchError("k_init must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise SearchError("top_k must be >= 1")
        if self.chunk is not None and self.chunk < 1:
            raise SearchError("chunk must be >= 1")
        if self.similarity != "cosine":
            raise SearchError(f"unsupported similarity {self.similarity!r}")
        ConnectivityKernel(2, self.kernel_mode)


def cosine_similarity(a, b) -> float:
    """Cosine similarity; a zero-norm operand scores 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, (a @ b) / (na * nb))))


def accumulate(parent_s: float, level_s: float) -> float:
    return parent_s * level_s


def reduce_k(k: int, phi: float) -> int:
    if k < 1:
        raise SearchError("k must be >= 1")
    return max(1, int(math.floor(phi * k)))


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt((x * x).sum(-1, keepdims=True))
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


@dataclass
class BeamState:
    """Kept matches per query node at ``level``.

    ``sample`` holds memory sample ranks (position in ascending-id order),
    ``-1`` marking empty slots whose score is ``-inf``.
    """

    level: int
    sample: np.ndarray
    node: np.ndarray
    s: np.ndarray

    @property
    def k(self) -> int:
        return self.sample.shape[1]

    @classmethod
    def root(cls, m: int, n: int, k: int | None = None) -> "BeamState":
        """Initial beam above level n: one root entry per memory sample, score 1.0."""
        k = m if k is None else k
        width = max(k, m)
        sample = np.full((1, width), -1, dtype=np.int64)
        sample[0, :m] = np.arange(m)
        s = np.full((1, width), -np.inf)
        s[0, :m] = 1.0
        return cls(n + 1, sample, np.zeros((1, width), dtype=np.int64), s)


@dataclass
class CorrespondenceMap:
    """Top-k memory matches for every level-1 query node."""

    ids: tuple
    query_res: tuple
    memory_res: tuple
    sample: np.ndarray  # (Q, k) ranks into ids, -1 empty
    node: np.ndarray  # (Q, k)
    s: np.ndarray  # (Q, k) float64, -inf empty
    comparisons: int = 0
    level_k: dict = field(default_factory=dict)

    def __post_init__(self):
        # -0.0 and 0.0 arise from sign-dependent products; store one zero
        self.s = np.asarray(self.s, dtype=np.float64) + 0.0

    @property
    def k(self) -> int:
        return self.sample.shape[1]

    def matches(self, q: int) -> list:
        out = []
        for j, v, s in zip(self.sample[q], self.node[q], self.s[q]):
            if j >= 0:
                out.append((self.ids[j], int(v), float(s)))
        return out

    def idx_panel(self) -> np.ndarray:
        """Best-match linear index (sample rank * p1 + node) per leaf, -1 if none."""
        p1 = math.prod(self.memory_res)
        best = self.sample[:, 0]
        return np.where(best >= 0, best * p1 + self.node[:, 0], -1)

    def sim_panel(self) -> np.ndarray:
        return np.where(self.sample[:, 0] >= 0, self.s[:, 0], np.nan).astype(np.float32)

    def same_as(self, other: "CorrespondenceMap") -> bool:
        return (
            self.ids == other.ids
            and np.array_equal(self.sample, other.sample)
            and np.array_equal(self.node, other.node)
            and self.s.tobytes() == other.s.tobytes()
        )


# ---------------------------------------------------------------------------
# one level of search
# ---------------------------------------------------------------------------

def _chunks(total: int, chunk: int | None):
    step = total if not chunk else chunk
    return [(a, min(total, a + step)) for a in range(0, max(total, 1), max(step, 1)) if a < total]


def _expand_chunk(qf, par_sample, par_node, par_s, view, level, kernel, width):
    """Score, merge and select candidates for a block of query nodes.

    Returns (sample, node, s, comparisons) for the block with ``width`` slots.
    """
    res_l = view.schedule.res(level)
    p_l = math.prod(res_l)
    rowmap = view.rowmap[level - 1]
    mem = view.features[level - 1]
    qn, kp = par_sample.shape
    if par_node is None or kernel.mode == "full":
        cand = np.broadcast_to(np.arange(p_l), (qn, kp, p_l))
    else:
        coords = to_coords(par_node.reshape(-1), view.schedule.res(level + 1))
        cand = kernel.window_children(coords, res_l).reshape(qn, kp, -1)
    w = cand.shape[2]
    samp = np.broadcast_to(par_sample[:, :, None], cand.shape)
    ok = (samp >= 0) & (cand >= 0)
    rows = np.where(ok, rowmap[np.where(ok, samp, 0), np.where(ok, cand, 0)], -1)
    ok &= rows >= 0
    sel = mem[np.where(ok, rows, 0)]
    sim = np.zeros(cand.shape)
    for c in range(qf.shape[1]):
        sim += qf[:, None, None, c] * sel[..., c]
    np.clip(sim, -1.0, 1.0, out=sim)
    s_acc = np.where(ok, sim * par_s[:, :, None], -np.inf)
    count = int(ok.sum())

    flat_s = s_acc.reshape(qn, kp * w)
    key = np.where(ok, samp * p_l + cand, _EMPTY).reshape(qn, kp * w)
    # merge duplicate candidates from overlapping windows, keeping the best score
    order = np.lexsort((-flat_s, key), axis=1)
    key = np.take_along_axis(key, order, 1)
    flat_s = np.take_along_axis(flat_s, order, 1)
    dup = np.zeros_like(key, dtype=bool)
    dup[:, 1:] = key[:, 1:] == key[:, :-1]
    flat_s = np.where(dup, -np.inf, flat_s)
    key = np.where(dup | ~np.isfinite(flat_s), _EMPTY, key)
    order = np.lexsort((key, -flat_s), axis=1)[:, :width]
    key = np.take_along_axis(key, order, 1)
    s_out = np.take_along_axis(flat_s, order, 1)
    if key.shape[1] < width:
        pad = width - key.shape[1]
        key = np.pad(key, ((0, 0), (0, pad)), constant_values=_EMPTY)
        s_out = np.pad(s_out, ((0, 0), (0, pad)), constant_values=-np.inf)
    empty = key == _EMPTY
    sample = np.where(empty, -1, key // p_l)
    node = np.where(empty, 0, key % p_l)
    s_out = np.where(empty, -np.inf, s_out)

    # carry parents forward where every candidate was missing (pruned sparse regions)
    stuck = empty.all(axis=1) & (par_sample >= 0).any(axis=1)
    if stuck.any() and par_node is not None and kernel.mode != "full":
        pc = to_coords(par_node[stuck].reshape(-1), view.schedule.res(level + 1))
        child = np.minimum(2 * pc, np.asarray(res_l) - 1)
        cn = (child * _strides(res_l)).sum(-1).reshape(-1, kp)
        keep = min(kp, width)
        sample[stuck] = -1
        sample[stuck, :keep] = par_sample[stuck][:, :keep]
        node[stuck, :keep] = np.where(par_sample[stuck][:, :keep] >= 0, cn[:, :keep], 0)
        s_out[stuck] = -np.inf
        s_out[stuck, :keep] = par_s[stuck][:, :keep]
    return sample, node, s_out, count


def _strides(res):
    s = np.ones(len(res), dtype=np.int64)
    for a in range(len(res) - 2, -1, -1):
        s[a] = s[a + 1] * res[a + 1]
    return s


def search_level(
    beam: BeamState,
    query: FeaturePyramid,
    view: MemoryView,
    config: SearchConfig,
    k: int,
) -> tuple[BeamState, int]:
    """Advance ``beam`` (at level l+1) to level l, keeping ``k`` matches per query node.

    Query nodes at level l inherit the beam of their structural parent.
    Returns the new beam and the number of similarity evaluations.
    """
    level = beam.level - 1
    kernel = ConnectivityKernel(view.schedule.dim, config.kernel_mode)
    qf = unit_rows(query.features(level))
    q_res = query.schedule.res(level)
    if level == query.n:
        parent = np.zeros(qf.shape[0], dtype=np.int64)
    else:
        coords = to_coords(np.arange(qf.shape[0]), q_res) // 2
        parent = (coords * _strides(query.schedule.res(level + 1))).sum(-1)
    is_root = beam.level == view.schedule.n + 1

    def run(span):
        a, b = span
        par = parent[a:b]
        return _expand_chunk(
            qf[a:b],
            beam.sample[par],
            None if is_root else beam.node[par],
            beam.s[par],
            view,
            level,
            kernel,
            k,
        )

    spans = _chunks(qf.shape[0], config.chunk)
    if config.workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(sp) for sp in spans]
    sample = np.concatenate([p[0] for p in parts])
    node = np.concatenate([p[1] for p in parts])
    s = np.concatenate([p[2] for p in parts])
    return BeamState(level, sample, node, s), sum(p[3] for p in parts)


# ---------------------------------------------------------------------------
# full search
# ---------------------------------------------------------------------------

def _resolve(store) -> MemoryView:
    if isinstance(store, MemoryView):
        return store
    if isinstance(store, MemoryStore):
        return store.snapshot()
    raise SearchError(f"expected a MemoryStore or MemoryView, got {type(store).__name__}")


def check_compatible(query: FeaturePyramid, view: MemoryView) -> None:
    qs, ms = query.schedule, view.schedule
    if qs.irregular:
        raise SearchError("query schedule is irregular: complete the pyramid first")
    if query.any_sparse:
        raise SearchError("query pyramid must be dense")
    if qs.dim != ms.dim or qs.n != ms.n:
        raise SearchError(f"query (dim={qs.dim}, n={qs.n}) vs memory (dim={ms.dim}, n={ms.n})")
    for l in range(1, qs.n + 1):
        if query.channels(l) != view.features[l - 1].shape[1]:
            raise SearchError(f"level {l}: query has {query.channels(l)} channels, memory {view.features[l - 1].shape[1]}")


def beam_widths(m: int, n: int, config: SearchConfig, p_levels=None) -> dict:
    """Beam width used at every level (level -> k)."""
    widths = {}
    k = config.k_init if config.k_init is not None else m
    for level in range(n, 0, -1):
        if config.full_beam:
            widths[level] = m * p_levels[level - 1]
            continue
        if level > 1:
            k = reduce_k(k, config.phi)
        widths[level] = k
    return widths


def hierarchical_search(query: FeaturePyramid, store, config: SearchConfig | None = None) -> CorrespondenceMap:
    """Dense top-k correspondence map between ``query`` and the memory."""
    config = config or SearchConfig()
    view = _resolve(store)
    check_compatible(query, view)
    n = view.schedule.n
    p_levels = [view.schedule.p(l) for l in range(1, n + 1)]
    widths = beam_widths(view.m, n, config, p_levels)
    beam = BeamState.root(view.m, n)
    comparisons = 0
    for level in range(n, 0, -1):
        beam, count = search_level(beam, query, view, config, widths[level])
        comparisons += count
    sample, node, s = beam.sample, beam.node, beam.s
    if config.top_k is not None and config.top_k < sample.shape[1]:
        sample, node, s = sample[:, : config.top_k], node[:, : config.top_k], s[:, : config.top_k]
    return CorrespondenceMap(
        view.ids,
        query.schedule.res(1),
        view.schedule.res(1),
        sample,
        node,
        s,
        comparisons,
        widths,
    )


def windowed_search(query: FeaturePyramid, store, config: SearchConfig) -> CorrespondenceMap:
    """Chunked search; identical output to the unchunked search."""
    if not config.chunk:
        raise SearchError("windowed_search needs config.chunk")
    return hierarchical_search(query, store, config)


def comparison_bound(query_schedule, memory_schedule, m: int, config: SearchConfig) -> int:
    """Upper bound on similarity evaluations: sum over levels of p_q^l * k_{l+1} * n_ch.

    Above level n the parent is the root, whose children are the p^n nodes of
    each of the m samples.
    """
    n = memory_schedule.n
    p_levels = [memory_schedule.p(l) for l in range(1, n + 1)]
    widths = beam_widths(m, n, config, p_levels)
    kernel = ConnectivityKernel(memory_schedule.dim, config.kernel_mode)
    total = query_schedule.p(n) * m * memory_schedule.p(n)
    for level in range(n - 1, 0, -1):
        n_ch = kernel.n_ch or memory_schedule.p(level)
        total += query_schedule.p(level) * widths[level + 1] * n_ch
    return total


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------

def _parent_table(view: MemoryView, level: int, kernel: ConnectivityKernel) -> np.ndarray:
    """(p^level, P) memory parents at level+1 whose window contains each node, -1 padded."""
    sched = view.schedule
    p_child, p_par = sched.p(level), sched.p(level + 1)
    if kernel.mode == "full":
        return np.broadcast_to(np.arange(p_par), (p_child, p_par))
    children = kernel.window_children(to_coords(np.arange(p_par), sched.res(level + 1)), sched.res(level))
    pairs = [(int(v), u) for u in range(p_par) for v in children[u] if v >= 0]
    lists = [[] for _ in range(p_child)]
    for v, u in pairs:
        lists[v].append(u)
    width = max(len(x) for x in lists)
    out = np.full((p_child, width), -1, dtype=np.int64)
    for v, us in enumerate(lists):
        out[v, : len(us)] = us
    return out


def oracle_comparisons(query_schedule, memory_schedule, m: int) -> int:
    return sum(query_schedule.p(l) * m * memory_schedule.p(l) for l in range(1, memory_schedule.n + 1))


def exhaustive_oracle(
    query: FeaturePyramid,
    store,
    k: int,
    kernel_mode: str = "window",
    max_pairs: int = 50_000_000,
    chunk: int = 64,
) -> CorrespondenceMap:
    """Exact best-chain scores for every (query leaf, memory leaf) pair.

    Every memory node at level l scores ``sim * max over its kernel parents``
    of the parent's score, starting from 1.0 at the root, with no pruning.
    For ``kernel_mode="structural"`` this is the plain product of
    similarities along both ancestor chains. Cost is quadratic in the grid
    size; instances over ``max_pairs`` scored pairs are refused.
    """
    view = _resolve(store)
    check_compatible(query, view)
    sched = view.schedule
    n, m = sched.n, view.m
    kernel = ConnectivityKernel(sched.dim, kernel_mode)
    tables = {l: _parent_table(view, l, kernel) for l in range(1, n)}
    worst = max(
        query.schedule.p(l) * m * sched.p(l) * (tables[l].shape[1] if l < n else 1) for l in range(1, n + 1)
    )
    if worst > max_pairs:
        raise OracleSizeError(f"oracle would score {worst} pairs on one level (limit {max_pairs})")

    def level_sims(level, q_rows):
        # same cosine arithmetic as the search so scores agree to the bit
        qf = unit_rows(query.features(level)[q_rows])
        out = np.full((len(q_rows), m, sched.p(level)), -np.inf)
        for j, sample in enumerate(view.samples):
            mf = unit_rows(sample.pyramid.features(level))
            sims = np.zeros((len(q_rows), mf.shape[0]))
            for c in range(qf.shape[1]):
                sims += qf[:, None, c] * mf[None, :, c]
            out[:, j, sample.pyramid.node_indices(level)] = np.clip(sims, -1.0, 1.0)
        return out

    # scores[l] has shape (p_q^l, m, p_m^l)
    q_all = np.arange(query.schedule.p(n))
    score = level_sims(n, q_all)
    for level in range(n - 1, 0, -1):
        table = tables[level]
        q_res = query.schedule.res(level)
        qpar = to_linear_parent(q_res, query.schedule.res(level + 1))
        new = np.empty((query.schedule.p(level), m, sched.p(level)))
        for a in range(0, new.shape[0], chunk):
            rows = np.arange(a, min(a + chunk, new.shape[0]))
            sims = level_sims(level, rows)
            par_scores = score[qpar[rows]]  # (r, m, p^{l+1})
            gathered = np.where(table >= 0, par_scores[:, :, np.where(table >= 0, table, 0)], -np.inf)
            live = np.isfinite(gathered) & np.isfinite(sims)[..., None]
            prod = np.where(live, np.where(live, sims[..., None], 0.0) * np.where(live, gathered, 0.0), -np.inf)
            best = prod.max(-1)
            new[rows] = np.where(np.isfinite(sims), best, -np.inf)
        score = new
    flat = score.reshape(score.shape[0], -1)
    p1 = sched.p(1)
    key = np.broadcast_to(np.arange(flat.shape[1]), flat.shape)
    order = np.lexsort((key, -flat), axis=1)[:, :k]
    s = np.take_along_axis(flat, order, 1)
    empty = ~np.isfinite(s)
    sample = np.where(empty, -1, order // p1)
    node = np.where(empty, 0, order % p1)
    return CorrespondenceMap(
        view.ids,
        query.schedule.res(1),
        sched.res(1),
        sample,
        node,
        np.where(empty, -np.inf, s),
        oracle_comparisons(query.schedule, sched, m),
    )


def to_linear_parent(res_child, res_parent) -> np.ndarray:
    coords = to_coords(np.arange(math.prod(res_child)), res_child) // 2
    return (coords * _strides(res_parent)).sum(-1)


# ---------------------------------------------------------------------------
# label retrieval
# ---------------------------------------------------------------------------

def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    top = np.max(scores, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(scores - top)
    total = e.sum(axis=axis, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def retrieve_labels(cmap: CorrespondenceMap, store, invalid_policy: str = "mask") -> LabelMap:
    """Softmax-weighted sum of the labels of every leaf's matches.

    Matches whose memory label is invalid get score -100 before the softmax
    (``invalid_policy="mask"``) or are dropped (``"drop"``). Leaves whose
    matches are all invalid come out invalid.
    """
    if invalid_policy not in ("mask", "drop"):
        raise SearchError(f"unknown invalid policy {invalid_policy!r}")
    view = _resolve(store)
    if view.ids != cmap.ids:
        raise SearchError("correspondence map was computed against a different memory")
    present = cmap.sample >= 0
    j = np.where(present, cmap.sample, 0)
    v = np.where(present, cmap.node, 0)
    label_ok = present & view.label_valid[j, v]
    scores = np.where(present, cmap.s, -np.inf)
    if invalid_policy == "mask":
        scores = np.where(present & ~label_ok, INVALID_SCORE, scores)
    else:
        scores = np.where(label_ok, scores, -np.inf)
    weights = softmax(scores, axis=1)
    out = np.zeros((cmap.sample.shape[0], view.labels.shape[2]))
    for slot in range(cmap.k):
        out += weights[:, slot, None] * view.labels[j[:, slot], v[:, slot]]
    valid = label_ok.any(axis=1)
    out[~valid] = 0.0
    return LabelMap(view.label_kind, cmap.query_res, out.astype(np.float32), valid)


def predict_raw(query: FeaturePyramid, store, config: SearchConfig | None = None, invalid_policy: str = "mask"):
    """Search then retrieve; returns (raw prediction, correspondence map)."""
    view = _resolve(store)
    cmap = hierarchical_search(query, view, config)
    return retrieve_labels(cmap, view, invalid_policy), cmap


__all__ = [
    "BeamState",
    "CorrespondenceMap",
    "EmptyMemoryError",
    "INVALID_SCORE",
    "OracleSizeError",
    "SearchConfig",
    "SearchError",
    "accumulate",
    "comparison_bound",
    "cosine_similarity",
    "exhaustive_oracle",
    "hierarchical_search",
    "predict_raw",
    "reduce_k",
    "retrieve_labels",
    "search_level",
    "softmax",
    "windowed_search",
]
