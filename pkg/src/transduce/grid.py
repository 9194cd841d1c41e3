"""Grid and pyramid data model.

Levels are numbered from 1 (finest, same resolution as the labels) to ``n``
(coarsest). Level 0 is the label ("leaf") level and a virtual root sits above
level ``n``. Every grid is linearized row-major with the last axis fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

ROOT = "root"

CATEGORICAL = "categorical"
SCALAR = "scalar"


class GridError(ValueError):
    """Raised for out-of-range levels, nodes or incompatible shapes."""


def halve(res: Sequence[int]) -> tuple[int, ...]:
    return tuple((r + 1) // 2 for r in res)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ResolutionSchedule:
    """Per-level grid resolutions; ``levels[0]`` is level 1."""

    dim: int
    levels: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")
        if not self.levels:
            raise GridError("schedule needs at least one level")
        levels = tuple(tuple(int(r) for r in res) for res in self.levels)
        for res in levels:
            if len(res) != self.dim or min(res) < 1:
                raise GridError(f"bad resolution {res} for dim={self.dim}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def halving(cls, res1: Sequence[int], n: int) -> "ResolutionSchedule":
        """Canonical schedule: each level is the ceil-half of the one below."""
        if n < 1:
            raise GridError("n must be >= 1")
        levels = [tuple(int(r) for r in res1)]
        for _ in range(n - 1):
            levels.append(halve(levels[-1]))
        return cls(len(levels[0]), tuple(levels))

    @property
    def n(self) -> int:
        return len(self.levels)

    def res(self, level: int) -> tuple[int, ...]:
        self._check_level(level)
        return self.levels[level - 1]

    def p(self, level: int) -> int:
        return math.prod(self.res(level))

    @property
    def is_canonical(self) -> bool:
        return all(
            self.levels[i + 1] == halve(self.levels[i]) for i in range(self.n - 1)
        )

    @property
    def irregular(self) -> bool:
        return not self.is_canonical

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.n:
            raise GridError(f"level {level} outside 1..{self.n}")

    def describe(self) -> str:
        return " ".join("x".join(str(r) for r in res) for res in self.levels)

    @classmethod
    def parse(cls, text: str) -> "ResolutionSchedule":
        levels = [tuple(int(r) for r in tok.split("x")) for tok in text.split()]
        return cls(len(levels[0]), tuple(levels))


@dataclass(frozen=True)
class ConnectivityKernel:
    """Parent/child connectivity between adjacent levels.

    ``mode="window"`` searches the 4-per-axis block made of a node's two
    structural children plus one overlapping node on each side (``4**dim``
    candidates, fewer at borders). ``"structural"`` restricts the search to
    the ``2**dim`` structural children and ``"full"`` to the whole child level.
    """

    dim: int = 2
    mode: str = "window"

    def __post_init__(self):
        if self.mode not in ("window", "structural", "full"):
            raise GridError(f"unknown kernel mode {self.mode!r}")
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")

    @property
    def structural_arity(self) -> int:
        return 2**self.dim

    @property
    def n_ch(self) -> int | None:
        if self.mode == "window":
            return 4**self.dim
        if self.mode == "structural":
            return 2**self.dim
        return None

    @property
    def axis_offsets(self) -> tuple[int, ...]:
        return (-1, 0, 1, 2) if self.mode == "window" else (0, 1)

    def offsets(self) -> np.ndarray:
        """All per-axis offset combinations in row-major order, shape (W, dim)."""
        ax = self.axis_offsets
        mesh = np.meshgrid(*([ax] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def window_children(self, parent_coords: np.ndarray, child_res: Sequence[int]) -> np.ndarray:
        """Linear child indices for each parent, ``-1`` where clamped away.

        ``parent_coords`` has shape (N, dim); the result has shape (N, W) and
        each row is ascending among its valid entries. Not defined for
        ``mode="full"``.
        """
        if self.mode == "full":
            raise GridError("full kernel has no local window")
        offs = self.offsets()
        coords = 2 * parent_coords[:, None, :] + offs[None, :, :]
        res = np.asarray(child_res, dtype=np.int64)
        ok = np.all((coords >= 0) & (coords < res), axis=-1)
        strides = _strides(child_res)
        lin = (np.clip(coords, 0, res - 1) * strides).sum(-1)
        return np.where(ok, lin, -1)


def _strides(res: Sequence[int]) -> np.ndarray:
    s = np.ones(len(res), dtype=np.int64)
    for a in range(len(res) - 2, -1, -1):
        s[a] = s[a + 1] * res[a + 1]
    return s


def to_linear(coords: np.ndarray, res: Sequence[int]) -> np.ndarray:
    return (np.asarray(coords, dtype=np.int64) * _strides(res)).sum(-1)


def to_coords(lin: np.ndarray, res: Sequence[int]) -> np.ndarray:
    lin = np.asarray(lin, dtype=np.int64)
    return np.stack(np.unravel_index(lin, tuple(res)), axis=-1).astype(np.int64)


def _check_node(schedule: ResolutionSchedule, level: int, node: Sequence[int]) -> tuple[int, ...]:
    res = schedule.res(level)
    node = tuple(int(c) for c in node)
    if len(node) != schedule.dim or any(not 0 <= c < r for c, r in zip(node, res)):
        raise GridError(f"node {node} outside level {level} grid {res}")
    return node


def parent_index(schedule: ResolutionSchedule, level: int, node: Sequence[int]):
    """Structural parent of ``node`` at ``level + 1``; ``ROOT`` above level n."""
    node = _check_node(schedule, level, node)
    if level == schedule.n:
        return ROOT
    return tuple(c // 2 for c in node)


def child_candidates(
    schedule: ResolutionSchedule,
    level: int,
    node,
    kernel: ConnectivityKernel | None = None,
) -> list[tuple[int, ...]]:
    """Candidate nodes at ``level - 1`` searched below ``node``.

    Level 1 nodes have exactly one child, the co-located label node. Passing
    ``ROOT`` as node returns every level-n node.
    """
    kernel = kernel or ConnectivityKernel(schedule.dim)
    if node == ROOT:
        res = schedule.res(schedule.n)
        return [tuple(int(c) for c in row) for row in to_coords(np.arange(math.prod(res)), res)]
    node = _check_node(schedule, level, node)
    if level == 1:
        return [node]
    child_res = schedule.res(level - 1)
    if kernel.mode == "full":
        lin = np.arange(math.prod(child_res))
    else:
        lin = kernel.window_children(np.asarray([node]), child_res)[0]
        lin = lin[lin >= 0]
    return [tuple(int(c) for c in row) for row in to_coords(lin, child_res)]


def structural_parents(res_child: Sequence[int], res_parent: Sequence[int]) -> np.ndarray:
    """Linear parent index (in ``res_parent``) of every child node."""
    coords = to_coords(np.arange(math.prod(res_child)), res_child) // 2
    return to_linear(coords, res_parent)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def avg_pool(grid: np.ndarray, dim: int) -> np.ndarray:
    """Average-pool ``2**dim`` patches over the first ``dim`` axes (ceil-halving).

    Border patches of odd-sized axes average only the nodes that exist.
    """
    out = np.asarray(grid, dtype=np.float64)
    for ax in range(dim):
        length = out.shape[ax]
        if length % 2:
            edge = np.take(out, [length - 1], axis=ax)
            out = np.concatenate([out, edge], axis=ax)
        even = np.take(out, np.arange(0, out.shape[ax], 2), axis=ax)
        odd = np.take(out, np.arange(1, out.shape[ax], 2), axis=ax)
        out = even + 0.5 * (odd - even)
    return out


def resize_linear(grid: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Separable linear resampling of the leading axes (half-pixel centers).

    Written as ``a + w * (b - a)`` so constant fields map to themselves exactly.
    """
    out = np.asarray(grid, dtype=np.float64)
    for ax, target in enumerate(shape):
        length = out.shape[ax]
        if length == target:
            continue
        src = (np.arange(target) + 0.5) * (length / target) - 0.5
        src = np.clip(src, 0.0, length - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, length - 1)
        w = src - i0
        wshape = [1] * out.ndim
        wshape[ax] = target
        a = np.take(out, i0, axis=ax)
        b = np.take(out, i1, axis=ax)
        out = a + w.reshape(wshape) * (b - a)
    return out


def nearest_resize(grid: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    out = np.asarray(grid)
    for ax, target in enumerate(shape):
        length = out.shape[ax]
        if length == target:
            continue
        idx = np.minimum(((np.arange(target) + 0.5) * (length / target)).astype(np.int64), length - 1)
        out = np.take(out, idx, axis=ax)
    return out


# ---------------------------------------------------------------------------
# pyramids and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Per-level node-major features.

    ``levels[l - 1]`` holds level ``l`` with shape (rows, channels). A level
    is dense when ``sparse[l - 1]`` is None (rows == p^l); otherwise
    ``sparse[l - 1]`` lists the retained node indices, one per row.
    """

    schedule: ResolutionSchedule
    levels: tuple
    sparse: tuple | None = None

    def __post_init__(self):
        if len(self.levels) != self.schedule.n:
            raise GridError(f"{len(self.levels)} feature levels for n={self.schedule.n}")
        sparse = self.sparse if self.sparse is not None else (None,) * self.schedule.n
        if len(sparse) != self.schedule.n:
            raise GridError("sparse mask length does not match level count")
        levels, masks = [], []
        for l, (feat, idx) in enumerate(zip(self.levels, sparse), start=1):
            feat = np.asarray(feat, dtype=np.float32)
            if feat.ndim != 2:
                raise GridError(f"level {l} features must be (rows, channels)")
            p = self.schedule.p(l)
            if idx is None:
                if feat.shape[0] != p:
                    raise GridError(f"level {l}: {feat.shape[0]} rows, expected {p}")
            else:
                idx = np.asarray(idx, dtype=np.int64)
                if idx.ndim != 1 or idx.shape[0] != feat.shape[0]:
                    raise GridError(f"level {l}: sparse index/row count mismatch")
                if idx.size and (idx[0] < 0 or idx[-1] >= p or np.any(np.diff(idx) <= 0)):
                    raise GridError(f"level {l}: sparse indices must be strictly increasing in [0, {p})")
                idx = _readonly(idx)
            levels.append(_readonly(feat))
            masks.append(idx)
        object.__setattr__(self, "levels", tuple(levels))
        object.__setattr__(self, "sparse", tuple(masks))

    @property
    def n(self) -> int:
        return self.schedule.n

    @property
    def dim(self) -> int:
        return self.schedule.dim

    def features(self, level: int) -> np.ndarray:
        self.schedule._check_level(level)
        return self.levels[level - 1]

    def channels(self, level: int) -> int:
        return self.features(level).shape[1]

    def is_sparse(self, level: int) -> bool:
        return self.sparse[level - 1] is not None

    @property
    def any_sparse(self) -> bool:
        return any(m is not None for m in self.sparse)

    def node_indices(self, level: int) -> np.ndarray:
        idx = self.sparse[level - 1]
        return np.arange(self.schedule.p(level)) if idx is None else idx

    def row_lookup(self, level: int) -> np.ndarray:
        """Map node index -> row, ``-1`` for nodes that are not retained."""
        p = self.schedule.p(level)
        idx = self.sparse[level - 1]
        if idx is None:
            return np.arange(p, dtype=np.int64)
        out = np.full(p, -1, dtype=np.int64)
        out[idx] = np.arange(idx.shape[0])
        return out

    def grid(self, level: int) -> np.ndarray:
        """Dense ``(res..., c)`` view of a dense level."""
        if self.is_sparse(level):
            raise GridError(f"level {level} is sparse")
        return self.features(level).reshape(*self.schedule.res(level), -1)

    @classmethod
    def from_grids(cls, grids: Sequence[np.ndarray], dim: int) -> "FeaturePyramid":
        schedule = ResolutionSchedule(dim, tuple(tuple(g.shape[:dim]) for g in grids))
        return cls(schedule, tuple(np.reshape(g, (-1, g.shape[-1])) for g in grids))

    def channel_schedule(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.levels)

    def equals(self, other: "FeaturePyramid") -> bool:
        if self.schedule != other.schedule:
            return False
        for a, b, ia, ib in zip(self.levels, other.levels, self.sparse, other.sparse):
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
            if (ia is None) != (ib is None) or (ia is not None and not np.array_equal(ia, ib)):
                return False
        return True


def complete_pyramid(
    partial: Mapping[int, np.ndarray],
    target: ResolutionSchedule,
) -> FeaturePyramid:
    """Fill the levels missing from ``partial`` to match ``target``.

    ``partial`` maps level -> dense grid of shape (res..., c). Present levels
    off the target resolution are resampled linearly. Missing levels between
    two present ones are blended linearly by level distance (after pooling the
    finer neighbour and upsampling the coarser one); levels beyond the present
    range are average-pooled (coarser) or nearest-upsampled (finer) from the
    closest present level.
    """
    if not partial:
        raise GridError("cannot complete an empty pyramid")
    if not target.is_canonical:
        raise GridError("completion target must follow the halving schedule")
    dim = target.dim
    present: dict[int, np.ndarray] = {}
    for l, g in partial.items():
        g = np.asarray(g)
        target._check_level(l)
        if g.ndim != dim + 1:
            raise GridError(f"level {l} grid must have {dim} spatial axes plus channels")
        res = target.res(l)
        if tuple(g.shape[:dim]) != res:
            g = resize_linear(g, res)
        present[l] = np.asarray(g, dtype=np.float64)
    have = sorted(present)
    out = []
    for l in range(1, target.n + 1):
        res = target.res(l)
        if l in present:
            g = present[l]
        elif l < have[0]:
            g = nearest_resize(present[have[0]], res)
        elif l > have[-1]:
            g = present[have[-1]]
            for _ in range(l - have[-1]):
                g = avg_pool(g, dim)
        else:
            lo = max(h for h in have if h < l)
            hi = min(h for h in have if h > l)
            fine = present[lo]
            for _ in range(l - lo):
                fine = avg_pool(fine, dim)
            coarse = resize_linear(present[hi], res)
            w = (l - lo) / (hi - lo)
            if fine.shape[-1] == coarse.shape[-1]:
                g = fine + w * (coarse - fine)
            else:
                g = fine if w <= 0.5 else coarse
        out.append(np.asarray(g, dtype=np.float32).reshape(-1, g.shape[-1]))
    return FeaturePyramid(target, tuple(out))


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense labels or predictions on a level-1 grid.

    ``values`` has shape (p, channels): one-hot or class probabilities for
    categorical maps, real values (e.g. depth in meters) for scalar maps.
    Rows with ``valid == False`` are ignored by retrieval and metrics.
    """

    kind: str
    res: tuple
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, SCALAR):
            raise GridError(f"unknown label kind {self.kind!r}")
        res = tuple(int(r) for r in self.res)
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 1:
            values = values[:, None]
        valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        p = math.prod(res)
        if values.shape[0] != p or valid.shape[0] != p:
            raise GridError(f"label map rows do not match grid {res}")
        object.__setattr__(self, "res", res)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "valid", _readonly(valid))

    @classmethod
    def from_classes(cls, classes, num_classes: int, valid=None, res=None) -> "LabelMap":
        classes = np.asarray(classes)
        res = tuple(res) if res is not None else classes.shape
        flat = classes.reshape(-1).astype(np.int64)
        if valid is None:
            valid = np.ones(flat.shape[0], dtype=bool)
        valid = np.asarray(valid, dtype=bool).reshape(-1) & (flat >= 0) & (flat < num_classes)
        onehot = np.zeros((flat.shape[0], num_classes), dtype=np.float32)
        rows = np.nonzero(valid)[0]
        onehot[rows, flat[rows]] = 1.0
        return cls(CATEGORICAL, res, onehot, valid)

    @classmethod
    def scalar(cls, values, valid=None, res=None) -> "LabelMap":
        values = np.asarray(values, dtype=np.float32)
        res = tuple(res) if res is not None else values.shape
        flat = values.reshape(math.prod(res), -1)
        if valid is None:
            valid = np.isfinite(flat).all(axis=1)
        flat = np.where(np.asarray(valid).reshape(-1, 1), flat, 0.0)
        return cls(SCALAR, res, flat, valid)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.channels if self.kind == CATEGORICAL else 0

    def classes(self, invalid: int = -1) -> np.ndarray:
        """Argmax class per node (first maximal channel), ``invalid`` elsewhere."""
        if self.kind != CATEGORICAL:
            raise GridError("classes() needs a categorical map")
        out = np.argmax(self.values, axis=1).astype(np.int64)
        out[~self.valid] = invalid
        return out

    def with_classes(self, num_classes: int) -> "LabelMap":
        """Categorical map widened to ``num_classes`` channels (zero padded)."""
        if self.kind != CATEGORICAL or num_classes == self.channels:
            return self
        if num_classes < self.channels:
            raise GridError("cannot shrink the label space")
        values = np.zeros((self.p, num_classes), dtype=np.float32)
        values[:, : self.channels] = self.values
        return LabelMap(self.kind, self.res, values, self.valid)

    def equals(self, other: "LabelMap") -> bool:
        return (
            self.kind == other.kind
            and self.res == other.res
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.valid, other.valid)
        )
