"""The memory: labeled samples with feature pyramids.

Learning happens only by consolidation (adding, removing or relabeling
stored samples). Samples can be compressed with cascaded novelty sparsity,
which keeps the least redundant node of every ``2**dim`` patch.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ptns
from .grid import (
    CATEGORICAL,
    ConnectivityKernel,
    FeaturePyramid,
    GridError,
    LabelMap,
    ResolutionSchedule,
    to_coords,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "transduce-store 1"


class StoreError(GridError):
    pass


class EmptyMemoryError(StoreError):
    def __init__(self):
        super().__init__("empty memory")


@dataclass(frozen=True, eq=False)
class MemorySample:
    id: str
    pyramid: FeaturePyramid
    labels: LabelMap
    provenance: str = ""

    def __post_init__(self):
        if not self.id or any(ch.isspace() for ch in self.id):
            raise StoreError(f"sample id must be non-empty without whitespace: {self.id!r}")
        if self.labels.res != self.pyramid.schedule.res(1):
            raise StoreError(
                f"label grid {self.labels.res} != level-1 grid {self.pyramid.schedule.res(1)}"
            )

    @property
    def label_validity(self) -> np.ndarray:
        return self.labels.valid

    @property
    def retained_leaves(self) -> np.ndarray:
        return self.pyramid.node_indices(1)

    def nbytes(self) -> int:
        """Serialized size of the pyramid and label files."""
        leaves = self.pyramid.sparse[0]
        return len(ptns.encode_pyramid(self.pyramid)) + len(ptns.encode_labels(self.labels, leaves))


# ---------------------------------------------------------------------------
# novelty sparsity
# ---------------------------------------------------------------------------

def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt((x * x).sum(-1, keepdims=True))
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def _novelty_scores(patches: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Mean cosine similarity of each patch member to its present siblings.

    ``patches`` is (P, A, c) and ``present`` is (P, A). Absent members score
    ``+inf``; members without siblings score 0.
    """
    u = _unit(patches) * present[..., None]
    gram = np.zeros(patches.shape[:2] + patches.shape[1:2])
    for c in range(u.shape[-1]):
        gram += u[:, :, None, c] * u[:, None, :, c]
    a = patches.shape[1]
    off = ~np.eye(a, dtype=bool)[None] & present[:, None, :]
    total = np.where(off, gram, 0.0).sum(-1)
    count = off.sum(-1)
    score = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return np.where(present, score, np.inf)


def novelty_select(patch_features) -> int:
    """Index of the most novel (least redundant) member of a patch.

    Novelty is the mean cosine similarity to the other patch members,
    minimized; ties go to the lowest index.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise StoreError("patch must be a non-empty (members, channels) array")
    scores = _novelty_scores(feats[None], np.ones((1, feats.shape[0]), dtype=bool))[0]
    return int(np.argmin(scores))


def _patch_children(schedule: ResolutionSchedule, level: int) -> np.ndarray:
    """(p^{level+1}, 2**dim) structural children at ``level``, -1 padded."""
    kernel = ConnectivityKernel(schedule.dim, "structural")
    parents = to_coords(np.arange(schedule.p(level + 1)), schedule.res(level + 1))
    return kernel.window_children(parents, schedule.res(level))


def sparsify(sample: MemorySample, n_sp: int) -> MemorySample:
    """Keep one node per level-(n_sp+1) node on every level ``1..n_sp``.

    Level ``l`` is reduced by novelty over the structural patches of its
    parents, then every finer sparse level is restricted to the chain
    descendants of the survivors. Leaf labels follow level 1; labels of
    discarded nodes are dropped.
    """
    pyr = sample.pyramid
    n = pyr.n
    if n_sp < 0 or n_sp >= n:
        raise StoreError(f"n_sp must be in [0, {n}), got {n_sp}")
    if n_sp == 0:
        return sample
    if pyr.any_sparse:
        raise StoreError(f"sample {sample.id} is already sparse")
    schedule = pyr.schedule
    chosen = {}
    for l in range(1, n_sp + 1):
        children = _patch_children(schedule, l)
        present = children >= 0
        feats = pyr.features(l)[np.where(present, children, 0)]
        pick = np.argmin(_novelty_scores(feats, present), axis=1)
        chosen[l] = children[np.arange(children.shape[0]), pick]
    keep = {n_sp: chosen[n_sp]}
    for l in range(n_sp - 1, 0, -1):
        # parent of chosen[l][v] is v, so indexing by the survivors walks the chain
        keep[l] = chosen[l][keep[l + 1]]
    levels, masks = list(pyr.levels), [None] * n
    for l, idx in keep.items():
        idx = np.sort(idx)
        levels[l - 1] = pyr.features(l)[idx]
        masks[l - 1] = idx
    leaves = masks[0]
    valid = np.zeros(pyr.schedule.p(1), dtype=bool)
    valid[leaves] = sample.labels.valid[leaves]
    values = np.where(valid[:, None], sample.labels.values, 0.0)
    labels = LabelMap(sample.labels.kind, sample.labels.res, values, valid)
    return replace(sample, pyramid=FeaturePyramid(schedule, tuple(levels), tuple(masks)), labels=labels)


# ---------------------------------------------------------------------------
# read-only view used by search
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MemoryView:
    """Immutable snapshot of a store, samples ordered by ascending id.

    ``features[l - 1]`` stacks the unit-normalized (float64) rows of every
    sample at level ``l``; ``rowmap[l - 1][j, v]`` is the row of node ``v`` of
    sample ``j`` or -1 when that node is not retained.
    """

    ids: tuple
    samples: tuple
    schedule: ResolutionSchedule
    features: tuple
    rowmap: tuple
    labels: np.ndarray  # (m, p1, C) float32
    label_valid: np.ndarray  # (m, p1) bool
    label_kind: str

    @property
    def m(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, samples) -> "MemoryView":
        samples = tuple(sorted(samples, key=lambda s: s.id))
        if not samples:
            raise EmptyMemoryError()
        schedule = samples[0].pyramid.schedule
        feats, rowmaps = [], []
        for l in range(1, schedule.n + 1):
            offset = 0
            blocks, rm = [], []
            for s in samples:
                f = s.pyramid.features(l)
                blocks.append(_unit(f))
                lookup = s.pyramid.row_lookup(l)
                rm.append(np.where(lookup >= 0, lookup + offset, -1))
                offset += f.shape[0]
            feats.append(np.concatenate(blocks, axis=0))
            rowmaps.append(np.stack(rm))
        width = max(s.labels.channels for s in samples)
        kind = samples[0].labels.kind
        labels = np.stack([_widen(s.labels, width) for s in samples])
        valid = np.stack([s.labels.valid for s in samples])
        for a in feats + rowmaps + [labels, valid]:
            a.setflags(write=False)
        return cls(tuple(s.id for s in samples), samples, schedule, tuple(feats), tuple(rowmaps), labels, valid, kind)


def _widen(labels: LabelMap, width: int) -> np.ndarray:
    if labels.channels == width:
        return labels.values
    out = np.zeros((labels.p, width), dtype=np.float32)
    out[:, : labels.channels] = labels.values
    return out


# ---------------------------------------------------------------------------
# the store
# ---------------------------------------------------------------------------

@dataclass
class StoreConfig:
    n_sp: int = 0
    extractor: dict = field(default_factory=dict)


class MemoryStore:
    """Ordered collection of memory samples (insertion order).

    One writer or many readers: mutations hold a lock and readers work on an
    immutable :class:`MemoryView` snapshot, so a search never sees a torn
    state.
    """

    def __init__(self, schedule: ResolutionSchedule | None = None, n_sp: int = 0, extractor: dict | None = None):
        self.schedule = schedule
        self.config = StoreConfig(n_sp=n_sp, extractor=dict(extractor or {}))
        self._samples: dict[str, MemorySample] = {}
        self._lock = threading.RLock()
        self._view: MemoryView | None = None
        self._counter = 0
        self.label_kind: str | None = None
        self.learning_times: list[float] = []
        self.mutations: list[tuple] = []

    @property
    def n_sp(self) -> int:
        return self.config.n_sp

    @property
    def m(self) -> int:
        return len(self._samples)

    def __len__(self) -> int:
        return len(self._samples)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._samples

    def __iter__(self):
        return iter(list(self._samples.values()))

    @property
    def ids(self) -> list:
        return list(self._samples)

    def get(self, sample_id: str) -> MemorySample:
        try:
            return self._samples[sample_id]
        except KeyError:
            raise StoreError(f"unknown sample id {sample_id!r}") from None

    def _next_id(self) -> str:
        while True:
            sid = f"s{self._counter:06d}"
            self._counter += 1
            if sid not in self._samples:
                return sid

    def consolidate_add(
        self,
        sample: MemorySample | FeaturePyramid,
        labels: LabelMap | None = None,
        sample_id: str | None = None,
        provenance: str = "",
    ) -> str:
        """Store a labeled sample (sparsified per the store config); returns its id."""
        t0 = time.perf_counter()
        with self._lock:
            if isinstance(sample, FeaturePyramid):
                if labels is None:
                    raise StoreError("labels are required when adding a bare pyramid")
                sample = MemorySample(sample_id or self._next_id(), sample, labels, provenance)
            schedule = sample.pyramid.schedule
            if self.schedule is None:
                if schedule.irregular:
                    raise StoreError("irregular schedule: complete the pyramid first")
                self.schedule = schedule
            elif schedule != self.schedule:
                raise StoreError(f"schedule {schedule.describe()} != store {self.schedule.describe()}")
            if self.label_kind is None:
                self.label_kind = sample.labels.kind
            elif sample.labels.kind != self.label_kind:
                raise StoreError(f"label kind {sample.labels.kind} != store {self.label_kind}")
            if sample.id in self._samples:
                raise StoreError(f"duplicate sample id {sample.id!r}")
            if self.n_sp and not sample.pyramid.any_sparse:
                sample = sparsify(sample, self.n_sp)
            self._samples[sample.id] = sample
            self._view = None
            self.mutations.append(("add", sample.id, int(sample.labels.valid.sum())))
        self.learning_times.append(time.perf_counter() - t0)
        return sample.id

    def consolidate_remove(self, sample_id: str) -> MemorySample:
        with self._lock:
            sample = self.get(sample_id)
            del self._samples[sample_id]
            self._view = None
            self.mutations.append(("remove", sample_id, int(sample.labels.valid.sum())))
            return sample

    def update_labels(self, sample_id: str, new_labels: LabelMap, region_mask=None) -> int:
        """Overwrite labels of ``sample_id`` inside ``region_mask``; features are untouched.

        Nodes that sparsity discarded cannot hold labels and are skipped.
        Returns the number of label nodes changed.
        """
        with self._lock:
            sample = self.get(sample_id)
            old = sample.labels
            if new_labels.res != old.res:
                raise StoreError(f"label grid {new_labels.res} != stored {old.res}")
            if new_labels.kind != old.kind:
                raise StoreError("label kind mismatch")
            mask = np.ones(old.p, dtype=bool) if region_mask is None else np.asarray(region_mask, bool).reshape(-1)
            if mask.shape[0] != old.p:
                raise StoreError("region mask does not match the label grid")
            retained = np.zeros(old.p, dtype=bool)
            retained[sample.retained_leaves] = True
            mask = mask & retained
            if not mask.any():
                return 0
            width = max(old.channels, new_labels.channels)
            values = _widen(old, width).copy()
            values[mask] = _widen(new_labels, width)[mask]
            valid = old.valid.copy()
            valid[mask] = new_labels.valid[mask]
            values[~valid] = 0.0
            labels = LabelMap(old.kind, old.res, values, valid)
            changed = int(np.count_nonzero(np.any(_widen(old, width) != values, axis=1) | (old.valid != valid)))
            self._samples[sample_id] = replace(sample, labels=labels)
            self._view = None
            self.mutations.append(("relabel", sample_id, changed))
            return changed

    def snapshot(self) -> MemoryView:
        with self._lock:
            if self._view is None:
                if not self._samples:
                    raise EmptyMemoryError()
                self._view = MemoryView.build(self._samples.values())
            return self._view

    def nbytes(self) -> int:
        return sum(s.nbytes() for s in self._samples.values())

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> Path:
        """Write the store as a manifest plus one pyramid and one label file per sample."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock:
            lines = [
                MANIFEST_HEADER,
                f"dim {self.schedule.dim if self.schedule else 0}",
                f"schedule {self.schedule.describe() if self.schedule else '-'}",
                f"n_sp {self.n_sp}",
                f"label_kind {self.label_kind or '-'}",
                "extractor " + (" ".join(f"{k}={v}" for k, v in sorted(self.config.extractor.items())) or "-"),
                f"samples {len(self._samples)}",
            ]
            for s in self._samples.values():
                pyr_name, lab_name = f"{s.id}.pyr.ptns", f"{s.id}.lab.ptns"
                ptns.write_pyramid(directory / pyr_name, s.pyramid)
                ptns.write_labels(directory / lab_name, s.labels, s.pyramid.sparse[0])
                lines.append(f"sample {s.id} {pyr_name} {lab_name} {s.provenance}".rstrip())
            tmp = directory / (MANIFEST + ".tmp")
            tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
            os.replace(tmp, directory / MANIFEST)
        return directory

    @classmethod
    def load(cls, directory) -> "MemoryStore":
        directory = Path(directory)
        text = (directory / MANIFEST).read_text(encoding="utf-8").splitlines()
        if not text or text[0] != MANIFEST_HEADER:
            raise StoreError(f"{directory / MANIFEST}: not a store manifest")
        fields = {}
        samples = []
        for line in text[1:]:
            key, _, rest = line.partition(" ")
            if key == "sample":
                parts = rest.split(" ", 3)
                samples.append((parts[0], parts[1], parts[2], parts[3] if len(parts) > 3 else ""))
            else:
                fields[key] = rest
        schedule = None if fields.get("schedule", "-") == "-" else ResolutionSchedule.parse(fields["schedule"])
        extractor = {}
        if fields.get("extractor", "-") != "-":
            extractor = dict(tok.split("=", 1) for tok in fields["extractor"].split())
        store = cls(schedule, int(fields.get("n_sp", 0)), extractor)
        kind = fields.get("label_kind", "-")
        store.label_kind = None if kind == "-" else kind
        for sid, pyr_name, lab_name, prov in samples:
            pyr = ptns.read_pyramid(directory / pyr_name)
            labels = ptns.read_labels(directory / lab_name, kind=store.label_kind)
            store._samples[sid] = MemorySample(sid, pyr, labels, prov)
        if len(store._samples) != int(fields.get("samples", len(samples))):
            raise StoreError("manifest sample count does not match its entries")
        store._counter = len(store._samples)
        return store
