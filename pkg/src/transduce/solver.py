"""End-to-end prediction: extract, search memory, retrieve labels, refine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import SyntheticExtractorConfig, synth_extract
from .grid import FeaturePyramid, LabelMap
from .memory import EmptyMemoryError, MemoryStore
from .mp import MPConfig, MPReport, build_query_graph, mp_run
from .search import CorrespondenceMap, SearchConfig, predict_raw


@dataclass(frozen=True)
class SolverConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    mp: MPConfig = field(default_factory=MPConfig)
    use_mp: bool = True
    invalid_policy: str = "mask"


@dataclass
class Prediction:
    labels: LabelMap
    raw: LabelMap
    cmap: CorrespondenceMap
    mp_report: MPReport | None = None


class Solver:
    """Parameter-free predictor over a memory store.

    Inputs may be dense grids (run through ``extractor``) or ready pyramids.
    """

    def __init__(self, store: MemoryStore, extractor: SyntheticExtractorConfig | None = None, config: SolverConfig | None = None):
        self.store = store
        self.extractor = extractor or SyntheticExtractorConfig()
        self.config = config or SolverConfig()

    def features(self, query) -> FeaturePyramid:
        if isinstance(query, FeaturePyramid):
            return query
        return synth_extract(np.asarray(query), self.extractor)

    def predict(self, query) -> Prediction:
        if self.store.m == 0:
            raise EmptyMemoryError()
        pyr = self.features(query)
        raw, cmap = predict_raw(pyr, self.store, self.config.search, self.config.invalid_policy)
        if not self.config.use_mp:
            return Prediction(raw, raw, cmap)
        kappa = min(self.config.mp.kappa, pyr.schedule.p(1))
        graph = build_query_graph(pyr, kappa, self.config.search)
        refined, report = mp_run(raw, graph, self.config.mp)
        return Prediction(refined, raw, cmap, report)

    def __call__(self, query) -> LabelMap:
        return self.predict(query).labels
