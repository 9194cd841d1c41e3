"""Parameter-free dense prediction by hierarchical memory search and transduction."""

from .features import SyntheticExtractorConfig, export_pyramid, import_pyramid, synth_extract
from .grid import (
    CATEGORICAL,
    ROOT,
    SCALAR,
    ConnectivityKernel,
    FeaturePyramid,
    GridError,
    LabelMap,
    ResolutionSchedule,
    complete_pyramid,
)
from .memory import EmptyMemoryError, MemorySample, MemoryStore, MemoryView, StoreError, sparsify
from .mp import MPConfig, MPReport, QueryGraph, build_query_graph, mp_run, mp_step
from .ptns import PTNSFormatError
from .search import (
    CorrespondenceMap,
    OracleSizeError,
    SearchConfig,
    SearchError,
    exhaustive_oracle,
    hierarchical_search,
    predict_raw,
    retrieve_labels,
    windowed_search,
)
from .solver import Prediction, Solver, SolverConfig

__version__ = "0.1.0"
