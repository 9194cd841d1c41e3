"""Evaluation harness: metrics, test-time augmentation, CL scenarios, timing."""

from .metrics import NO_DATA, confusion_counts, miou, rmse_depth
from .scenario import (
    RetentionReport,
    ScenarioConfig,
    ScenarioError,
    ScenarioFile,
    ScenarioSpec,
    StepData,
    load_scenario,
    make_stream,
    parse_scenario,
    run_scenario,
    step_labels,
)
from .shapes import BACKGROUND, ShapeScene, class_color, make_dataset, make_scene
from .timing import LearningTimeStats, measure_learning_time
from .tta import DEFAULT_SCALES, tta_predict
