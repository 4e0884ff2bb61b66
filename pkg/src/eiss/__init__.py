"""Classifier-guided blacken/crop region search for single-object localization."""

from .classifier import (
    Classifier,
    OracleClassifier,
    OracleParams,
    ResponseVector,
    load_pretrained,
    oracle_response,
)
from .engine import (
    EissConfig,
    EissResult,
    IterationRecord,
    TopKReference,
    initial_reference,
    run_eiss,
    run_iteration,
    sample_regions,
    score_proposal,
    should_stop,
)
from .geometry import Region, bounding_union, iou, propose_grid
from .imaging import SyntheticSpec, blacken, crop_rescale, generate_synthetic

__version__ = "0.1.0"
