"""Co-segmentation by propagating a template segmentation through an image collection."""
from .collection import CollectionGraph, load_collection
from .harness import EvalReport, evaluate, run_stage
from .propagation import PipelineResult, PropagationParams, run_pipeline

__all__ = ["CollectionGraph", "EvalReport", "PipelineResult", "PropagationParams",
           "evaluate", "load_collection", "run_pipeline", "run_stage"]
__version__ = "0.1.0"
