"""
SPOL - Two-stage weakly supervised object localization on synthetic shapes
MFF-Net CAMs, Gaussian-prior pseudo labels, class-agnostic segmentation and box evaluation.
"""

__version__ = "0.1.0"

# Import main components for easy access
from .config import PipelineConfig, load_config
from .gppl import fit_weighted_gaussian, make_pseudo_label, trichotomize
from .localization import evaluate, extract_bbox
from .mffnet import MFFNet, NetConfig, compute_cam
from .pipeline import Pipeline, StageError, run_pipeline, run_stage
from .storage import create_artifact_store
from .synthdata import generate

__all__ = [
    'PipelineConfig',
    'load_config',
    'fit_weighted_gaussian',
    'make_pseudo_label',
    'trichotomize',
    'evaluate',
    'extract_bbox',
    'MFFNet',
    'NetConfig',
    'compute_cam',
    'Pipeline',
    'StageError',
    'run_pipeline',
    'run_stage',
    'create_artifact_store',
    'generate',
]
