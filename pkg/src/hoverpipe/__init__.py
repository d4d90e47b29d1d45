"""Target encoding, losses, post-processing, metrics and tiling for joint
nuclear instance and epithelial layer segmentation."""

from .hover import TargetBundle, encode_hover, make_target_bundle
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import evaluate, match_instances, panoptic_quality
from .postproc import NucleusRecord, PostprocParams, PredictionBundle, run_full_postprocess
from .synth import CorruptionParams, SceneParams, corrupt, generate_scene, perfect_bundle

__version__ = "0.1.0"

__all__ = [
    "CorruptionParams", "LossBreakdown", "LossWeights", "NucleusRecord", "PostprocParams",
    "PredictionBundle", "SceneParams", "TargetBundle", "corrupt", "encode_hover", "evaluate",
    "generate_scene", "make_target_bundle", "match_instances", "panoptic_quality",
    "perfect_bundle", "run_full_postprocess", "total_loss",
]
