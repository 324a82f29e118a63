"""Episodic test-time adaptation with fair context calibration.

The engine decouples adaptation into exploration (entropy-filtered majority
voting over augmented views) and calibration (adapting text-context
parameters so candidate classes respond equally to their shared visual
evidence), with occlusion-based evidence maps bridging the two.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, ViewSet, generate_views
from .calibrate import CalibConfig, CalibTrace, PairSet, calibrate_context
from .encoders import (ClassVocabulary, ContextParams, EncoderConfig,
                       init_context, similarity)
from .evidence import EvidenceConfig, estimate_evidence
from .explore import CandidateSet, ExploreConfig, explore_topk
from .numerics import (AdamWState, RngStream, adamw_step, entropy,
                       js_divergence, l2_normalize, softmax)
from .pipeline import (EpisodeConfig, EpisodeReport, PredictionOutcome,
                       evaluate_dataset, run_episode)

__all__ = [
    "AdamWState", "AugmentConfig", "CalibConfig", "CalibTrace",
    "CandidateSet", "ClassVocabulary", "ContextParams", "EncoderConfig",
    "EpisodeConfig", "EpisodeReport", "EvidenceConfig", "ExploreConfig",
    "PairSet", "PredictionOutcome", "RngStream", "ViewSet", "adamw_step",
    "calibrate_context", "entropy", "estimate_evidence", "evaluate_dataset",
    "explore_topk", "generate_views", "init_context", "js_divergence",
    "l2_normalize", "run_episode", "similarity", "softmax",
]
