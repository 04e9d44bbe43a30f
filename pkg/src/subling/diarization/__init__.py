from subling.diarization.clustering import ClusteringError, cosine, spectral_cluster
from subling.diarization.features import EmbeddingError, LineFeatures, load_features
from subling.diarization.metrics import (
    DiarizationMetrics,
    reference_turns,
    score_diarization,
    sweep_epsilon,
    turn_accuracy,
)
from subling.diarization.speakers import (
    DEFAULT_EPSILON,
    DEFAULT_ETA,
    Assignment,
    DiarizationResult,
    Group,
    GroupDecision,
    NoVisualAnchorError,
    Operation,
    Origin,
    SpeakerEntry,
    SpeakerRegistry,
    assign_undetected,
    diarize,
    group_by_turns,
    groups_from_similarities,
    new_speaker_score,
    register_speakers,
    supplement,
    supplement_scored,
)

__all__ = [
    "Assignment", "ClusteringError", "DEFAULT_EPSILON", "DEFAULT_ETA", "DiarizationMetrics",
    "DiarizationResult", "EmbeddingError", "Group", "GroupDecision", "LineFeatures",
    "NoVisualAnchorError", "Operation", "Origin", "SpeakerEntry", "SpeakerRegistry",
    "assign_undetected", "cosine", "diarize", "group_by_turns", "groups_from_similarities",
    "load_features", "new_speaker_score", "reference_turns", "register_speakers",
    "score_diarization", "spectral_cluster", "supplement", "supplement_scored",
    "sweep_epsilon", "turn_accuracy",
]
