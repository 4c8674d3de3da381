"""Speech intelligibility classification toolkit.

Learnable Gabor/PCEN frontend + CNN trained from raw audio, shallow heads
over precomputed embeddings, and the utterance/speaker evaluation protocol.
"""

from .audio import AudioClip, load_wav, resample, write_wav
from .embeddings import EmbeddingRecord, read_embeddings, write_embeddings
from .frontend import (
    FeatureMap,
    GaborFrontendParams,
    gabor_backward,
    gabor_forward,
    init_gabor_mel,
    logmel_forward,
)
from .labels import IntelligibilityClass, softmax
from .metrics import (
    EvalReport,
    accuracy,
    binarize_mildplus,
    binarized_accuracy,
    build_report,
    intelligibility_percent,
    macro_f1,
    ovr_auc,
    pearson,
    speaker_aggregate,
)

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "EmbeddingRecord",
    "EvalReport",
    "FeatureMap",
    "GaborFrontendParams",
    "IntelligibilityClass",
    "accuracy",
    "binarize_mildplus",
    "binarized_accuracy",
    "build_report",
    "gabor_backward",
    "gabor_forward",
    "init_gabor_mel",
    "intelligibility_percent",
    "load_wav",
    "logmel_forward",
    "macro_f1",
    "ovr_auc",
    "pearson",
    "read_embeddings",
    "resample",
    "softmax",
    "speaker_aggregate",
    "write_embeddings",
    "write_wav",
]
