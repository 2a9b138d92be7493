from importlib.metadata import version as _version

from .acoustic import AsrModel, TrainConfig, asr_forward, train_asr
from .alignment import AlignmentRecord, align_corpus, read_alignments, write_alignments
from .config import PipelineConfig, load_config
from .ctc import (
    DurationSequence,
    PdaMismatch,
    TargetSequence,
    ctc_loss,
    forced_viterbi,
    greedy_decode,
    pda,
)
from .duration import DurationModel, DurationTrainConfig, predict_durations, train_duration_model
from .features import FeatureConfig, FeatureExtractor, FeatureMatrix
from .inventory import LikelihoodMatrix, PhonemeInventory
from .manifest import Manifest, UtteranceManifestEntry, read_manifest, write_manifest
from .metrics import boundary_accuracy, error_rate, evaluate_corpus, mcd

__all__ = [
    "AlignmentRecord",
    "AsrModel",
    "DurationModel",
    "DurationSequence",
    "DurationTrainConfig",
    "FeatureConfig",
    "FeatureExtractor",
    "FeatureMatrix",
    "LikelihoodMatrix",
    "Manifest",
    "PdaMismatch",
    "PhonemeInventory",
    "PipelineConfig",
    "TargetSequence",
    "TrainConfig",
    "UtteranceManifestEntry",
    "align_corpus",
    "asr_forward",
    "boundary_accuracy",
    "ctc_loss",
    "error_rate",
    "evaluate_corpus",
    "forced_viterbi",
    "greedy_decode",
    "load_config",
    "mcd",
    "pda",
    "predict_durations",
    "read_alignments",
    "read_manifest",
    "train_asr",
    "train_duration_model",
    "write_alignments",
    "write_manifest",
]

try:
    __version__ = _version("duration_aligner")
except Exception:
    # Local copy or not installed with setuptools.
    __version__ = "9999"
