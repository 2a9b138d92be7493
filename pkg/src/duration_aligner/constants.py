import numpy as np

# Feature file container
FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1
# magic, version, kind code, N, T, frame hop (seconds)
FEATURE_HEADER = "<4sBBIId"

FEATURE_KIND_CODES = {
    "melspec": 0,
    "mfcc": 1,
    "latent": 2,
}
FEATURE_KINDS = {code: kind for kind, code in FEATURE_KIND_CODES.items()}

# Named-tensor container used by checkpoints
TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1

# Map the sample dtypes scipy's WAV reader returns to the divisor that scales
# them into [-1, 1]. None means the samples are already floating point.
WAV_SAMPLE_SCALES = {
    np.dtype("int16"): 32768.0,
    np.dtype("float32"): None,
}
PCM16_SCALE = 32768.0

# Chao tone letters mark the style of a phoneme symbol, e.g. "a˥".
TONE_MARKS = frozenset("˥˦˧˨˩")
# Pinyin-style numbered tones, e.g. "ao3"; opt-in since plain symbols may end in digits
TONE_DIGITS = frozenset("12345")
NEUTRAL_STYLE = "_"

ALIGNMENT_METHODS = ("pda_best_path", "forced_viterbi", "external")
ALIGNMENT_POLICIES = ("pda_only", "pda_then_viterbi", "viterbi_only")

# Frequency band spanned by synthetic pseudo-phoneme tones (Hz)
SYNTHETIC_FMIN = 200.0
SYNTHETIC_FMAX = 6000.0
SYNTHETIC_AMPLITUDE = 0.5

WORKSPACE_ENV_VAR = "ALIGNER_WORKSPACE"
WORKSPACE_SUBDIRS = ("features", "checkpoints", "alignments", "reports", "runs")
