from pathlib import Path

import numpy as np
import pytest

from duration_aligner.features import FeatureConfig
from duration_aligner.manifest import Manifest, UtteranceManifestEntry
from duration_aligner.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus

slow = pytest.mark.slow

# Small STFT so synthetic audio stays short; tones up to 6 kHz remain below Nyquist.
SMALL_FEATURES = FeatureConfig(
    sample_rate=16000, fft_size=512, hop_length=128, mel_bands=40, mfcc_coeffs=13
)


# Pytest configuration
def pytest_addoption(parser):
    """Add command-line flags for pytest."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        help="runs the end-to-end acceptance tests (several minutes)",
    )


def pytest_runtest_setup(item):
    """Skip slow tests unless explicitly enabled."""
    if "slow" in item.keywords and not item.config.getoption("--run-slow"):
        pytest.skip("set --run-slow to run the end-to-end acceptance tests")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_config() -> FeatureConfig:
    return SMALL_FEATURES


@pytest.fixture
def tiny_corpus(tmp_path: Path) -> Manifest:
    """Six short tone utterances over a three-phoneme inventory."""
    spec = SyntheticCorpusSpec(
        inventory_size=3,
        utterance_count=6,
        duration_range=(4, 7),
        phonemes_per_utterance=(2, 3),
        noise_level=0.005,
        seed=3,
    )
    return generate_synthetic_corpus(spec, tmp_path / "corpus", SMALL_FEATURES)


def make_manifest(*rows: tuple[str, list[str], list[int] | None]) -> Manifest:
    """Audio-less manifest from (utterance_id, phonemes, reference_durations) rows."""
    return Manifest(
        entries=tuple(
            UtteranceManifestEntry(
                utterance_id=utterance_id,
                audio_path=f"wavs/{utterance_id}.wav",
                phonemes=tuple(phonemes),
                reference_durations=None if durations is None else tuple(durations),
            )
            for utterance_id, phonemes, durations in rows
        )
    )


def one_hot_log_probs(labels: list[int], n_classes: int, floor: float = 1e-6) -> np.ndarray:
    """Column-normalized log-probabilities peaking at ``labels``."""
    probs = np.full((n_classes, len(labels)), floor)
    probs[labels, np.arange(len(labels))] = 1.0
    probs /= probs.sum(axis=0, keepdims=True)
    return np.log(probs)
