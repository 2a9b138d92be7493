"""Full-corpus runs of the alignment pipeline. Enable with ``pytest --run-slow``."""

from dataclasses import replace

import numpy as np
import pytest

from duration_aligner.acoustic import TrainConfig, train_asr
from duration_aligner.alignment import align_corpus
from duration_aligner.duration import (
    DurationTrainConfig,
    length_regulate,
    predict_durations,
    train_duration_model,
)
from duration_aligner.features import FeatureConfig, FeatureExtractor, extract_corpus
from duration_aligner.inventory import PhonemeInventory
from duration_aligner.metrics import boundary_accuracy
from duration_aligner.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus

from .conftest import SMALL_FEATURES, slow

TEST_COUNT = 50

CORPUS = SyntheticCorpusSpec(
    inventory_size=5,
    utterance_count=250,
    duration_range=(5, 20),
    phonemes_per_utterance=(3, 8),
    noise_level=0.01,
    duration_spread=2,
    seed=11,
)

ASR = TrainConfig(
    batch_size=8,
    epochs=30,
    peak_learning_rate=5e-3,
    warmup_steps=50,
    hidden_dim=32,
    seed=0,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_synthetic_corpus(
        CORPUS, tmp_path_factory.mktemp("e2e") / "corpus", SMALL_FEATURES, jobs=4
    )


def _run_alignment(corpus, kind, feature_config: FeatureConfig = SMALL_FEATURES):
    features, failures = extract_corpus(
        corpus, FeatureExtractor(kind, feature_config), jobs=4
    )
    assert not failures
    train, test = corpus.split(TEST_COUNT)
    trained = train_asr(
        train,
        {u: features[u] for u in train.utterance_ids},
        PhonemeInventory.from_manifest(corpus),
        ASR,
        feature_config=feature_config,
    )
    aligned = align_corpus(
        trained.model,
        test,
        "pda_then_viterbi",
        features={u: features[u] for u in test.utterance_ids},
        jobs=4,
    )
    return trained, aligned, boundary_accuracy(aligned.records, test)


@pytest.fixture(scope="module")
def melspec_run(corpus):
    return _run_alignment(corpus, "melspec")


@slow
def test_alignment_boundaries(melspec_run):
    trained, aligned, boundary = melspec_run
    assert trained.loss_curve[-1] < trained.loss_curve[0]
    assert not aligned.failures
    assert len(aligned.records) == TEST_COUNT
    assert aligned.summary.mismatch_rate <= 0.10
    assert boundary.excluded == []
    assert boundary.within(2) >= 90.0


@slow
def test_mfcc_close_to_melspec(corpus, melspec_run, record_property):
    _, _, melspec_boundary = melspec_run
    # a full-width DCT keeps the input dimension equal to the mel run
    equal_width = replace(SMALL_FEATURES, mfcc_coeffs=SMALL_FEATURES.mel_bands)
    _, _, mfcc_boundary = _run_alignment(corpus, "mfcc", equal_width)
    melspec_score, mfcc_score = melspec_boundary.within(2), mfcc_boundary.within(2)
    record_property("melspec_within_2", melspec_score)
    record_property("mfcc_within_2", mfcc_score)
    record_property("melspec_at_least_mfcc", melspec_score >= mfcc_score)
    assert abs(mfcc_score - melspec_score) <= 15.0


@slow
def test_duration_model_on_aligned_durations(corpus, melspec_run):
    _, aligned, _ = melspec_run
    config = DurationTrainConfig(embedding_dim=16, hidden_dim=32, epochs=100, seed=0)
    result = train_duration_model(aligned.records, corpus, config)
    assert result.report.holdout_utterances
    assert result.report.mean_abs_frame_error <= 3.0

    for record in aligned.records[:10]:
        predicted = predict_durations(result.model, record.phonemes, record.styles)
        assert min(predicted.durations) >= 1
        expanded = length_regulate(np.eye(len(predicted)), predicted.durations)
        assert expanded.numpy().shape[0] == predicted.total_frames
