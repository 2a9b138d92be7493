import numpy as np
import pytest

from duration_aligner.audio import read_wav
from duration_aligner.errors import ConfigurationError
from duration_aligner.features import melspec
from duration_aligner.manifest import read_manifest
from duration_aligner.synthetic import (
    MANIFEST_NAME,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
    nearest_mel_filters,
    tone_frequencies,
)

from .conftest import SMALL_FEATURES


def _tree_bytes(directory):
    return {
        str(p.relative_to(directory)): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


def test_generation_is_deterministic(tmp_path):
    spec = SyntheticCorpusSpec(inventory_size=4, utterance_count=5, seed=7)
    generate_synthetic_corpus(spec, tmp_path / "a", SMALL_FEATURES, jobs=1)
    generate_synthetic_corpus(spec, tmp_path / "b", SMALL_FEATURES, jobs=4)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_seed_changes_output(tmp_path):
    spec = SyntheticCorpusSpec(inventory_size=4, utterance_count=2, seed=1)
    generate_synthetic_corpus(spec, tmp_path / "a", SMALL_FEATURES)
    spec = SyntheticCorpusSpec(inventory_size=4, utterance_count=2, seed=2)
    generate_synthetic_corpus(spec, tmp_path / "b", SMALL_FEATURES)
    assert _tree_bytes(tmp_path / "a") != _tree_bytes(tmp_path / "b")


def test_single_utterance(tmp_path):
    spec = SyntheticCorpusSpec(
        inventory_size=3, utterance_count=1, phonemes_per_utterance=(2, 2), seed=0
    )
    manifest = generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)
    assert len(manifest) == 1
    (entry,) = manifest
    assert len(entry.phonemes) == 2
    assert len(entry.reference_durations) == 2
    audio = read_wav(manifest.resolve_audio(entry))
    assert sum(entry.reference_durations) * SMALL_FEATURES.hop_length == len(audio)
    assert read_manifest(tmp_path / MANIFEST_NAME) == manifest


def test_durations_cover_samples(tiny_corpus):
    for entry in tiny_corpus:
        audio = read_wav(tiny_corpus.resolve_audio(entry))
        assert sum(entry.reference_durations) * SMALL_FEATURES.hop_length == len(audio)
        assert all(4 <= d <= 7 for d in entry.reference_durations)
        assert 2 <= len(entry.phonemes) <= 3
        assert all(a != b for a, b in zip(entry.phonemes, entry.phonemes[1:]))
        assert entry.styles == ("_",) * len(entry.phonemes)


def test_segments_peak_in_nearest_filter(tmp_path):
    spec = SyntheticCorpusSpec(
        inventory_size=3,
        utterance_count=3,
        duration_range=(6, 9),
        phonemes_per_utterance=(3, 4),
        noise_level=0.005,
        seed=11,
    )
    manifest = generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)
    expected = nearest_mel_filters(tone_frequencies(3), SMALL_FEATURES)
    for entry in manifest:
        audio = read_wav(manifest.resolve_audio(entry))
        labels = melspec(audio, SMALL_FEATURES).values.argmax(axis=0)
        ends = np.cumsum(entry.reference_durations)
        starts = ends - np.asarray(entry.reference_durations)
        for symbol, start, end in zip(entry.phonemes, starts, ends):
            k = int(symbol[1:])
            # frames whose analysis window lies inside the segment
            interior = labels[start + 2 : end - 1]
            assert len(interior) > 0
            assert np.all(interior == expected[k])


def test_gap_frames_extend_references(tmp_path):
    spec = SyntheticCorpusSpec(
        inventory_size=3,
        utterance_count=2,
        duration_range=(5, 5),
        phonemes_per_utterance=(3, 3),
        gap_frames=2,
    )
    manifest = generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)
    for entry in manifest:
        assert entry.reference_durations == (7, 7, 5)


def test_style_count(tmp_path):
    spec = SyntheticCorpusSpec(inventory_size=3, utterance_count=4, style_count=3, seed=5)
    manifest = generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)
    assert set(manifest.style_symbols()) <= {"1", "2", "3"}


def test_duration_spread_stays_in_range(tmp_path):
    spec = SyntheticCorpusSpec(
        inventory_size=4, utterance_count=6, duration_range=(5, 12), duration_spread=1
    )
    manifest = generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)
    for entry in manifest:
        assert all(5 <= d <= 12 for d in entry.reference_durations)


@pytest.mark.parametrize(
    "kwargs,match",
    [
        ({"duration_range": (0, 5)}, "duration_range"),
        ({"duration_range": (6, 5)}, "exceeds"),
        ({"inventory_size": 0}, "inventory_size"),
        ({"noise_level": -1.0}, "noise_level"),
        ({"style_count": 0}, "style_count"),
    ],
)
def test_invalid_spec(kwargs, match):
    params = {"inventory_size": 3, "utterance_count": 2, **kwargs}
    with pytest.raises(ConfigurationError, match=match):
        SyntheticCorpusSpec(**params)


def test_inventory_exceeding_mel_resolution(tmp_path):
    spec = SyntheticCorpusSpec(inventory_size=60, utterance_count=1)
    with pytest.raises(ConfigurationError, match="distinguishable"):
        generate_synthetic_corpus(spec, tmp_path, SMALL_FEATURES)


def test_spec_from_dict():
    spec = SyntheticCorpusSpec.from_dict(
        {"inventory_size": 5, "utterance_count": 10, "duration_range": [3, 4]}
    )
    assert spec.duration_range == (3, 4)
    assert SyntheticCorpusSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError, match="Unknown"):
        SyntheticCorpusSpec.from_dict({"inventory_size": 5, "utterance_count": 1, "colour": 1})
