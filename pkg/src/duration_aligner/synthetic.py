"""Synthetic ground-truth corpora.

Every pseudo-phoneme is a sine tone at its own frequency, so the correct
frame-level segmentation of each utterance is known exactly and aligner
output can be scored against it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from duration_aligner.audio import AudioBuffer, write_wav
from duration_aligner.constants import (
    NEUTRAL_STYLE,
    SYNTHETIC_AMPLITUDE,
    SYNTHETIC_FMAX,
    SYNTHETIC_FMIN,
)
from duration_aligner.errors import ConfigurationError
from duration_aligner.features import FeatureConfig, mel_centers
from duration_aligner.manifest import Manifest, UtteranceManifestEntry, write_manifest
from duration_aligner.utils import item_rng

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def _parse_interval(name: str, value: Any) -> tuple[int, int]:
    try:
        low, high = (int(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{name} must be a [low, high] pair, got {value!r}") from e
    if low > high:
        raise ConfigurationError(f"{name} lower bound {low} exceeds upper bound {high}")
    return low, high


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    inventory_size: int
    utterance_count: int
    duration_range: tuple[int, int] = (5, 20)
    phonemes_per_utterance: tuple[int, int] = (3, 8)
    noise_level: float = 0.01
    seed: int = 0
    # noise-only frames after every non-final phoneme
    gap_frames: int = 0
    # per-phoneme duration centres with +/- spread jitter; None draws i.i.d.
    duration_spread: int | None = None
    style_count: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "duration_range", _parse_interval("duration_range", self.duration_range)
        )
        object.__setattr__(
            self,
            "phonemes_per_utterance",
            _parse_interval("phonemes_per_utterance", self.phonemes_per_utterance),
        )
        if self.inventory_size < 1:
            raise ConfigurationError(f"inventory_size must be >= 1, got {self.inventory_size}")
        if self.utterance_count < 1:
            raise ConfigurationError(
                f"utterance_count must be >= 1, got {self.utterance_count}"
            )
        if self.duration_range[0] < 1:
            raise ConfigurationError(
                f"duration_range lower bound must be >= 1 frame, got {self.duration_range[0]}"
            )
        if self.phonemes_per_utterance[0] < 1:
            raise ConfigurationError("phonemes_per_utterance lower bound must be >= 1")
        if self.noise_level < 0:
            raise ConfigurationError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.gap_frames < 0:
            raise ConfigurationError(f"gap_frames must be >= 0, got {self.gap_frames}")
        if self.duration_spread is not None and self.duration_spread < 0:
            raise ConfigurationError("duration_spread must be >= 0")
        if self.style_count < 1:
            raise ConfigurationError(f"style_count must be >= 1, got {self.style_count}")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticCorpusSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown synthetic corpus keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid synthetic corpus spec: {e}") from e


def _jsonable(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def phoneme_symbol(k: int) -> str:
    return f"p{k:02d}"


def style_symbol(k: int, style_count: int) -> str:
    return NEUTRAL_STYLE if style_count == 1 else str(k + 1)


def tone_frequencies(inventory_size: int) -> np.ndarray:
    """Log-uniformly spaced tone frequencies, one per pseudo-phoneme."""
    return np.geomspace(SYNTHETIC_FMIN, SYNTHETIC_FMAX, inventory_size)


def nearest_mel_filters(frequencies: np.ndarray, config: FeatureConfig) -> np.ndarray:
    centers = mel_centers(config)
    return np.abs(centers[None, :] - frequencies[:, None]).argmin(axis=1)


def check_distinguishable(inventory_size: int, config: FeatureConfig) -> np.ndarray:
    """Return the tone frequencies, checking each falls in its own mel filter"""
    assert config.fmax is not None
    if SYNTHETIC_FMAX > config.fmax:
        raise ConfigurationError(
            f"Synthetic tones reach {SYNTHETIC_FMAX} Hz but the mel filterbank stops at "
            f"{config.fmax} Hz"
        )
    frequencies = tone_frequencies(inventory_size)
    filters = nearest_mel_filters(frequencies, config)
    if len(set(filters.tolist())) < inventory_size:
        slots = len(set(nearest_mel_filters(tone_frequencies(config.mel_bands), config)))
        raise ConfigurationError(
            f"inventory_size {inventory_size} exceeds the number of distinguishable "
            f"frequency slots (about {slots}) for {config.mel_bands} mel bands between "
            f"{SYNTHETIC_FMIN} and {SYNTHETIC_FMAX} Hz"
        )
    return frequencies


def _duration_centers(spec: SyntheticCorpusSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    low, high = spec.duration_range
    return rng.integers(low, high + 1, size=spec.inventory_size)


def _render_utterance(
    index: int,
    spec: SyntheticCorpusSpec,
    config: FeatureConfig,
    frequencies: np.ndarray,
    centers: np.ndarray,
) -> tuple[UtteranceManifestEntry, AudioBuffer]:
    rng = item_rng(spec.seed, index)
    low, high = spec.phonemes_per_utterance
    n_phonemes = int(rng.integers(low, high + 1))

    # consecutive pseudo-phonemes always differ so every boundary is audible
    ids = [int(rng.integers(0, spec.inventory_size))]
    for _ in range(n_phonemes - 1):
        if spec.inventory_size == 1:
            ids.append(0)
            continue
        step = int(rng.integers(1, spec.inventory_size))
        ids.append((ids[-1] + step) % spec.inventory_size)

    d_low, d_high = spec.duration_range
    if spec.duration_spread is None:
        durations = rng.integers(d_low, d_high + 1, size=n_phonemes)
    else:
        c = centers[ids]
        durations = rng.integers(c - spec.duration_spread, c + spec.duration_spread + 1)
        durations = np.clip(durations, d_low, d_high)
    styles = rng.integers(0, spec.style_count, size=n_phonemes)

    hop = config.hop_length
    segments = []
    reference = []
    for position, (k, d) in enumerate(zip(ids, durations)):
        n = np.arange(int(d) * hop)
        phase = 2 * np.pi * frequencies[k] * n / config.sample_rate
        segments.append(SYNTHETIC_AMPLITUDE * np.sin(phase))
        total = int(d)
        if spec.gap_frames and position < n_phonemes - 1:
            segments.append(np.zeros(spec.gap_frames * hop))
            total += spec.gap_frames
        reference.append(total)
    samples = np.concatenate(segments)
    if spec.noise_level > 0:
        samples = samples + rng.normal(0.0, spec.noise_level, size=len(samples))
    samples = np.clip(samples, -1.0, 1.0)

    utterance_id = f"utt{index:05d}"
    entry = UtteranceManifestEntry(
        utterance_id=utterance_id,
        audio_path=f"wavs/{utterance_id}.wav",
        phonemes=tuple(phoneme_symbol(k) for k in ids),
        styles=tuple(style_symbol(int(s), spec.style_count) for s in styles),
        reference_durations=tuple(reference),
    )
    return entry, AudioBuffer(samples=samples, sample_rate=config.sample_rate)


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec,
    out_dir: str | Path,
    config: FeatureConfig | None = None,
    *,
    jobs: int = 1,
) -> Manifest:
    """Render a tone corpus with known phoneme durations.

    Args:
        spec: Corpus shape and randomness.
        out_dir: Directory receiving ``manifest.jsonl`` and ``wavs/``.
        config: Feature config fixing the sample rate, hop length and mel
            resolution the corpus must be separable under.
        jobs: Number of worker threads; output does not depend on it.

    Returns:
        The manifest written to ``out_dir/manifest.jsonl``.
    """
    config = config or FeatureConfig()
    frequencies = check_distinguishable(spec.inventory_size, config)
    centers = _duration_centers(spec)
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)

    def _one(index: int) -> UtteranceManifestEntry:
        entry, audio = _render_utterance(index, spec, config, frequencies, centers)
        write_wav(audio, out_dir / entry.audio_path)
        return entry

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        entries = list(pool.map(_one, range(spec.utterance_count)))
    manifest = Manifest(entries=tuple(entries), base_dir=out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info("Wrote %d synthetic utterances to %s", len(entries), out_dir)
    return manifest
