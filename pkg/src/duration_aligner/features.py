from __future__ import annotations

import functools
import logging
import numbers
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import get_window
from tqdm import tqdm

from duration_aligner.audio import AudioBuffer, read_wav
from duration_aligner.constants import (
    FEATURE_HEADER,
    FEATURE_KIND_CODES,
    FEATURE_KINDS,
    FEATURE_MAGIC,
    FEATURE_VERSION,
)
from duration_aligner.errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    ShapeError,
)
from duration_aligner.manifest import Manifest, UtteranceManifestEntry

logger = logging.getLogger(__name__)

FeatureKind = Literal["melspec", "mfcc", "latent"]


@dataclass(frozen=True)
class FeatureConfig:
    """STFT, mel and cepstral settings shared by every feature path.

    ``fmax`` defaults to the Nyquist frequency. Durations everywhere in the
    package are counted in frames of ``hop_length`` samples.
    """

    sample_rate: int = 48000
    fft_size: int = 2048
    hop_length: int = 512
    window: Literal["hann"] = "hann"
    mel_bands: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    mfcc_coeffs: int = 20
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.fmax is None and isinstance(self.sample_rate, numbers.Real):
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        self.validate()

    def validate(self) -> None:
        for name in ("sample_rate", "fft_size", "hop_length", "mel_bands", "mfcc_coeffs"):
            value = getattr(self, name)
            if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        for name in ("fmin", "fmax", "log_floor"):
            value = getattr(self, name)
            if not isinstance(value, numbers.Real) or isinstance(value, bool):
                raise ConfigurationError(f"{name} must be a number, got {value!r}")
        if self.window != "hann":
            raise ConfigurationError(f"Only the 'hann' window is supported, got {self.window!r}")
        if self.hop_length > self.fft_size:
            raise ConfigurationError(
                f"hop_length ({self.hop_length}) must not exceed fft_size ({self.fft_size})"
            )
        assert self.fmax is not None
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigurationError(
                f"Expected 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, "
                f"fmax={self.fmax}, sample_rate={self.sample_rate}"
            )
        if self.mfcc_coeffs > self.mel_bands:
            raise ConfigurationError(
                f"mfcc_coeffs ({self.mfcc_coeffs}) must not exceed mel_bands ({self.mel_bands})"
            )
        if self.log_floor <= 0:
            raise ConfigurationError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def frame_hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FeatureConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown feature config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """An N x T acoustic feature matrix; columns are frames."""

    values: np.ndarray
    kind: FeatureKind
    frame_hop_seconds: float
    source_id: str = ""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(
                f"Feature values must be a non-empty N x T matrix, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError(f"Feature matrix {self.source_id!r} has non-finite values")
        if self.kind not in FEATURE_KIND_CODES:
            raise ContractError(f"Unknown feature kind {self.kind!r}")
        if self.frame_hop_seconds <= 0:
            raise ContractError("frame_hop_seconds must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_dims(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def retag(self, kind: FeatureKind) -> FeatureMatrix:
        return FeatureMatrix(
            values=self.values,
            kind=kind,
            frame_hop_seconds=self.frame_hop_seconds,
            source_id=self.source_id,
        )


def hz_to_mel(f: float | np.ndarray) -> float | np.ndarray:
    """HTK mel scale: ``2595 * log10(1 + f / 700)``."""
    arr = np.asarray(f, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractError(f"Frequencies must be non-negative, got {f}")
    mel = 2595.0 * np.log10(1.0 + arr / 700.0)
    return float(mel) if mel.ndim == 0 else mel


def mel_to_hz(m: float | np.ndarray) -> float | np.ndarray:
    hz = 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)
    return float(hz) if hz.ndim == 0 else hz


def mel_band_edges(config: FeatureConfig) -> np.ndarray:
    """The ``mel_bands + 2`` mel-spaced edge frequencies in Hz."""
    assert config.fmax is not None
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bands + 2)
    return np.asarray(mel_to_hz(mels))


def mel_centers(config: FeatureConfig) -> np.ndarray:
    return mel_band_edges(config)[1:-1]


@functools.lru_cache(maxsize=16)
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular mel filterbank of shape (mel_bands, fft_size/2 + 1).

    Each filter is scaled so its largest weight is 1. The returned array is
    read-only and shared between callers.
    """
    n_bins = config.fft_size // 2 + 1
    freqs = np.arange(n_bins) * config.sample_rate / config.fft_size
    edges = mel_band_edges(config)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1)
    empty = peaks == 0
    if np.any(empty):
        warnings.warn(
            f"{int(empty.sum())} mel filters contain no FFT bins; increase fft_size "
            "or reduce mel_bands.",
            stacklevel=2,
        )
    weights[~empty] /= peaks[~empty, None]
    weights.setflags(write=False)
    return weights


def stft_power(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """Power spectrogram of shape (fft_size/2 + 1, T), T = len // hop + 1.

    The signal is reflect-padded by fft_size/2 on both ends so frame t is
    centred on sample ``t * hop_length``.
    """
    if len(audio) == 0:
        raise ContractError("Cannot compute features of an empty AudioBuffer")
    pad = config.fft_size // 2
    padded = np.pad(audio.samples, pad, mode="reflect")
    frames = sliding_window_view(padded, config.fft_size)[:: config.hop_length]
    window = get_window(config.window, config.fft_size, fftbins=True)
    spectrum = np.fft.rfft(frames * window, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def melspec(audio: AudioBuffer, config: FeatureConfig, source_id: str = "") -> FeatureMatrix:
    power = stft_power(audio, config)
    mel_power = mel_filterbank(config) @ power
    return FeatureMatrix(
        values=np.log(np.maximum(mel_power, config.log_floor)),
        kind="melspec",
        frame_hop_seconds=config.frame_hop_seconds,
        source_id=source_id,
    )


def mfcc(audio: AudioBuffer, config: FeatureConfig, source_id: str = "") -> FeatureMatrix:
    log_mel = melspec(audio, config, source_id=source_id).values
    coeffs = dct(log_mel, type=2, norm="ortho", axis=0)[: config.mfcc_coeffs]
    return FeatureMatrix(
        values=coeffs,
        kind="mfcc",
        frame_hop_seconds=config.frame_hop_seconds,
        source_id=source_id,
    )


class FeatureExtractor:
    def __init__(
        self, kind: FeatureKind = "melspec", config: FeatureConfig | None = None
    ) -> None:
        """Configure a waveform-to-feature encoder.

        Args:
            kind: "melspec" or "mfcc". Latent features are produced by an
                external encoder and can only be loaded from feature files.
            config: STFT/mel settings. Defaults to ``FeatureConfig()``.
        """
        if kind == "latent":
            raise ConfigurationError(
                "Latent features are load-only; use load_latent_features() on "
                "feature files produced by an external encoder."
            )
        if kind not in ("melspec", "mfcc"):
            raise ConfigurationError(f"Unknown feature kind {kind!r}")
        self.kind = kind
        self.config = config or FeatureConfig()

    def __call__(self, audio: AudioBuffer, source_id: str = "") -> FeatureMatrix:
        if audio.sample_rate != self.config.sample_rate:
            raise ConfigurationError(
                f"Audio {source_id!r} has sample rate {audio.sample_rate} Hz but the "
                f"feature config expects {self.config.sample_rate} Hz"
            )
        if self.kind == "melspec":
            return melspec(audio, self.config, source_id=source_id)
        return mfcc(audio, self.config, source_id=source_id)

    def extract(self, manifest: Manifest, entry: UtteranceManifestEntry) -> FeatureMatrix:
        audio = read_wav(manifest.resolve_audio(entry))
        return self(audio, source_id=entry.utterance_id)


def extract_corpus(
    manifest: Manifest,
    extractor: FeatureExtractor,
    *,
    jobs: int = 1,
    progress: bool = False,
) -> tuple[dict[str, FeatureMatrix], dict[str, str]]:
    """Extract features for every utterance.

    Returns:
        features: Feature matrices keyed by utterance id, in manifest order.
        failures: Error messages keyed by utterance id for utterances whose
            audio could not be read.
    """

    def _one(entry: UtteranceManifestEntry) -> FeatureMatrix | str:
        try:
            return extractor.extract(manifest, entry)
        except (OSError, FormatError) as e:
            return f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(
            tqdm(
                pool.map(_one, manifest.entries),
                total=len(manifest),
                desc=f"{extractor.kind} features",
                disable=not progress,
            )
        )
    features: dict[str, FeatureMatrix] = {}
    failures: dict[str, str] = {}
    for entry, result in zip(manifest.entries, results):
        if isinstance(result, str):
            failures[entry.utterance_id] = result
        else:
            features[entry.utterance_id] = result
    logger.info(
        "Extracted %d %s feature matrices (%d failures)",
        len(features),
        extractor.kind,
        len(failures),
    )
    return features, failures


# --- feature files ---


def save_features(features: FeatureMatrix, path: str | Path) -> None:
    """Write the binary feature file: header then frame-major float32 values."""
    header = struct.pack(
        FEATURE_HEADER,
        FEATURE_MAGIC,
        FEATURE_VERSION,
        FEATURE_KIND_CODES[features.kind],
        features.n_dims,
        features.n_frames,
        features.frame_hop_seconds,
    )
    payload = np.ascontiguousarray(features.values.T, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_features(path: str | Path, source_id: str | None = None) -> FeatureMatrix:
    path = Path(path)
    data = path.read_bytes()
    header_size = struct.calcsize(FEATURE_HEADER)
    if len(data) < header_size:
        raise FormatError(f"Feature file {path} is shorter than its header")
    magic, version, kind_code, n_dims, n_frames, hop = struct.unpack_from(
        FEATURE_HEADER, data
    )
    if magic != FEATURE_MAGIC:
        raise FormatError(f"Feature file {path} has bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"Feature file {path} has unsupported version {version}")
    if kind_code not in FEATURE_KINDS:
        raise FormatError(f"Feature file {path} has unknown kind code {kind_code}")
    payload = data[header_size:]
    expected = n_dims * n_frames * 4
    if len(payload) != expected:
        raise FormatError(
            f"Feature file {path} declares N={n_dims}, T={n_frames} "
            f"({expected} payload bytes) but carries {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_dims).T
    return FeatureMatrix(
        values=values,
        kind=FEATURE_KINDS[kind_code],
        frame_hop_seconds=hop,
        source_id=path.stem if source_id is None else source_id,
    )


def load_latent_features(path: str | Path, source_id: str | None = None) -> FeatureMatrix:
    """Load an externally encoded feature file as a latent feature matrix."""
    return load_features(path, source_id=source_id).retag("latent")


def feature_path(directory: str | Path, utterance_id: str) -> Path:
    return Path(directory) / f"{utterance_id}.feat"


def load_corpus(
    manifest: Manifest, directory: str | Path, *, latent: bool = False
) -> dict[str, FeatureMatrix]:
    """Load ``<utterance_id>.feat`` for every manifest entry."""
    loader = load_latent_features if latent else load_features
    features = {}
    for entry in manifest:
        path = feature_path(directory, entry.utterance_id)
        if not path.exists():
            raise FormatError(f"No feature file for utterance {entry.utterance_id!r} at {path}")
        features[entry.utterance_id] = loader(path, source_id=entry.utterance_id)
    return features


# --- normalization ---


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    """Per-dimension mean and standard deviation over a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_features(
        cls, features: Iterable[FeatureMatrix], min_std: float = 1e-5
    ) -> NormalizationStats:
        stacked = np.concatenate([f.values for f in features], axis=1)
        return cls(mean=stacked.mean(axis=1), std=np.maximum(stacked.std(axis=1), min_std))

    @classmethod
    def identity(cls, n_dims: int) -> NormalizationStats:
        return cls(mean=np.zeros(n_dims), std=np.ones(n_dims))

    def apply(self, values: np.ndarray) -> np.ndarray:
        if values.shape[0] != len(self.mean):
            raise ShapeError(
                f"Features have {values.shape[0]} dims but normalization stats "
                f"have {len(self.mean)}"
            )
        return (values - self.mean[:, None]) / self.std[:, None]

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NormalizationStats:
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
        )
