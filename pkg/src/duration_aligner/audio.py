from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import obstore as obs
from obspec_utils.registry import ObjectStoreRegistry
from obstore.store import LocalStore
from scipy.io import wavfile

from duration_aligner.constants import PCM16_SCALE, WAV_SAMPLE_SCALES
from duration_aligner.errors import ContractError, FormatError, UnsupportedCodecError


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """A mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ContractError(
                f"AudioBuffer samples must be one-dimensional, got shape {samples.shape}"
            )
        if int(self.sample_rate) <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def _default_registry() -> ObjectStoreRegistry:
    return ObjectStoreRegistry({"file://": LocalStore()})


def _fetch_bytes(url: str, registry: ObjectStoreRegistry | None) -> bytes:
    registry = registry or _default_registry()
    store, path_in_store = registry.resolve(url)
    return bytes(obs.get(store, path_in_store).bytes())


def read_wav(
    path: str | Path, registry: ObjectStoreRegistry | None = None
) -> AudioBuffer:
    """Read a PCM16 or float32 RIFF/WAVE file into a mono AudioBuffer.

    Args:
        path: Local file path, or a URL (``file://``, ``s3://``, ...) resolved
            through ``registry``.
        registry: Object store registry for URL paths. Defaults to a registry
            that only knows local files.

    Returns:
        The waveform, downmixed to mono by averaging channels and scaled to [-1, 1].

    Raises:
        FormatError: If the file is not a well-formed WAV file.
        UnsupportedCodecError: If the samples are not 16-bit PCM or 32-bit float.
    """
    source: str | Path | io.BytesIO = path
    if isinstance(path, str) and "://" in path:
        source = io.BytesIO(_fetch_bytes(path, registry))
    try:
        with warnings.catch_warnings():
            # scipy warns about chunks it skips (e.g. LIST metadata)
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            sample_rate, data = wavfile.read(source)
    except ValueError as e:
        message = str(e)
        if "Unknown wave file format" in message or "Unsupported bit depth" in message:
            raise UnsupportedCodecError(
                f"Unsupported WAV encoding in {path}: {message}"
            ) from e
        raise FormatError(f"Malformed WAV file {path}: {message}") from e
    except (EOFError, struct.error) as e:
        raise FormatError(f"Malformed WAV file {path}: truncated data ({e})") from e

    if data.dtype not in WAV_SAMPLE_SCALES:
        raise UnsupportedCodecError(
            f"WAV file {path} has {data.dtype} samples; only 16-bit PCM and 32-bit "
            "float are supported."
        )
    samples = data.astype(np.float64)
    if data.ndim == 2:
        samples = samples.mean(axis=1)
    scale = WAV_SAMPLE_SCALES[data.dtype]
    if scale is not None:
        samples = samples / scale
    samples = np.clip(samples, -1.0, 1.0)
    return AudioBuffer(samples=samples, sample_rate=sample_rate)


def write_wav(buffer: AudioBuffer, path: str | Path) -> None:
    """Write a buffer as a 16-bit PCM mono WAV file."""
    if len(buffer) == 0:
        raise ContractError("Cannot write an empty AudioBuffer")
    peak = float(np.max(np.abs(buffer.samples)))
    if peak > 1.0:
        raise ContractError(f"Samples must lie within [-1, 1], found magnitude {peak}")
    pcm = np.clip(np.round(buffer.samples * PCM16_SCALE), -32768, 32767)
    wavfile.write(path, buffer.sample_rate, pcm.astype("<i2"))
