from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from duration_aligner.errors import ContractError, FormatError
from duration_aligner.utils import check_matching_lengths, json_line

_REQUIRED_KEYS = ("utterance_id", "audio_path", "phonemes")
_OPTIONAL_KEYS = ("styles", "reference_durations")


@dataclass(frozen=True)
class UtteranceManifestEntry:
    utterance_id: str
    audio_path: str
    phonemes: tuple[str, ...]
    styles: tuple[str, ...] | None = None
    reference_durations: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "phonemes", tuple(str(p) for p in self.phonemes))
        if not self.phonemes:
            raise ContractError(f"Utterance {self.utterance_id!r} has no phonemes")
        if self.styles is not None:
            object.__setattr__(self, "styles", tuple(str(s) for s in self.styles))
            check_matching_lengths("styles", self.styles, "phonemes", self.phonemes)
        if self.reference_durations is not None:
            durations = tuple(int(d) for d in self.reference_durations)
            if any(d < 0 for d in durations):
                raise ContractError(
                    f"Utterance {self.utterance_id!r} has negative reference durations"
                )
            object.__setattr__(self, "reference_durations", durations)
            check_matching_lengths(
                "reference_durations", durations, "phonemes", self.phonemes
            )

    def to_dict(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "utterance_id": self.utterance_id,
            "audio_path": self.audio_path,
            "phonemes": list(self.phonemes),
        }
        if self.styles is not None:
            record["styles"] = list(self.styles)
        if self.reference_durations is not None:
            record["reference_durations"] = list(self.reference_durations)
        return record

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> UtteranceManifestEntry:
        missing = [key for key in _REQUIRED_KEYS if key not in data]
        if missing:
            raise FormatError(f"Manifest record is missing required fields {missing}")
        unknown = set(data) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
        if unknown:
            raise FormatError(f"Manifest record has unknown fields {sorted(unknown)}")
        return cls(
            utterance_id=str(data["utterance_id"]),
            audio_path=str(data["audio_path"]),
            phonemes=tuple(data["phonemes"]),
            styles=tuple(data["styles"]) if data.get("styles") is not None else None,
            reference_durations=(
                tuple(data["reference_durations"])
                if data.get("reference_durations") is not None
                else None
            ),
        )


@dataclass(frozen=True)
class Manifest:
    """An ordered collection of utterances.

    ``base_dir`` is the directory relative audio paths are resolved against;
    it is not part of the serialized form.
    """

    entries: tuple[UtteranceManifestEntry, ...]
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [entry.utterance_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            duplicates = sorted({i for i in ids if ids.count(i) > 1})
            raise ContractError(f"Duplicate utterance ids in manifest: {duplicates}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[UtteranceManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, utterance_id: str) -> UtteranceManifestEntry:
        for entry in self.entries:
            if entry.utterance_id == utterance_id:
                return entry
        raise KeyError(utterance_id)

    @property
    def utterance_ids(self) -> list[str]:
        return [entry.utterance_id for entry in self.entries]

    def resolve_audio(self, entry: UtteranceManifestEntry) -> str:
        """Absolute location of an entry's audio. URLs are returned untouched."""
        if "://" in entry.audio_path:
            return entry.audio_path
        path = Path(entry.audio_path)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return str(path)

    def subset(self, utterance_ids: Iterable[str]) -> Manifest:
        keep = set(utterance_ids)
        return Manifest(
            entries=tuple(e for e in self.entries if e.utterance_id in keep),
            base_dir=self.base_dir,
        )

    def split(self, test_count: int) -> tuple[Manifest, Manifest]:
        """Split into (train, test) keeping the last ``test_count`` entries for test."""
        if not 0 <= test_count <= len(self.entries):
            raise ContractError(
                f"Cannot hold out {test_count} of {len(self.entries)} utterances"
            )
        cut = len(self.entries) - test_count
        return (
            Manifest(entries=self.entries[:cut], base_dir=self.base_dir),
            Manifest(entries=self.entries[cut:], base_dir=self.base_dir),
        )

    def phoneme_symbols(self) -> list[str]:
        return sorted({p for entry in self.entries for p in entry.phonemes})

    def style_symbols(self) -> list[str]:
        return sorted({s for entry in self.entries for s in (entry.styles or ())})


def dumps_manifest(manifest: Manifest) -> str:
    return "".join(json_line(entry.to_dict()) + "\n" for entry in manifest.entries)


def loads_manifest(text: str, base_dir: Path | None = None) -> Manifest:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"Manifest line {lineno} is not valid JSON: {e}") from e
        if not isinstance(record, dict):
            raise FormatError(f"Manifest line {lineno} is not a JSON object")
        entries.append(UtteranceManifestEntry.from_dict(record))
    return Manifest(entries=tuple(entries), base_dir=base_dir)


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    return loads_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")
