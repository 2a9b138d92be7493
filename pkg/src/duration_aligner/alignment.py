"""Corpus alignment: acoustic model output to per-phoneme durations.

Alignment files are UTF-8 JSON-lines, one record per utterance, sorted by
utterance id::

    {"utterance_id": "utt00000", "method": "pda_best_path",
     "frame_hop_seconds": 0.0106666, "phonemes": ["p03", "p01"], "durations": [12, 9]}
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from duration_aligner.acoustic import AsrModel, asr_forward
from duration_aligner.constants import ALIGNMENT_METHODS, ALIGNMENT_POLICIES
from duration_aligner.ctc import (
    DurationSequence,
    PdaMismatch,
    TargetSequence,
    forced_viterbi,
    pda,
)
from duration_aligner.errors import (
    AlignerError,
    AlignmentError,
    ConfigurationError,
    ContractError,
    FormatError,
)
from duration_aligner.features import FeatureExtractor, FeatureMatrix
from duration_aligner.inventory import LikelihoodMatrix
from duration_aligner.manifest import Manifest, UtteranceManifestEntry
from duration_aligner.utils import check_matching_lengths, json_line

logger = logging.getLogger(__name__)

AlignmentMethod = Literal["pda_best_path", "forced_viterbi", "external"]
AlignmentPolicy = Literal["pda_only", "pda_then_viterbi", "viterbi_only"]


@dataclass(frozen=True)
class AlignmentRecord:
    utterance_id: str
    phonemes: tuple[str, ...]
    durations: DurationSequence
    frame_hop_seconds: float
    method: AlignmentMethod
    styles: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "phonemes", tuple(self.phonemes))
        if not isinstance(self.durations, DurationSequence):
            object.__setattr__(self, "durations", DurationSequence(tuple(self.durations)))
        check_matching_lengths("durations", self.durations, "phonemes", self.phonemes)
        if self.styles is not None:
            object.__setattr__(self, "styles", tuple(self.styles))
            check_matching_lengths("styles", self.styles, "phonemes", self.phonemes)
        if self.method not in ALIGNMENT_METHODS:
            raise ContractError(
                f"Unknown alignment method {self.method!r}; expected one of {ALIGNMENT_METHODS}"
            )
        if self.frame_hop_seconds <= 0:
            raise ContractError("frame_hop_seconds must be positive")

    @property
    def total_frames(self) -> int:
        assert self.durations.total_frames is not None
        return self.durations.total_frames

    def spans(self) -> list[tuple[str, int, int, int]]:
        """``(phoneme, start_frame, end_frame, duration)`` rows; ``end_frame`` is exclusive."""
        ends = np.cumsum(self.durations.as_array())
        starts = ends - self.durations.as_array()
        return [
            (p, int(s), int(e), int(e - s)) for p, s, e in zip(self.phonemes, starts, ends)
        ]

    def to_dict(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "utterance_id": self.utterance_id,
            "method": self.method,
            "frame_hop_seconds": self.frame_hop_seconds,
            "phonemes": list(self.phonemes),
            "durations": list(self.durations.durations),
        }
        if self.styles is not None:
            record["styles"] = list(self.styles)
        return record

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AlignmentRecord:
        try:
            return cls(
                utterance_id=str(data["utterance_id"]),
                phonemes=tuple(data["phonemes"]),
                durations=DurationSequence(tuple(data["durations"])),
                frame_hop_seconds=float(data["frame_hop_seconds"]),
                method=data["method"],
                styles=tuple(data["styles"]) if data.get("styles") is not None else None,
            )
        except KeyError as e:
            raise FormatError(f"Alignment record is missing field {e.args[0]!r}") from e
        except ContractError as e:
            raise FormatError(f"Invalid alignment record: {e}") from e


def align_utterance(
    C: LikelihoodMatrix, target: TargetSequence, policy: AlignmentPolicy
) -> tuple[DurationSequence | None, AlignmentMethod | None, PdaMismatch | None]:
    """Apply one alignment policy to a likelihood matrix.

    Returns:
        The durations and the method that produced them, or ``(None, None,
        mismatch)`` when ``pda_only`` hits a mismatch. The mismatch report is
        returned whenever the best path disagreed with the target.
    """
    if policy == "viterbi_only":
        return forced_viterbi(C, target), "forced_viterbi", None
    result = pda(C, target)
    if isinstance(result, DurationSequence):
        return result, "pda_best_path", None
    if policy == "pda_only":
        return None, None, result
    return forced_viterbi(C, target), "forced_viterbi", result


@dataclass(frozen=True)
class AlignmentSummary:
    """Corpus alignment counts and the duration error against reference durations.

    Duration errors are measured over the span the reference durations cover;
    frames past it, such as the trailing centred frame, are dropped from the
    final phoneme first.
    """

    utterances: int
    aligned: int
    failed: int
    pda_mismatches: int
    mismatch_rate: float
    methods: dict[str, int]
    mean_abs_duration_error: float | None
    within_two_frames: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "utterances": self.utterances,
            "aligned": self.aligned,
            "failed": self.failed,
            "pda_mismatches": self.pda_mismatches,
            "mismatch_rate": self.mismatch_rate,
            "methods": dict(sorted(self.methods.items())),
            "mean_abs_duration_error": self.mean_abs_duration_error,
            "within_two_frames": self.within_two_frames,
        }


@dataclass(frozen=True)
class AlignmentResult:
    records: list[AlignmentRecord]
    failures: dict[str, str] = field(default_factory=dict)
    mismatches: dict[str, PdaMismatch] = field(default_factory=dict)
    summary: AlignmentSummary | None = None


def summarize_alignments(
    records: Sequence[AlignmentRecord],
    manifest: Manifest,
    failures: Mapping[str, str],
    mismatches: Mapping[str, PdaMismatch],
    policy: AlignmentPolicy,
) -> AlignmentSummary:
    methods: dict[str, int] = {}
    for record in records:
        methods[record.method] = methods.get(record.method, 0) + 1
    attempted_pda = 0 if policy == "viterbi_only" else len(records) + len(
        [u for u in failures if u in mismatches]
    )
    errors = []
    close = []
    for record in records:
        reference = manifest[record.utterance_id].reference_durations
        if reference is None:
            continue
        aligned = record.durations.as_array()
        expected = np.asarray(reference, dtype=np.int64)
        excess = int(aligned.sum() - expected.sum())
        if excess > 0:
            aligned[-1] = max(0, aligned[-1] - excess)
        diff = np.abs(aligned - expected)
        errors.extend(diff.tolist())
        close.extend((diff <= 2).tolist())
    return AlignmentSummary(
        utterances=len(manifest),
        aligned=len(records),
        failed=len(failures),
        pda_mismatches=len(mismatches),
        mismatch_rate=len(mismatches) / attempted_pda if attempted_pda else 0.0,
        methods=methods,
        mean_abs_duration_error=float(np.mean(errors)) if errors else None,
        within_two_frames=float(np.mean(close)) if close else None,
    )


class _Outcome(NamedTuple):
    record: AlignmentRecord | None = None
    failure: str | None = None
    mismatch: PdaMismatch | None = None


def align_corpus(
    model: AsrModel,
    manifest: Manifest,
    policy: AlignmentPolicy = "pda_then_viterbi",
    *,
    features: Mapping[str, FeatureMatrix] | None = None,
    jobs: int = 1,
    progress: bool = False,
) -> AlignmentResult:
    """Align every utterance in ``manifest`` with ``model``.

    Per-utterance failures (unreadable audio, too few frames, a PDA mismatch
    under ``pda_only``) are collected and the rest of the corpus continues.

    Args:
        model: Trained acoustic model.
        manifest: Utterances to align; phonemes must be in the model inventory.
        policy: ``pda_only``, ``pda_then_viterbi`` or ``viterbi_only``.
        features: Precomputed features by utterance id. When omitted they
            are extracted with the model's recorded feature settings.
        jobs: Worker threads; record order does not depend on it.
        progress: Show a progress bar.

    Raises:
        AlignmentError: No utterance could be aligned.
    """
    if policy not in ALIGNMENT_POLICIES:
        raise ConfigurationError(
            f"Unknown alignment policy {policy!r}; expected one of {ALIGNMENT_POLICIES}"
        )
    unknown = [p for p in manifest.phoneme_symbols() if p not in model.inventory.symbols]
    if unknown:
        raise ContractError(f"Manifest phonemes {unknown} are not in the model inventory")
    extractor = None
    if features is None:
        kind = model.feature_kind
        extractor = FeatureExtractor(kind, model.feature_config)  # type: ignore[arg-type]

    def _one(entry: UtteranceManifestEntry) -> _Outcome:
        try:
            if features is not None:
                if entry.utterance_id not in features:
                    return _Outcome(failure=f"no features for utterance {entry.utterance_id!r}")
                matrix = features[entry.utterance_id]
            else:
                assert extractor is not None
                matrix = extractor.extract(manifest, entry)
            C = asr_forward(model, matrix)
            target = TargetSequence(
                ids=tuple(model.inventory.encode(entry.phonemes)),
                blank_id=model.inventory.blank_id,
            )
            durations, method, mismatch = align_utterance(C, target, policy)
        except (AlignerError, OSError) as e:
            return _Outcome(failure=f"{type(e).__name__}: {e}")
        if durations is None or method is None:
            assert mismatch is not None
            return _Outcome(
                failure=(
                    f"PDA mismatch at phoneme {mismatch.divergence_index}: best path "
                    f"spells {model.inventory.decode(mismatch.collapsed)}"
                ),
                mismatch=mismatch,
            )
        record = AlignmentRecord(
            utterance_id=entry.utterance_id,
            phonemes=entry.phonemes,
            durations=durations,
            frame_hop_seconds=matrix.frame_hop_seconds,
            method=method,
            styles=entry.styles,
        )
        return _Outcome(record=record, mismatch=mismatch)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(
            tqdm(
                pool.map(_one, manifest.entries),
                total=len(manifest),
                desc=f"align ({policy})",
                disable=not progress,
            )
        )

    records: list[AlignmentRecord] = []
    failures: dict[str, str] = {}
    mismatches: dict[str, PdaMismatch] = {}
    for entry, outcome in zip(manifest.entries, outcomes):
        if outcome.mismatch is not None:
            mismatches[entry.utterance_id] = outcome.mismatch
        if outcome.record is not None:
            records.append(outcome.record)
        else:
            assert outcome.failure is not None
            failures[entry.utterance_id] = outcome.failure
            logger.warning("Could not align %s: %s", entry.utterance_id, outcome.failure)

    if not records:
        raise AlignmentError(
            f"None of the {len(manifest)} utterances could be aligned "
            f"({len(failures)} failures)"
        )
    records.sort(key=lambda r: r.utterance_id)
    summary = summarize_alignments(records, manifest, failures, mismatches, policy)
    logger.info(
        "Aligned %d/%d utterances (%d PDA mismatches, %d failures)",
        summary.aligned,
        summary.utterances,
        summary.pda_mismatches,
        summary.failed,
    )
    return AlignmentResult(
        records=records, failures=failures, mismatches=mismatches, summary=summary
    )


def alignments_from_manifest(
    manifest: Manifest, frame_hop_seconds: float
) -> list[AlignmentRecord]:
    """Wrap manifest reference durations as ``external`` alignment records."""
    records = []
    for entry in manifest:
        if entry.reference_durations is None:
            logger.warning("Utterance %s has no reference durations", entry.utterance_id)
            continue
        records.append(
            AlignmentRecord(
                utterance_id=entry.utterance_id,
                phonemes=entry.phonemes,
                durations=DurationSequence(entry.reference_durations),
                frame_hop_seconds=frame_hop_seconds,
                method="external",
                styles=entry.styles,
            )
        )
    return sorted(records, key=lambda r: r.utterance_id)


# --- files ---


def dumps_alignments(records: Iterable[AlignmentRecord]) -> str:
    ordered = sorted(records, key=lambda r: r.utterance_id)
    return "".join(json_line(r.to_dict()) + "\n" for r in ordered)


def write_alignments(records: Iterable[AlignmentRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_alignments(records), encoding="utf-8")


def read_alignments(path: str | Path) -> list[AlignmentRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: not valid JSON ({e})") from e
        records.append(AlignmentRecord.from_dict(data))
    return records


def write_alignment_tsv(records: Iterable[AlignmentRecord], path: str | Path) -> None:
    """One row per phoneme: id, phoneme, start_frame, end_frame (exclusive), duration."""
    lines = ["utterance_id\tphoneme\tstart_frame\tend_frame\tduration"]
    for record in sorted(records, key=lambda r: r.utterance_id):
        for phoneme, start, end, duration in record.spans():
            lines.append(f"{record.utterance_id}\t{phoneme}\t{start}\t{end}\t{duration}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def duration_comparison(
    rows: Mapping[str, AlignmentRecord | Sequence[int]], phonemes: Sequence[str]
) -> list[list[str]]:
    """Side-by-side durations of one utterance, one row per method, one column per phoneme.

    Durations are shown as recorded, so aligned rows count the trailing centred
    frame in the final phoneme and sum to one more than external reference rows.
    """
    table = [["method", *phonemes]]
    for method, row in rows.items():
        durations = list(row.durations) if isinstance(row, AlignmentRecord) else list(row)
        check_matching_lengths(f"{method} durations", durations, "phonemes", phonemes)
        table.append([method, *(str(int(d)) for d in durations)])
    return table


def write_duration_comparison(
    rows: Mapping[str, AlignmentRecord | Sequence[int]],
    phonemes: Sequence[str],
    path: str | Path,
) -> None:
    lines = ["\t".join(row) for row in duration_comparison(rows, phonemes)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
