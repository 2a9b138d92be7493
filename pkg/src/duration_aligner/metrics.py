"""Error rates, mel cepstral distortion and boundary accuracy."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from duration_aligner.alignment import AlignmentRecord
from duration_aligner.constants import NEUTRAL_STYLE, TONE_MARKS
from duration_aligner.errors import ContractError, EvaluationError
from duration_aligner.features import FeatureMatrix
from duration_aligner.manifest import Manifest
from duration_aligner.utils import check_matching_lengths

logger = logging.getLogger(__name__)

MCD_CONSTANT = 10.0 / math.log(10.0) * math.sqrt(2.0)
BOUNDARY_TOLERANCES = (1, 2, 5)


# --- error rates ---


@dataclass(frozen=True)
class ErrorRateReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.reference_length if self.reference_length else 0.0

    def __add__(self, other: ErrorRateReport) -> ErrorRateReport:
        return ErrorRateReport(
            substitutions=self.substitutions + other.substitutions,
            insertions=self.insertions + other.insertions,
            deletions=self.deletions + other.deletions,
            reference_length=self.reference_length + other.reference_length,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "rate": self.rate,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "reference_length": self.reference_length,
        }


def edit_distance_table(reference: Sequence[Any], hypothesis: Sequence[Any]) -> np.ndarray:
    n, m = len(reference), len(hypothesis)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    table[:, 0] = np.arange(n + 1)
    table[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            table[i, j] = min(
                table[i - 1, j - 1] + cost,
                table[i, j - 1] + 1,
                table[i - 1, j] + 1,
            )
    return table


def error_rate(reference: Sequence[Any], hypothesis: Sequence[Any]) -> ErrorRateReport:
    """Unit-cost Levenshtein alignment of ``hypothesis`` against ``reference``.

    When several edit scripts are optimal the backtrace prefers a
    substitution (or match), then an insertion, then a deletion.
    """
    if len(reference) == 0:
        raise ContractError("error_rate needs a non-empty reference")
    table = edit_distance_table(reference, hypothesis)
    i, j = len(reference), len(hypothesis)
    counts = {"substitutions": 0, "insertions": 0, "deletions": 0}
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            if table[i, j] == table[i - 1, j - 1] + cost:
                counts["substitutions"] += cost
                i, j = i - 1, j - 1
                continue
        if j > 0 and table[i, j] == table[i, j - 1] + 1:
            counts["insertions"] += 1
            j -= 1
        else:
            counts["deletions"] += 1
            i -= 1
    return ErrorRateReport(reference_length=len(reference), **counts)


def split_symbol(symbol: str, marks: frozenset[str] = TONE_MARKS) -> tuple[str, str]:
    base = symbol.rstrip("".join(marks))
    if not base or base == symbol:
        return symbol, NEUTRAL_STYLE
    return base, symbol[len(base) :]


def split_streams(
    symbols: Iterable[str], marks: frozenset[str] = TONE_MARKS
) -> tuple[list[str], list[str]]:
    """Split styled symbols into parallel phoneme and style streams.

    Trailing characters from ``marks`` form the style; unmarked symbols get
    the neutral style.
    """
    pairs = [split_symbol(s, marks) for s in symbols]
    return [p for p, _ in pairs], [s for _, s in pairs]


def merge_streams(phonemes: Sequence[str], styles: Sequence[str]) -> list[str]:
    check_matching_lengths("phonemes", phonemes, "styles", styles)
    return [p if s == NEUTRAL_STYLE else p + s for p, s in zip(phonemes, styles)]


# --- mel cepstral distortion ---


def _coefficients(x: FeatureMatrix | np.ndarray) -> np.ndarray:
    values = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError(f"Cepstra must be a D x T matrix, got shape {values.shape}")
    return values


def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone path through ``cost`` from (0, 0) to the far corner.

    Steps are (1, 1), (1, 0) and (0, 1); ties prefer the diagonal.
    """
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        steps = [(i - 1, j - 1), (i - 1, j), (i, j - 1)]
        i, j = min(steps, key=lambda s: acc[s])
        path.append((i - 1, j - 1))
    return path[::-1]


def mcd(
    reference: FeatureMatrix | np.ndarray,
    hypothesis: FeatureMatrix | np.ndarray,
    use_dtw: bool = True,
) -> float:
    """Mean mel cepstral distortion in dB, excluding coefficient 0.

    Without DTW the longer sequence is truncated to the shorter one.
    """
    ref, hyp = _coefficients(reference), _coefficients(hypothesis)
    if ref.shape[0] != hyp.shape[0]:
        raise ContractError(
            f"Reference has {ref.shape[0]} coefficients, hypothesis {hyp.shape[0]}"
        )
    a, b = ref[1:].T, hyp[1:].T
    if use_dtw:
        pairs = np.array(dtw_path(cdist(a, b, metric="euclidean")))
        diff = a[pairs[:, 0]] - b[pairs[:, 1]]
    else:
        n = min(len(a), len(b))
        diff = a[:n] - b[:n]
    return float(np.mean(MCD_CONSTANT * np.sqrt(np.sum(diff * diff, axis=1))))


# --- boundaries ---


@dataclass(frozen=True)
class BoundaryReport:
    errors: dict[str, list[int]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    @property
    def all_errors(self) -> np.ndarray:
        return np.array([e for errs in self.errors.values() for e in errs], dtype=np.int64)

    @property
    def count(self) -> int:
        return int(self.all_errors.size)

    @property
    def median(self) -> float | None:
        return float(np.median(self.all_errors)) if self.count else None

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.all_errors)) if self.count else None

    def within(self, k: int) -> float | None:
        """Percentage of boundaries at most ``k`` frames from the reference."""
        return float(100.0 * np.mean(self.all_errors <= k)) if self.count else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "boundaries": self.count,
            "median": self.median,
            "mean": self.mean,
            **{f"within_{k}": self.within(k) for k in BOUNDARY_TOLERANCES},
            "excluded": list(self.excluded),
        }


def boundary_accuracy(
    predicted: Iterable[AlignmentRecord], reference: Manifest
) -> BoundaryReport:
    """Compare interior phoneme boundaries against manifest reference durations.

    Utterances whose phoneme counts disagree, or that carry no reference
    durations, are excluded with a warning.

    Raises:
        EvaluationError: A predicted utterance id is not in ``reference``.
    """
    errors: dict[str, list[int]] = {}
    excluded: list[str] = []
    for record in sorted(predicted, key=lambda r: r.utterance_id):
        try:
            entry = reference[record.utterance_id]
        except KeyError as e:
            raise EvaluationError(
                f"Alignment for {record.utterance_id!r} has no reference utterance"
            ) from e
        expected = entry.reference_durations
        if expected is None or len(expected) != len(record.durations):
            warnings.warn(
                f"Excluding {record.utterance_id!r} from boundary accuracy: "
                f"{len(record.durations)} aligned phonemes, reference has "
                f"{'none' if expected is None else len(expected)}",
                UserWarning,
                stacklevel=2,
            )
            excluded.append(record.utterance_id)
            continue
        ours = np.cumsum(record.durations.as_array())[:-1]
        theirs = np.cumsum(expected)[:-1]
        errors[record.utterance_id] = np.abs(ours - theirs).tolist()
    return BoundaryReport(errors=errors, excluded=excluded)


# --- corpus evaluation ---


def _mean_std(values: Sequence[float]) -> dict[str, float | None]:
    if not values:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


@dataclass
class EvaluationReport:
    summary: dict[str, Any]
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return self.summary


def evaluate_corpus(
    manifest: Manifest,
    *,
    hypotheses: Mapping[str, Sequence[str]] | None = None,
    alignments: Sequence[AlignmentRecord] | None = None,
    cepstra: Mapping[str, tuple[FeatureMatrix, FeatureMatrix]] | None = None,
    use_dtw: bool = True,
    marks: frozenset[str] = TONE_MARKS,
) -> EvaluationReport:
    """Aggregate every available metric over a corpus.

    Args:
        manifest: Reference utterances.
        hypotheses: Hypothesis symbol streams (phonemes with optional style
            marks) per utterance id, scored as WER, WER-P and WER-S.
        alignments: Aligner output, scored against reference durations.
        cepstra: ``(reference, hypothesis)`` MFCC pairs per utterance id.
        use_dtw: Align cepstral frames by DTW before computing MCD.
        marks: Characters treated as style marks when splitting symbols.

    Returns:
        A summary holding corpus-level rates, mean and standard deviation of
        per-utterance scores, and one row per utterance.

    Raises:
        EvaluationError: An input names an utterance that is not in ``manifest``.
    """
    known = set(manifest.utterance_ids)
    for name, ids in (
        ("hypotheses", hypotheses or {}),
        ("alignments", [r.utterance_id for r in alignments or []]),
        ("cepstra", cepstra or {}),
    ):
        unknown = sorted(set(ids) - known)
        if unknown:
            raise EvaluationError(f"{name} name utterances missing from the manifest: {unknown}")

    rows: dict[str, dict[str, Any]] = {u: {"utterance_id": u} for u in sorted(known)}
    summary: dict[str, Any] = {"utterances": len(known)}

    if hypotheses is not None:
        totals = {"wer": ErrorRateReport(), "wer_p": ErrorRateReport(), "wer_s": ErrorRateReport()}
        for u in sorted(hypotheses):
            entry = manifest[u]
            if entry.styles is not None:
                ref_p, ref_s = list(entry.phonemes), list(entry.styles)
                ref_symbols = merge_streams(ref_p, ref_s)
            else:
                ref_symbols = list(entry.phonemes)
                ref_p, ref_s = split_streams(ref_symbols, marks)
            hyp_p, hyp_s = split_streams(hypotheses[u], marks)
            for key, report in (
                ("wer", error_rate(ref_symbols, list(hypotheses[u]))),
                ("wer_p", error_rate(ref_p, hyp_p)),
                ("wer_s", error_rate(ref_s, hyp_s)),
            ):
                totals[key] = totals[key] + report
                rows[u][key] = report.rate
        for key, total in totals.items():
            per_utt = [rows[u][key] for u in hypotheses]
            summary[key] = {**total.to_dict(), **_mean_std(per_utt)}

    if cepstra is not None:
        scores = {u: mcd(ref, hyp, use_dtw=use_dtw) for u, (ref, hyp) in sorted(cepstra.items())}
        for u, score in scores.items():
            rows[u]["mcd"] = score
        summary["mcd"] = {**_mean_std(list(scores.values())), "use_dtw": use_dtw}

    if alignments is not None:
        boundary = boundary_accuracy(alignments, manifest)
        for u, errs in boundary.errors.items():
            rows[u]["boundary_mean_error"] = float(np.mean(errs)) if errs else 0.0
        summary["boundary"] = boundary.to_dict()

    logger.info("Evaluated %d utterances: %s", len(known), sorted(summary))
    return EvaluationReport(summary=summary, rows=list(rows.values()))


_ROW_COLUMNS = ("utterance_id", "wer", "wer_p", "wer_s", "mcd", "boundary_mean_error")


def write_evaluation_tsv(report: EvaluationReport, path: str | Path) -> None:
    """Per-utterance breakdown; metrics that were not computed are left empty."""
    lines = ["\t".join(_ROW_COLUMNS)]
    for row in report.rows:
        cells = []
        for column in _ROW_COLUMNS:
            value = row.get(column)
            if value is None:
                cells.append("")
            else:
                cells.append(value if isinstance(value, str) else f"{value:.6f}")
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
