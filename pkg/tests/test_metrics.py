import itertools
import math

import numpy as np
import pytest

from duration_aligner.alignment import AlignmentRecord
from duration_aligner.constants import TONE_DIGITS
from duration_aligner.ctc import DurationSequence
from duration_aligner.errors import ContractError, EvaluationError
from duration_aligner.features import FeatureMatrix
from duration_aligner.metrics import (
    MCD_CONSTANT,
    boundary_accuracy,
    dtw_path,
    error_rate,
    evaluate_corpus,
    mcd,
    merge_streams,
    split_streams,
    split_symbol,
    write_evaluation_tsv,
)

from .conftest import make_manifest


def _levenshtein(a, b):
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        current = [i]
        for j, y in enumerate(b, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (x != y)))
        previous = current
    return previous[-1]


def _record(utterance_id, durations, phonemes=None):
    return AlignmentRecord(
        utterance_id=utterance_id,
        phonemes=phonemes or tuple(f"p{i}" for i in range(len(durations))),
        durations=DurationSequence(durations),
        frame_hop_seconds=0.01,
        method="forced_viterbi",
    )


# --- error_rate tests ---


def test_single_substitution():
    report = error_rate(["a", "b", "c"], ["a", "x", "c"])
    assert report.substitutions == 1
    assert report.rate == pytest.approx(1 / 3)


def test_empty_hypothesis():
    report = error_rate(["a"], [])
    assert report.deletions == 1
    assert report.rate == 1.0


def test_rate_may_exceed_one():
    report = error_rate(["a"], ["b", "c", "d"])
    assert report.errors == 3
    assert report.rate == 3.0


def test_tie_prefers_substitution():
    report = error_rate(["a", "b"], ["b", "a"])
    assert (report.substitutions, report.insertions, report.deletions) == (2, 0, 0)


def test_empty_reference():
    with pytest.raises(ContractError):
        error_rate([], ["a"])


def test_error_rate_matches_exhaustive_oracle():
    symbols = "abc"
    references = [s for n in range(1, 6) for s in itertools.product(symbols, repeat=n)]
    hypotheses = [s for n in range(0, 5) for s in itertools.product(symbols, repeat=n)]
    for reference in references:
        for hypothesis in hypotheses:
            report = error_rate(reference, hypothesis)
            assert report.errors == _levenshtein(reference, hypothesis)
            assert len(hypothesis) == len(reference) - report.deletions + report.insertions


def test_swapping_sequences_exchanges_insertions_and_deletions():
    rng = np.random.default_rng(30)
    for _ in range(300):
        reference = rng.choice(list("abcd"), size=int(rng.integers(1, 9))).tolist()
        hypothesis = rng.choice(list("abcd"), size=int(rng.integers(1, 9))).tolist()
        forward = error_rate(reference, hypothesis)
        backward = error_rate(hypothesis, reference)
        assert forward.errors == backward.errors
        assert forward.insertions == backward.deletions
        assert forward.deletions == backward.insertions


# --- stream tests ---


def test_split_streams():
    assert split_streams(["a˥", "b˨"]) == (["a", "b"], ["˥", "˨"])


@pytest.mark.parametrize(
    "symbol,expected",
    [("a", ("a", "_")), ("a˧˥", ("a", "˧˥")), ("˥", ("˥", "_")), ("ao3", ("ao3", "_"))],
    ids=["plain", "contour", "bare-mark", "digits-not-marks"],
)
def test_split_symbol(symbol, expected):
    assert split_symbol(symbol) == expected


def test_split_symbol_with_digit_tones():
    assert split_symbol("ao3", TONE_DIGITS) == ("ao", "3")


def test_merge_streams():
    assert merge_streams(["a", "b"], ["˥", "_"]) == ["a˥", "b"]
    with pytest.raises(ContractError):
        merge_streams(["a"], [])


# --- mcd tests ---


def test_mcd_single_coefficient():
    reference = np.array([[5.0, 5.0], [0.0, 0.0]])
    hypothesis = np.array([[-3.0, 2.0], [1.0, 1.0]])
    assert MCD_CONSTANT == pytest.approx(6.1419, abs=1e-4)
    assert mcd(reference, hypothesis) == pytest.approx(10 / math.log(10) * math.sqrt(2), abs=1e-9)
    assert mcd(reference, hypothesis, use_dtw=False) == pytest.approx(MCD_CONSTANT, abs=1e-9)


def test_mcd_dtw_absorbs_duplicated_frame(rng):
    reference = rng.normal(size=(4, 6))
    hypothesis = np.concatenate([reference[:, :3], reference[:, 2:]], axis=1)
    assert mcd(reference, hypothesis) == pytest.approx(0.0, abs=1e-12)
    assert mcd(reference, hypothesis, use_dtw=False) > 0


def test_mcd_accepts_feature_matrices(rng):
    values = rng.normal(size=(3, 5))
    a = FeatureMatrix(values, "mfcc", 0.01)
    assert mcd(a, a) == 0.0


def test_mcd_coefficient_mismatch():
    with pytest.raises(ContractError):
        mcd(np.zeros((3, 2)), np.zeros((4, 2)))


def test_mcd_dtw_never_exceeds_frame_by_frame(rng):
    for _ in range(50):
        n_frames = int(rng.integers(1, 10))
        reference = rng.normal(size=(5, n_frames))
        hypothesis = rng.normal(size=(5, n_frames))
        assert mcd(reference, hypothesis) <= mcd(reference, hypothesis, use_dtw=False) + 1e-9


@pytest.mark.parametrize("use_dtw", [True, False], ids=["dtw", "truncate"])
def test_mcd_ignores_energy_coefficient(rng, use_dtw):
    reference = rng.normal(size=(4, 7))
    hypothesis = rng.normal(size=(4, 6))
    expected = mcd(reference, hypothesis, use_dtw=use_dtw)
    reference[0] += 100.0
    hypothesis[0] = rng.normal(size=6) * 50.0
    assert mcd(reference, hypothesis, use_dtw=use_dtw) == expected


def test_dtw_path_is_monotone(rng):
    path = dtw_path(rng.random((5, 8)))
    assert path[0] == (0, 0)
    assert path[-1] == (4, 7)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 1), (1, 0), (0, 1)}


def test_dtw_prefers_diagonal():
    assert dtw_path(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]


# --- boundary tests ---


def test_boundary_shift():
    manifest = make_manifest(("u1", ["p0", "p1", "p2"], [5, 5, 5]))
    report = boundary_accuracy([_record("u1", [8, 5, 2])], manifest)
    assert report.errors == {"u1": [3, 3]}
    assert report.median == 3
    assert report.within(2) == 0.0
    assert report.within(5) == 100.0


def test_boundary_exact():
    manifest = make_manifest(("u1", ["p0", "p1"], [2, 7]), ("u2", ["p0"], [4]))
    report = boundary_accuracy([_record("u1", [2, 7]), _record("u2", [4])], manifest)
    assert report.count == 1
    assert report.to_dict()["within_1"] == 100.0


def test_boundary_excludes_mismatched_counts():
    manifest = make_manifest(("u1", ["p0", "p1"], [2, 7]), ("u2", ["p0", "p1"], None))
    with pytest.warns(UserWarning, match="Excluding"):
        report = boundary_accuracy([_record("u1", [9]), _record("u2", [3, 3])], manifest)
    assert report.excluded == ["u1", "u2"]
    assert report.median is None


def test_boundary_unknown_utterance():
    with pytest.raises(EvaluationError):
        boundary_accuracy([_record("zz", [1, 1])], make_manifest(("u1", ["a"], [1])))


# --- evaluate_corpus tests ---


def test_evaluate_corpus(tmp_path):
    manifest = make_manifest(("u1", ["a˥", "b"], [3, 4]), ("u2", ["c"], [5]))
    cepstra = {"u2": (np.zeros((3, 4)), np.zeros((3, 4)))}
    report = evaluate_corpus(
        manifest,
        hypotheses={"u1": ["a˨", "b"], "u2": ["c"]},
        alignments=[_record("u1", [4, 3], ("a˥", "b"))],
        cepstra=cepstra,
    )
    summary = report.summary
    assert summary["utterances"] == 2
    assert summary["wer"]["rate"] == pytest.approx(1 / 3)
    assert summary["wer"]["mean"] == pytest.approx(0.25)
    assert summary["wer_p"]["rate"] == 0.0
    assert summary["wer_s"]["rate"] == pytest.approx(1 / 3)
    assert summary["mcd"]["mean"] == 0.0
    assert summary["boundary"]["median"] == 1.0

    rows = {row["utterance_id"]: row for row in report.rows}
    assert rows["u1"]["wer_s"] == 0.5
    assert "mcd" not in rows["u1"]

    path = tmp_path / "eval.tsv"
    write_evaluation_tsv(report, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t")[0] == "utterance_id"
    assert lines[1].split("\t")[:2] == ["u1", "0.500000"]
    assert len(lines) == 3


def test_evaluate_unknown_ids():
    manifest = make_manifest(("u1", ["a"], None))
    with pytest.raises(EvaluationError, match="hypotheses"):
        evaluate_corpus(manifest, hypotheses={"u9": ["a"]})
