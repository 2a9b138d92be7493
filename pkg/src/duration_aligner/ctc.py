"""CTC loss, best-path duration collapse and forced Viterbi alignment.

Everything works on the blank-expanded lattice ``ε x1 ε x2 ... ε`` of length
2|X|+1 and in the natural-log domain. State ``s`` can be entered from ``s``,
``s-1`` and, when ``s`` holds a phoneme different from the one at ``s-2``,
from ``s-2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from duration_aligner.autodiff import Tensor, record_op
from duration_aligner.errors import (
    ContractError,
    InfeasibleAlignmentError,
    ShapeError,
)
from duration_aligner.inventory import LikelihoodMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TargetSequence:
    ids: tuple[int, ...]
    blank_id: int

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if not ids:
            raise ContractError("A target sequence needs at least one phoneme")
        if any(i < 0 or i >= self.blank_id for i in ids):
            raise ContractError(
                f"Target ids must lie in [0, {self.blank_id}) and exclude the blank, got {ids}"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def expanded(self) -> np.ndarray:
        ext = np.full(2 * len(self.ids) + 1, self.blank_id, dtype=np.int64)
        ext[1::2] = self.ids
        ext.flags.writeable = False
        return ext

    @cached_property
    def skip_allowed(self) -> np.ndarray:
        """Whether state ``s`` may be entered directly from ``s-2``."""
        ext = self.expanded
        skip = np.zeros(len(ext), dtype=bool)
        skip[2:] = (ext[2:] != self.blank_id) & (ext[2:] != ext[:-2])
        return skip

    @property
    def repeats(self) -> int:
        return sum(a == b for a, b in zip(self.ids, self.ids[1:]))

    @property
    def min_frames(self) -> int:
        return len(self.ids) + self.repeats


@dataclass(frozen=True)
class DurationSequence:
    """Frames per phoneme; non-negative and summing to ``total_frames``."""

    durations: tuple[int, ...]
    total_frames: int | None = None

    def __post_init__(self) -> None:
        durations = tuple(int(d) for d in self.durations)
        object.__setattr__(self, "durations", durations)
        if any(d < 0 for d in durations):
            raise ContractError(f"Durations must be non-negative, got {durations}")
        total = sum(durations)
        if self.total_frames is None:
            object.__setattr__(self, "total_frames", total)
        elif total != self.total_frames:
            raise ContractError(
                f"Durations sum to {total} but the utterance has {self.total_frames} frames"
            )

    def __len__(self) -> int:
        return len(self.durations)

    def __iter__(self):
        return iter(self.durations)

    def as_array(self) -> np.ndarray:
        return np.array(self.durations, dtype=np.int64)

    def boundaries(self) -> np.ndarray:
        """Frame indices where each phoneme after the first starts."""
        return np.cumsum(self.durations)[:-1]


@dataclass(frozen=True)
class PdaMismatch:
    """The best path collapsed to a different phoneme sequence than the target."""

    collapsed: tuple[int, ...]
    expected: tuple[int, ...]
    divergence_index: int


class CtcLoss(NamedTuple):
    loss: float
    grad: np.ndarray


class ViterbiPath(NamedTuple):
    states: np.ndarray
    labels: np.ndarray
    log_prob: float


def _log_probs(C: LikelihoodMatrix | np.ndarray) -> np.ndarray:
    if isinstance(C, LikelihoodMatrix):
        return C.log_probs
    lp = np.asarray(C, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeError(f"Log-probabilities must be a (P+1) x T matrix, got {lp.shape}")
    return lp


def as_target(X: TargetSequence | Sequence[int], n_classes: int) -> TargetSequence:
    if isinstance(X, TargetSequence):
        if X.blank_id != n_classes - 1:
            raise ShapeError(
                f"Target uses blank id {X.blank_id} but the matrix has {n_classes} rows"
            )
        return X
    return TargetSequence(ids=tuple(X), blank_id=n_classes - 1)


def _check_feasible(lp: np.ndarray, X: TargetSequence) -> None:
    if lp.shape[1] < X.min_frames:
        raise InfeasibleAlignmentError(required=X.min_frames, available=lp.shape[1])


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, -np.inf)
    out[k:] = v[:-k]
    return out


def _unshift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, -np.inf)
    out[:-k] = v[k:]
    return out


def ctc_forward(lp: np.ndarray, X: TargetSequence) -> np.ndarray:
    """Log forward variables, shape (2|X|+1) x T."""
    ext, skip = X.expanded, X.skip_allowed
    S, T = len(ext), lp.shape[1]
    alpha = np.full((S, T), -np.inf)
    alpha[0, 0] = lp[ext[0], 0]
    alpha[1, 0] = lp[ext[1], 0]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a = np.logaddexp(prev, _shift(prev, 1))
        a = np.where(skip, np.logaddexp(a, _shift(prev, 2)), a)
        alpha[:, t] = a + lp[ext, t]
    return alpha


def ctc_backward(lp: np.ndarray, X: TargetSequence) -> np.ndarray:
    """Log backward variables including the emission at ``t``."""
    ext, skip = X.expanded, X.skip_allowed
    S, T = len(ext), lp.shape[1]
    beta = np.full((S, T), -np.inf)
    beta[S - 1, T - 1] = lp[ext[S - 1], T - 1]
    beta[S - 2, T - 1] = lp[ext[S - 2], T - 1]
    skip_from = np.zeros_like(skip)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        b = np.logaddexp(nxt, _unshift(nxt, 1))
        b = np.where(skip_from, np.logaddexp(b, _unshift(nxt, 2)), b)
        beta[:, t] = b + lp[ext, t]
    return beta


def ctc_loss(C: LikelihoodMatrix | np.ndarray, X: TargetSequence | Sequence[int]) -> CtcLoss:
    """Negative log of the total probability of every lattice path spelling ``X``.

    Returns:
        The loss and its gradient with respect to the log-probabilities, a
        (P+1) x T matrix holding minus the posterior occupancy of each label.

    Raises:
        InfeasibleAlignmentError: ``C`` has fewer frames than ``X`` needs.
    """
    lp = _log_probs(C)
    X = as_target(X, lp.shape[0])
    _check_feasible(lp, X)
    ext = X.expanded
    S, T = len(ext), lp.shape[1]

    alpha = ctc_forward(lp, X)
    log_z = float(np.logaddexp(alpha[S - 1, T - 1], alpha[S - 2, T - 1]))
    grad = np.zeros_like(lp)
    if not np.isfinite(log_z):
        return CtcLoss(loss=float("inf"), grad=grad)

    beta = ctc_backward(lp, X)
    reachable = np.isfinite(alpha) & np.isfinite(beta)
    with np.errstate(invalid="ignore"):
        log_gamma = np.where(reachable, alpha + beta - lp[ext, :] - log_z, -np.inf)
    np.add.at(grad, ext, -np.exp(log_gamma))
    return CtcLoss(loss=-log_z, grad=grad)


def ctc_loss_tensor(log_probs: Tensor, X: TargetSequence) -> Tensor:
    """:func:`ctc_loss` as a recorded op over a (P+1) x T log-probability tensor."""
    loss, grad = ctc_loss(log_probs.data, X)
    grad = grad.astype(log_probs.dtype)
    return record_op(
        "ctc_loss",
        np.asarray(loss, dtype=log_probs.dtype),
        (log_probs,),
        lambda g: (g * grad,),
    )


def viterbi_path(
    C: LikelihoodMatrix | np.ndarray, X: TargetSequence | Sequence[int]
) -> ViterbiPath:
    """Most probable lattice path spelling ``X``; ties prefer staying in a state."""
    lp = _log_probs(C)
    X = as_target(X, lp.shape[0])
    _check_feasible(lp, X)
    ext, skip = X.expanded, X.skip_allowed
    S, T = len(ext), lp.shape[1]

    score = np.full((S, T), -np.inf)
    back = np.zeros((S, T), dtype=np.int64)
    score[0, 0] = lp[ext[0], 0]
    score[1, 0] = lp[ext[1], 0]
    states = np.arange(S)
    for t in range(1, T):
        prev = score[:, t - 1]
        candidates = np.stack(
            [prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), -np.inf)]
        )
        step = candidates.argmax(axis=0)
        score[:, t] = candidates[step, states] + lp[ext, t]
        back[:, t] = states - step

    last = S - 1 if score[S - 1, T - 1] >= score[S - 2, T - 1] else S - 2
    log_prob = float(score[last, T - 1])
    if not np.isfinite(log_prob):
        raise ContractError("No lattice path spelling the target has non-zero probability")
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[path[t], t]
    return ViterbiPath(states=path, labels=ext[path], log_prob=log_prob)


def durations_from_states(states: np.ndarray, n_phonemes: int) -> DurationSequence:
    """Credit each frame of a lattice path to a phoneme.

    Phoneme states own their frames; blank frames go to the preceding
    phoneme, and leading blanks to the first one.
    """
    states = np.asarray(states)
    owner = np.where(states % 2 == 1, (states - 1) // 2, states // 2 - 1)
    owner = np.maximum(owner, 0)
    return DurationSequence(
        durations=tuple(np.bincount(owner, minlength=n_phonemes).tolist()),
        total_frames=len(states),
    )


def forced_viterbi(
    C: LikelihoodMatrix | np.ndarray, X: TargetSequence | Sequence[int]
) -> DurationSequence:
    """Durations from the best lattice path; always one per target phoneme."""
    lp = _log_probs(C)
    X = as_target(X, lp.shape[0])
    return durations_from_states(viterbi_path(lp, X).states, len(X))


def collapse_frame_labels(labels: Sequence[int], blank_id: int) -> tuple[list[int], list[int]]:
    """Run the best-path scan over frame labels.

    A blank or a repeat of the running phoneme extends it; any other label
    closes it and starts a new one. Leading blanks go to the first phoneme.

    Returns:
        The collapsed phoneme ids and the frame count credited to each.
    """
    phonemes: list[int] = []
    durations: list[int] = []
    leading = 0
    for g in labels:
        g = int(g)
        if not phonemes:
            if g == blank_id:
                leading += 1
                continue
            phonemes.append(g)
            durations.append(leading + 1)
        elif g == blank_id or g == phonemes[-1]:
            durations[-1] += 1
        else:
            phonemes.append(g)
            durations.append(1)
    return phonemes, durations


def _divergence_index(a: Sequence[int], b: Sequence[int]) -> int:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return min(len(a), len(b))


def pda(
    C: LikelihoodMatrix | np.ndarray, X: TargetSequence | Sequence[int]
) -> DurationSequence | PdaMismatch:
    """Phoneme durations from the column-wise argmax path.

    Returns:
        The durations when the collapsed path spells ``X``, otherwise a
        :class:`PdaMismatch` describing where they part.
    """
    lp = _log_probs(C)
    X = as_target(X, lp.shape[0])
    collapsed, durations = collapse_frame_labels(lp.argmax(axis=0), X.blank_id)
    if tuple(collapsed) != X.ids:
        return PdaMismatch(
            collapsed=tuple(collapsed),
            expected=X.ids,
            divergence_index=_divergence_index(collapsed, X.ids),
        )
    return DurationSequence(durations=tuple(durations), total_frames=lp.shape[1])


def greedy_decode(C: LikelihoodMatrix | np.ndarray) -> list[int]:
    """Standard CTC best-path transcription: merge repeats, then drop blanks."""
    lp = _log_probs(C)
    blank = lp.shape[0] - 1
    labels = lp.argmax(axis=0)
    keep = np.ones(len(labels), dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return [int(g) for g in labels[keep] if g != blank]
