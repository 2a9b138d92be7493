"""Phoneme inventory and the per-frame likelihood matrix the acoustic model emits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from duration_aligner.errors import ContractError, FormatError, ShapeError
from duration_aligner.manifest import Manifest


@dataclass(frozen=True)
class PhonemeInventory:
    """P distinct phoneme symbols; the CTC blank is class P, appended last."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise ContractError("A phoneme inventory needs at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ContractError(f"Inventory symbols are not unique: {self.symbols}")

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> PhonemeInventory:
        return cls(symbols=tuple(manifest.phoneme_symbols()))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def encode(self, phonemes: Iterable[str]) -> np.ndarray:
        index = {symbol: i for i, symbol in enumerate(self.symbols)}
        try:
            return np.array([index[p] for p in phonemes], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"Phoneme {e.args[0]!r} is not in the inventory") from e

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def covers(self, phonemes: Iterable[str]) -> bool:
        return set(phonemes) <= set(self.symbols)

    def to_dict(self) -> dict[str, Any]:
        return {"symbols": list(self.symbols)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PhonemeInventory:
        if "symbols" not in data:
            raise FormatError("Inventory record has no 'symbols' field")
        return cls(symbols=tuple(data["symbols"]))


@dataclass(frozen=True, eq=False)
class LikelihoodMatrix:
    """Per-frame log-probabilities over the P phonemes plus blank, (P+1) x T."""

    log_probs: np.ndarray
    inventory: PhonemeInventory | None = None
    frame_hop_seconds: float = 1.0

    def __post_init__(self) -> None:
        log_probs = np.array(self.log_probs, dtype=np.float64)
        if log_probs.ndim != 2 or log_probs.shape[0] < 2 or log_probs.shape[1] < 1:
            raise ShapeError(
                f"A likelihood matrix needs shape (P+1) x T with P >= 1, T >= 1, "
                f"got {log_probs.shape}"
            )
        if self.inventory is not None and log_probs.shape[0] != self.inventory.num_classes:
            raise ShapeError(
                f"Likelihood matrix has {log_probs.shape[0]} rows but the inventory "
                f"has {self.inventory.num_classes} classes"
            )
        log_probs.flags.writeable = False
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_logits(
        cls,
        logits: np.ndarray,
        inventory: PhonemeInventory | None = None,
        frame_hop_seconds: float = 1.0,
    ) -> LikelihoodMatrix:
        return cls(logsumexp_normalize(logits), inventory, frame_hop_seconds)

    @property
    def blank_id(self) -> int:
        return self.log_probs.shape[0] - 1

    @property
    def n_frames(self) -> int:
        return self.log_probs.shape[1]

    def is_normalized(self, atol: float = 1e-6) -> bool:
        with np.errstate(divide="ignore"):
            totals = logsumexp(self.log_probs, axis=0)
        return bool(np.allclose(totals, 0.0, atol=atol))

    def frame_labels(self) -> np.ndarray:
        """Column-wise argmax; ties resolve to the lowest row."""
        return self.log_probs.argmax(axis=0)


def logsumexp_normalize(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=axis, keepdims=True)
