from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Sized

import numpy as np

from duration_aligner.errors import ContractError


def file_checksum(path: str | Path) -> str:
    """
    SHA-256 hex digest of a file's bytes.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def json_line(record: dict[str, Any]) -> str:
    """Serialize one JSON-lines record. Key order is preserved so output is stable."""
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def check_matching_lengths(name_a: str, a: Sized, name_b: str, b: Sized) -> None:
    """Check that two paired sequences have the same length"""
    if len(a) != len(b):
        raise ContractError(
            f"{name_a} has length {len(a)} but {name_b} has length {len(b)}; "
            "they must be the same length."
        )


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic generator for the index-th item of a seeded job."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))
