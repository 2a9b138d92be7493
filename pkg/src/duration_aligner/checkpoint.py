"""Named-tensor container and JSON sidecar used for every model checkpoint.

Container layout (little-endian)::

    b"TNSR" | u8 version | u32 count
    count x ( u32 name length | name bytes (UTF-8) | u8 rank | rank x u32 dims
              | float32 values, C order )

Tensors are written sorted by name so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from duration_aligner.constants import TENSOR_MAGIC, TENSOR_VERSION
from duration_aligner.errors import FormatError


def dumps_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<4sBI", TENSOR_MAGIC, TENSOR_VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def loads_tensors(data: bytes) -> dict[str, np.ndarray]:
    try:
        magic, version, count = struct.unpack_from("<4sBI", data, 0)
        if magic != TENSOR_MAGIC:
            raise FormatError(f"Bad tensor container magic {magic!r}")
        if version != TENSOR_VERSION:
            raise FormatError(f"Unsupported tensor container version {version}")
        offset = struct.calcsize("<4sBI")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + n_bytes > len(data):
                raise FormatError(f"Tensor {name!r} is truncated")
            tensors[name] = (
                np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=offset)
                .reshape(shape)
                .astype(np.float32)
            )
            offset += n_bytes
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"Malformed tensor container: {e}") from e
    if offset != len(data):
        raise FormatError(f"Tensor container has {len(data) - offset} trailing bytes")
    return tensors


def save_checkpoint(
    path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any]
) -> tuple[Path, Path]:
    """Write ``<path>.tnsr`` and its ``<path>.json`` sidecar.

    Returns:
        The tensor container path and the sidecar path.
    """
    stem = Path(path).with_suffix("")
    tensor_path, sidecar_path = stem.with_suffix(".tnsr"), stem.with_suffix(".json")
    tensor_path.parent.mkdir(parents=True, exist_ok=True)
    tensor_path.write_bytes(dumps_tensors(tensors))
    sidecar_path.write_text(
        json.dumps(metadata, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return tensor_path, sidecar_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    stem = Path(path).with_suffix("")
    tensor_path, sidecar_path = stem.with_suffix(".tnsr"), stem.with_suffix(".json")
    if not tensor_path.exists() or not sidecar_path.exists():
        raise FormatError(
            f"Checkpoint {stem} needs both {tensor_path.name} and {sidecar_path.name}"
        )
    tensors = loads_tensors(tensor_path.read_bytes())
    try:
        metadata = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Checkpoint sidecar {sidecar_path} is not valid JSON: {e}") from e
    return tensors, metadata
