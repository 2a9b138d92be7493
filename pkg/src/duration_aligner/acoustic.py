"""Bidirectional LSTM acoustic model trained with CTC.

Two bidirectional LSTM layers feed a linear projection onto the P phonemes
plus blank, followed by a per-frame log-softmax. A batch of utterances is
laid out time-major in one matrix, row ``t * B + b`` holding frame ``t`` of
utterance ``b``; shorter utterances are zero-padded at the end and their
padded frames never reach the loss.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Literal, Mapping, NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from duration_aligner.autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    clip_grad_norm,
    concat,
    embedding_lookup,
    log_softmax,
    matmul,
    mul,
    sigmoid,
    tanh,
    transpose,
)
from duration_aligner.checkpoint import load_checkpoint, save_checkpoint
from duration_aligner.ctc import TargetSequence, ctc_loss_tensor, greedy_decode
from duration_aligner.errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    ShapeError,
    TrainingError,
)
from duration_aligner.features import FeatureConfig, FeatureMatrix, NormalizationStats
from duration_aligner.inventory import LikelihoodMatrix, PhonemeInventory
from duration_aligner.manifest import Manifest

logger = logging.getLogger(__name__)

Precision = Literal["float32", "float64"]

_DIRECTIONS = ("fwd", "bwd")
_N_LAYERS = 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    peak_learning_rate: float = 2e-3
    warmup_steps: int = 50
    dropout: float = 0.1
    seed: int = 0
    clip_norm: float = 5.0
    hidden_dim: int = 128
    precision: Precision = "float32"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ConfigurationError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.hidden_dim < 1:
            raise ConfigurationError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.peak_learning_rate <= 0:
            raise ConfigurationError("peak_learning_rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"Unknown precision {self.precision!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Unknown ASR training keys: {sorted(unknown)}")
        return cls(**data)


def warmup_learning_rate(step: int, peak: float, warmup_steps: int) -> float:
    """Inverse-square-root schedule with linear warm-up, reaching ``peak`` at ``warmup_steps``."""
    step = max(step, 1)
    scale = min(step**-0.5, step * warmup_steps**-1.5)
    return peak * scale / warmup_steps**-0.5


def _param_name(layer: int, direction: str, kind: str) -> str:
    return f"lstm{layer}.{direction}.{kind}"


class AsrModel:
    """Parameters and forward pass of the BiLSTM + linear acoustic model."""

    def __init__(
        self,
        inventory: PhonemeInventory,
        input_dim: int,
        hidden_dim: int = 128,
        *,
        params: Mapping[str, np.ndarray] | None = None,
        normalization: NormalizationStats | None = None,
        feature_config: FeatureConfig | None = None,
        feature_kind: str = "melspec",
        precision: Precision = "float32",
        seed: int = 0,
    ) -> None:
        if input_dim < 1 or hidden_dim < 1:
            raise ConfigurationError(
                f"input_dim and hidden_dim must be positive, got {input_dim}, {hidden_dim}"
            )
        self.inventory = inventory
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.normalization = normalization or NormalizationStats.identity(input_dim)
        self.feature_config = feature_config
        self.feature_kind = feature_kind
        self.dtype = np.dtype(precision)
        initial = self._initial_params(seed) if params is None else params
        expected = self.param_shapes()
        if set(initial) != set(expected):
            raise FormatError(
                f"Model parameters {sorted(initial)} do not match the expected "
                f"{sorted(expected)}"
            )
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            value = np.asarray(initial[name], dtype=self.dtype)
            if value.shape != shape:
                raise ShapeError(f"Parameter {name!r} has shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    @property
    def num_classes(self) -> int:
        return self.inventory.num_classes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        H = self.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in range(_N_LAYERS):
            in_dim = self.input_dim if layer == 0 else 2 * H
            for direction in _DIRECTIONS:
                shapes[_param_name(layer, direction, "W")] = (in_dim, 4 * H)
                shapes[_param_name(layer, direction, "U")] = (H, 4 * H)
                shapes[_param_name(layer, direction, "b")] = (1, 4 * H)
        shapes["proj.W"] = (2 * H, self.num_classes)
        shapes["proj.b"] = (1, self.num_classes)
        return shapes

    def _initial_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        H = self.hidden_dim
        k = 1.0 / math.sqrt(H)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                bias = np.zeros(shape)
                if name.startswith("lstm"):
                    # gate order i, f, g, o
                    bias[:, H : 2 * H] = 1.0
                params[name] = bias
            else:
                params[name] = rng.uniform(-k, k, size=shape)
        return params

    # --- forward ---

    def _batch_input(
        self, batch: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Stack normalized N x T_b matrices into the time-major padded layout."""
        lengths = np.array([m.shape[1] for m in batch], dtype=np.int64)
        B, T = len(batch), int(lengths.max())
        x = np.zeros((T, B, self.input_dim), dtype=self.dtype)
        for b, values in enumerate(batch):
            x[: lengths[b], b, :] = self.normalization.apply(values).T
        return x.reshape(T * B, self.input_dim), lengths

    @staticmethod
    def _reversal_index(lengths: np.ndarray) -> np.ndarray:
        """Row permutation reversing every utterance in place; padding rows stay put."""
        B, T = len(lengths), int(lengths.max())
        t = np.arange(T)[:, None]
        b = np.arange(B)[None, :]
        source_t = np.where(t < lengths[None, :], lengths[None, :] - 1 - t, t)
        return (source_t * B + b).reshape(-1)

    def _bias(self, name: str, rows: int) -> Tensor:
        ones = Tensor(np.ones((rows, 1), dtype=self.dtype))
        return matmul(ones, self.params[name])

    def _lstm_direction(
        self, x: Tensor, layer: int, direction: str, T: int, B: int
    ) -> Tensor:
        H = self.hidden_dim
        W = self.params[_param_name(layer, direction, "W")]
        U = self.params[_param_name(layer, direction, "U")]
        projected = add(matmul(x, W), self._bias(_param_name(layer, direction, "b"), T * B))
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        c = Tensor(np.zeros((B, H), dtype=self.dtype))
        outputs = []
        for t in range(T):
            z = add(projected[t * B : (t + 1) * B], matmul(h, U))
            i = sigmoid(z[:, 0:H])
            f = sigmoid(z[:, H : 2 * H])
            g = tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H : 4 * H])
            c = add(mul(f, c), mul(i, g))
            h = mul(o, tanh(c))
            outputs.append(h)
        return concat(outputs, axis=0)

    def _dropout(self, x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
        if rng is None or rate <= 0:
            return x
        keep = (rng.random(x.shape) >= rate).astype(self.dtype) / (1.0 - rate)
        return mul(x, Tensor(keep))

    def forward_batch(
        self,
        batch: Sequence[np.ndarray],
        *,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> list[Tensor]:
        """Per-utterance (P+1) x T_b log-probability tensors for a batch of N x T_b features.

        Dropout is applied only when ``rng`` is given.
        """
        for values in batch:
            if values.ndim != 2 or values.shape[0] != self.input_dim:
                raise ShapeError(
                    f"Model expects {self.input_dim}-dimensional features, got shape "
                    f"{values.shape}"
                )
        x_flat, lengths = self._batch_input(batch)
        B, T = len(lengths), int(lengths.max())
        reverse = self._reversal_index(lengths)

        x = self._dropout(Tensor(x_flat), dropout, rng)
        for layer in range(_N_LAYERS):
            forward = self._lstm_direction(x, layer, "fwd", T, B)
            backward = embedding_lookup(
                self._lstm_direction(embedding_lookup(x, reverse), layer, "bwd", T, B),
                reverse,
            )
            x = concat([forward, backward], axis=1)
            if layer < _N_LAYERS - 1:
                x = self._dropout(x, dropout, rng)

        logits = add(matmul(x, self.params["proj.W"]), self._bias("proj.b", T * B))
        log_probs = log_softmax(logits, axis=1)
        return [
            transpose(embedding_lookup(log_probs, np.arange(lengths[b]) * B + b))
            for b in range(B)
        ]

    def __call__(self, features: FeatureMatrix) -> LikelihoodMatrix:
        return asr_forward(self, features)

    def batch_loss(
        self,
        batch: Sequence[np.ndarray],
        targets: Sequence[TargetSequence],
        *,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Mean CTC loss over a batch; padded frames take no part."""
        outputs = self.forward_batch(batch, dropout=dropout, rng=rng)
        total = ctc_loss_tensor(outputs[0], targets[0])
        for out, target in zip(outputs[1:], targets[1:]):
            total = add(total, ctc_loss_tensor(out, target))
        return mul(total, 1.0 / len(outputs))

    # --- serialization ---

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.params.items()}

    def metadata(self) -> dict[str, Any]:
        return {
            "kind": "asr",
            "inventory": self.inventory.to_dict(),
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "normalization": self.normalization.to_dict(),
            "feature_config": (
                None if self.feature_config is None else self.feature_config.to_dict()
            ),
            "feature_kind": self.feature_kind,
            "precision": self.dtype.name,
        }

    def save(self, path: str | Path, **extra: Any) -> tuple[Path, Path]:
        return save_checkpoint(path, self.state_dict(), {**self.metadata(), **extra})

    @classmethod
    def load(cls, path: str | Path) -> tuple[AsrModel, dict[str, Any]]:
        """Rebuild a model from a checkpoint; also returns the sidecar metadata."""
        tensors, metadata = load_checkpoint(path)
        if metadata.get("kind") != "asr":
            raise FormatError(f"Checkpoint {path} is not an acoustic model checkpoint")
        try:
            feature_config = metadata.get("feature_config")
            model = cls(
                inventory=PhonemeInventory.from_dict(metadata["inventory"]),
                input_dim=int(metadata["input_dim"]),
                hidden_dim=int(metadata["hidden_dim"]),
                params=tensors,
                normalization=NormalizationStats.from_dict(metadata["normalization"]),
                feature_config=(
                    None if feature_config is None else FeatureConfig.from_dict(feature_config)
                ),
                feature_kind=metadata.get("feature_kind", "melspec"),
                precision=metadata.get("precision", "float32"),
            )
        except KeyError as e:
            raise FormatError(f"Checkpoint {path} sidecar is missing {e.args[0]!r}") from e
        return model, metadata


def asr_forward(model: AsrModel, features: FeatureMatrix) -> LikelihoodMatrix:
    """Per-frame phoneme log-probabilities for one utterance."""
    if features.n_dims != model.input_dim:
        raise ShapeError(
            f"Model expects {model.input_dim}-dimensional features, "
            f"got {features.n_dims} ({features.source_id!r})"
        )
    (log_probs,) = model.forward_batch([features.values])
    return LikelihoodMatrix.from_logits(
        log_probs.data.astype(np.float64),
        inventory=model.inventory,
        frame_hop_seconds=features.frame_hop_seconds,
    )


def decode_greedy(model: AsrModel, features: FeatureMatrix) -> list[str]:
    """Best-path phoneme transcription of one utterance."""
    return model.inventory.decode(greedy_decode(asr_forward(model, features)))


class AsrTrainingResult(NamedTuple):
    model: AsrModel
    loss_curve: list[float]
    skipped: list[str]


def _make_batches(
    ids: Sequence[str], lengths: Mapping[str, int], batch_size: int
) -> list[list[str]]:
    ordered = sorted(ids, key=lambda u: (lengths[u], u))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


def train_asr(
    manifest: Manifest,
    features: Mapping[str, FeatureMatrix],
    inventory: PhonemeInventory,
    config: TrainConfig | None = None,
    *,
    checkpoint_dir: str | Path | None = None,
    feature_config: FeatureConfig | None = None,
    progress: bool = False,
) -> AsrTrainingResult:
    """Train an acoustic model on ``manifest`` by minimizing the mean CTC loss.

    Utterances are bucketed into batches of similar length; batch order is
    reshuffled every epoch from ``config.seed``. Utterances too short for
    their phoneme sequence are skipped with a warning.

    Args:
        manifest: Training utterances; every phoneme must be in ``inventory``.
        features: Feature matrix per utterance id.
        inventory: Output phoneme classes, blank excluded.
        config: Optimization settings.
        checkpoint_dir: When given, ``asr.tnsr``/``asr.json`` are rewritten
            after every epoch.
        feature_config: Recorded in the checkpoint for later extraction.
        progress: Show a progress bar over epochs.

    Returns:
        The trained model, the mean loss of every epoch and the skipped
        utterance ids.

    Raises:
        TrainingError: The manifest is empty or no utterance is feasible.
    """
    config = config or TrainConfig()
    if len(manifest) == 0:
        raise TrainingError("Cannot train on an empty manifest")
    missing = [p for p in manifest.phoneme_symbols() if p not in inventory.symbols]
    if missing:
        raise ContractError(f"Manifest phonemes {missing} are not in the inventory")

    targets: dict[str, TargetSequence] = {}
    skipped: list[str] = []
    for entry in manifest:
        if entry.utterance_id not in features:
            raise TrainingError(f"No features for utterance {entry.utterance_id!r}")
        target = TargetSequence(
            ids=tuple(inventory.encode(entry.phonemes)), blank_id=inventory.blank_id
        )
        n_frames = features[entry.utterance_id].n_frames
        if n_frames < target.min_frames:
            warnings.warn(
                f"Skipping utterance {entry.utterance_id!r}: {n_frames} frames but its "
                f"phoneme sequence needs at least {target.min_frames}",
                UserWarning,
                stacklevel=2,
            )
            skipped.append(entry.utterance_id)
            continue
        targets[entry.utterance_id] = target
    if not targets:
        raise TrainingError(
            f"All {len(manifest)} utterances are too short for their phoneme sequences"
        )

    train_ids = sorted(targets)
    input_dims = {features[u].n_dims for u in train_ids}
    if len(input_dims) != 1:
        raise ShapeError(f"Training features have mixed dimensions {sorted(input_dims)}")
    model = AsrModel(
        inventory=inventory,
        input_dim=input_dims.pop(),
        hidden_dim=config.hidden_dim,
        normalization=NormalizationStats.from_features(features[u] for u in train_ids),
        feature_config=feature_config,
        feature_kind=features[train_ids[0]].kind,
        precision=config.precision,
        seed=config.seed,
    )
    lengths = {u: features[u].n_frames for u in train_ids}
    batches = _make_batches(train_ids, lengths, config.batch_size)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = AdamState()
    loss_curve: list[float] = []

    for epoch in tqdm(range(1, config.epochs + 1), desc="train-asr", disable=not progress):
        epoch_total = 0.0
        for batch_index in rng.permutation(len(batches)):
            batch_ids = batches[batch_index]
            with Tape() as tape:
                loss = model.batch_loss(
                    [features[u].values for u in batch_ids],
                    [targets[u] for u in batch_ids],
                    dropout=config.dropout,
                    rng=rng,
                )
                grads = tape.backward(loss, model.params)
            grads, _ = clip_grad_norm(grads, config.clip_norm)
            lr = warmup_learning_rate(
                state.step + 1, config.peak_learning_rate, config.warmup_steps
            )
            adam_step(model.params, grads, state, lr)
            epoch_total += loss.item() * len(batch_ids)
        mean_loss = epoch_total / len(train_ids)
        if not math.isfinite(mean_loss):
            raise TrainingError(f"Training diverged at epoch {epoch} (loss {mean_loss})")
        loss_curve.append(mean_loss)
        logger.info("epoch %d/%d mean CTC loss %.4f", epoch, config.epochs, mean_loss)
        if checkpoint_dir is not None:
            model.save(
                Path(checkpoint_dir) / "asr",
                epoch=epoch,
                loss_history=loss_curve,
                train_config=config.to_dict(),
                skipped=skipped,
            )
    return AsrTrainingResult(model=model, loss_curve=loss_curve, skipped=skipped)
