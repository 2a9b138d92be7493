"""Duration predictor and length regulator consuming aligner durations.

Phoneme and style embeddings are summed per position, a two-layer
feed-forward predictor maps each fused embedding to a log1p-duration, and
the length regulator repeats every embedding by its duration to reach the
frame rate. An optional linear frame decoder lets the feature
reconstruction term of the loss train against externally encoded targets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Literal, Mapping, NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from duration_aligner.alignment import AlignmentRecord
from duration_aligner.autodiff import (
    AdamState,
    Tape,
    Tensor,
    absolute,
    adam_step,
    add,
    clip_grad_norm,
    embedding_lookup,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sub,
    transpose,
)
from duration_aligner.checkpoint import load_checkpoint, save_checkpoint
from duration_aligner.constants import NEUTRAL_STYLE
from duration_aligner.ctc import DurationSequence
from duration_aligner.errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    ShapeError,
    TrainingError,
)
from duration_aligner.features import FeatureMatrix
from duration_aligner.inventory import PhonemeInventory
from duration_aligner.manifest import Manifest

logger = logging.getLogger(__name__)

# Externally encoded frame targets, M x T
TargetFeature = FeatureMatrix


@dataclass(frozen=True)
class DurationTrainConfig:
    embedding_dim: int = 32
    hidden_dim: int = 64
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 5e-3
    dropout: float = 0.1
    holdout_fraction: float = 0.2
    clip_norm: float = 5.0
    mse_weight: float = 1.0
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"

    def __post_init__(self) -> None:
        for name in ("embedding_dim", "hidden_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigurationError(
                f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}"
            )
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"Unknown precision {self.precision!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DurationTrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Unknown duration training keys: {sorted(unknown)}")
        return cls(**data)


class DurationModel:
    def __init__(
        self,
        inventory: PhonemeInventory,
        styles: Sequence[str],
        embedding_dim: int = 32,
        hidden_dim: int = 64,
        *,
        target_dim: int | None = None,
        params: Mapping[str, np.ndarray] | None = None,
        precision: str = "float32",
        seed: int = 0,
    ) -> None:
        if not styles:
            raise ContractError("A duration model needs at least one style")
        self.inventory = inventory
        self.styles = tuple(styles)
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.target_dim = target_dim
        self.dtype = np.dtype(precision)
        initial = self._initial_params(seed) if params is None else params
        expected = self.param_shapes()
        if set(initial) != set(expected):
            raise FormatError(
                f"Model parameters {sorted(initial)} do not match the expected {sorted(expected)}"
            )
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            value = np.asarray(initial[name], dtype=self.dtype)
            if value.shape != shape:
                raise ShapeError(f"Parameter {name!r} has shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        D, H = self.embedding_dim, self.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {
            "phoneme_embedding": (self.inventory.size, D),
            "style_embedding": (len(self.styles), D),
            "predictor.W1": (D, H),
            "predictor.b1": (1, H),
            "predictor.W2": (H, 1),
            "predictor.b2": (1, 1),
        }
        if self.target_dim is not None:
            shapes["decoder.W"] = (D, self.target_dim)
            shapes["decoder.b"] = (1, self.target_dim)
        return shapes

    def _initial_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("_embedding"):
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(self.embedding_dim), size=shape)
            elif ".b" in name:
                params[name] = np.zeros(shape)
            else:
                k = 1.0 / math.sqrt(shape[0])
                params[name] = rng.uniform(-k, k, size=shape)
        return params

    def encode_styles(self, styles: Sequence[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.styles)}
        try:
            return np.array([index[s] for s in styles], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"Style {e.args[0]!r} is not known to the duration model") from e

    def _bias(self, name: str, rows: int) -> Tensor:
        return matmul(Tensor(np.ones((rows, 1), dtype=self.dtype)), self.params[name])

    def predict_log_durations(
        self,
        E: Tensor,
        *,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Raw predictor output per position, in the log1p-duration domain."""
        n = E.shape[0]
        hidden = relu(add(matmul(E, self.params["predictor.W1"]), self._bias("predictor.b1", n)))
        if rng is not None and dropout > 0:
            keep = (rng.random(hidden.shape) >= dropout).astype(self.dtype) / (1.0 - dropout)
            hidden = mul(hidden, Tensor(keep))
        out = add(matmul(hidden, self.params["predictor.W2"]), self._bias("predictor.b2", n))
        return reshape(out, (n,))

    def decode_frames(self, expanded: Tensor) -> Tensor:
        """Linear frame decoder: (T x D) regulated embeddings to an M x T feature matrix."""
        if self.target_dim is None:
            raise ContractError("This duration model was built without a frame decoder")
        frames = add(
            matmul(expanded, self.params["decoder.W"]),
            self._bias("decoder.b", expanded.shape[0]),
        )
        return transpose(frames)

    # --- serialization ---

    def metadata(self) -> dict[str, Any]:
        return {
            "kind": "duration",
            "inventory": self.inventory.to_dict(),
            "styles": list(self.styles),
            "embedding_dim": self.embedding_dim,
            "hidden_dim": self.hidden_dim,
            "target_dim": self.target_dim,
            "precision": self.dtype.name,
        }

    def save(self, path: str | Path, **extra: Any) -> tuple[Path, Path]:
        tensors = {name: t.data for name, t in self.params.items()}
        return save_checkpoint(path, tensors, {**self.metadata(), **extra})

    @classmethod
    def load(cls, path: str | Path) -> tuple[DurationModel, dict[str, Any]]:
        tensors, metadata = load_checkpoint(path)
        if metadata.get("kind") != "duration":
            raise FormatError(f"Checkpoint {path} is not a duration model checkpoint")
        try:
            model = cls(
                inventory=PhonemeInventory.from_dict(metadata["inventory"]),
                styles=metadata["styles"],
                embedding_dim=int(metadata["embedding_dim"]),
                hidden_dim=int(metadata["hidden_dim"]),
                target_dim=metadata.get("target_dim"),
                params=tensors,
                precision=metadata.get("precision", "float32"),
            )
        except KeyError as e:
            raise FormatError(f"Checkpoint {path} sidecar is missing {e.args[0]!r}") from e
        return model, metadata


def fuse_embeddings(
    model: DurationModel, phoneme_ids: Sequence[int], style_ids: Sequence[int]
) -> Tensor:
    """Per-position sum of phoneme and style embeddings, |X| x D."""
    if len(phoneme_ids) != len(style_ids):
        raise ContractError(
            f"{len(phoneme_ids)} phoneme ids but {len(style_ids)} style ids"
        )
    return add(
        embedding_lookup(model.params["phoneme_embedding"], phoneme_ids),
        embedding_lookup(model.params["style_embedding"], style_ids),
    )


def length_regulate(
    E: Tensor | np.ndarray, durations: DurationSequence | Sequence[int]
) -> Tensor:
    """Repeat row ``i`` of ``E`` ``durations[i]`` times, in order."""
    E = _as_tensor(E)
    counts = np.asarray(list(durations), dtype=np.int64)
    if E.ndim != 2 or E.shape[0] != len(counts):
        raise ContractError(
            f"length_regulate got {E.shape[0] if E.ndim else 0} embeddings "
            f"but {len(counts)} durations"
        )
    if np.any(counts < 0):
        raise ContractError("Durations must be non-negative")
    return embedding_lookup(E, np.repeat(np.arange(len(counts)), counts))


def _as_tensor(x: Tensor | np.ndarray | FeatureMatrix) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureMatrix):
        return Tensor(x.values)
    return Tensor(np.asarray(x))


def duration_mae(
    L_pred: Tensor | np.ndarray, L_ref: DurationSequence | Sequence[int]
) -> Tensor:
    """Mean absolute error between log1p-domain predictions and reference frame counts."""
    L_pred = _as_tensor(L_pred)
    ref = np.log1p(np.asarray(list(L_ref), dtype=np.float64)).astype(L_pred.dtype)
    if L_pred.shape != ref.shape:
        raise ContractError(
            f"{L_pred.shape[0] if L_pred.ndim else 0} predicted durations for "
            f"{len(ref)} reference durations"
        )
    return mean(absolute(sub(L_pred, Tensor(ref))))


def feature_mse(
    H_pred: Tensor | np.ndarray | FeatureMatrix, H_ref: Tensor | np.ndarray | FeatureMatrix
) -> Tensor:
    H_pred, H_ref = _as_tensor(H_pred), _as_tensor(H_ref)
    if H_pred.shape != H_ref.shape:
        raise ContractError(
            f"Predicted features have shape {H_pred.shape}, reference {H_ref.shape}"
        )
    diff = sub(H_pred, H_ref)
    return mean(mul(diff, diff))


def tts_loss(
    H_pred: Tensor | np.ndarray | FeatureMatrix,
    H_ref: Tensor | np.ndarray | FeatureMatrix,
    L_pred: Tensor | np.ndarray,
    L_ref: DurationSequence | Sequence[int],
) -> Tensor:
    """MSE over all feature entries plus duration MAE in the log1p domain."""
    return add(feature_mse(H_pred, H_ref), duration_mae(L_pred, L_ref))


def predict_durations(
    model: DurationModel, phonemes: Sequence[str], styles: Sequence[str] | None = None
) -> DurationSequence:
    """Inference durations: ``round(expm1(prediction))``, at least one frame each."""
    styles = [NEUTRAL_STYLE] * len(phonemes) if styles is None else list(styles)
    E = fuse_embeddings(model, model.inventory.encode(phonemes), model.encode_styles(styles))
    raw = model.predict_log_durations(E).data.astype(np.float64)
    frames = np.maximum(1, np.round(np.expm1(raw))).astype(np.int64)
    return DurationSequence(tuple(frames.tolist()))


class DurationReport(NamedTuple):
    train_utterances: list[str]
    holdout_utterances: list[str]
    mean_abs_frame_error: float | None
    std_abs_frame_error: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "train_utterances": len(self.train_utterances),
            "holdout_utterances": list(self.holdout_utterances),
            "mean_abs_frame_error": self.mean_abs_frame_error,
            "std_abs_frame_error": self.std_abs_frame_error,
        }


class DurationTrainingResult(NamedTuple):
    model: DurationModel
    loss_curve: list[float]
    report: DurationReport


def _record_styles(record: AlignmentRecord, manifest: Manifest) -> tuple[str, ...]:
    if record.styles is not None:
        return record.styles
    entry_styles = manifest[record.utterance_id].styles
    return entry_styles if entry_styles is not None else (NEUTRAL_STYLE,) * len(record.phonemes)


def _holdout_split(ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ordered = sorted(ids)
    # at least one utterance always stays in training
    n_holdout = min(int(round(fraction * len(ordered))), len(ordered) - 1)
    if fraction > 0 and len(ordered) > 1:
        n_holdout = max(n_holdout, 1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    order = rng.permutation(len(ordered))
    holdout = sorted(ordered[i] for i in order[:n_holdout])
    train = sorted(ordered[i] for i in order[n_holdout:])
    return train, holdout


def train_duration_model(
    records: Sequence[AlignmentRecord],
    manifest: Manifest,
    config: DurationTrainConfig | None = None,
    *,
    targets: Mapping[str, TargetFeature] | None = None,
    checkpoint_dir: str | Path | None = None,
    progress: bool = False,
) -> DurationTrainingResult:
    """Fit embeddings and the duration predictor to aligned durations.

    The loss is the log1p-domain duration MAE. When ``targets`` maps
    utterance ids to M x T feature matrices, a linear frame decoder is
    trained alongside on the length-regulated embeddings with the feature
    MSE term, using the aligned durations.

    Returns:
        The model, the mean training loss per epoch and a report with the
        mean absolute frame error on the held-out utterances.

    Raises:
        TrainingError: No alignment record matches the manifest.
    """
    config = config or DurationTrainConfig()
    known = set(manifest.utterance_ids)
    usable = {r.utterance_id: r for r in records if r.utterance_id in known}
    if not usable:
        raise TrainingError("No alignment records cover the manifest utterances")
    uncovered = known - set(usable)
    if uncovered:
        logger.warning("%d manifest utterances have no alignment record", len(uncovered))

    inventory = PhonemeInventory(
        tuple(sorted({p for r in usable.values() for p in r.phonemes}))
    )
    styles = {u: _record_styles(r, manifest) for u, r in usable.items()}
    style_symbols = sorted({s for seq in styles.values() for s in seq})

    target_dim = None
    if targets is not None:
        dims = {targets[u].n_dims for u in usable if u in targets}
        if len(dims) != 1:
            raise TrainingError(f"Frame targets must share one dimension, got {sorted(dims)}")
        target_dim = dims.pop()
        for u in usable:
            if u in targets and targets[u].n_frames != usable[u].total_frames:
                raise ContractError(
                    f"Target features for {u!r} have {targets[u].n_frames} frames but its "
                    f"durations sum to {usable[u].total_frames}"
                )

    model = DurationModel(
        inventory,
        style_symbols,
        config.embedding_dim,
        config.hidden_dim,
        target_dim=target_dim,
        precision=config.precision,
        seed=config.seed,
    )
    train_ids, holdout_ids = _holdout_split(list(usable), config.holdout_fraction, config.seed)
    encoded = {
        u: (
            model.inventory.encode(usable[u].phonemes),
            model.encode_styles(styles[u]),
            usable[u].durations,
        )
        for u in usable
    }

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    state = AdamState()
    loss_curve: list[float] = []
    for epoch in tqdm(range(1, config.epochs + 1), desc="train-duration", disable=not progress):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        epoch_total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            phoneme_ids = np.concatenate([encoded[u][0] for u in batch])
            style_ids = np.concatenate([encoded[u][1] for u in batch])
            durations = [d for u in batch for d in encoded[u][2]]
            with Tape() as tape:
                E = fuse_embeddings(model, phoneme_ids, style_ids)
                pred = model.predict_log_durations(E, dropout=config.dropout, rng=rng)
                loss = duration_mae(pred, durations)
                if targets is not None:
                    mse = _decoder_loss(model, E, batch, encoded, targets)
                    loss = add(loss, mul(mse, config.mse_weight))
                grads = tape.backward(loss, model.params)
            grads, _ = clip_grad_norm(grads, config.clip_norm)
            adam_step(model.params, grads, state, config.learning_rate)
            epoch_total += loss.item() * len(batch)
        loss_curve.append(epoch_total / len(train_ids))
        logger.info("epoch %d/%d duration loss %.4f", epoch, config.epochs, loss_curve[-1])

    report = _holdout_report(model, train_ids, holdout_ids, usable, styles)
    if report.mean_abs_frame_error is not None:
        logger.info(
            "held-out duration error %.3f +/- %.3f frames over %d utterances",
            report.mean_abs_frame_error,
            report.std_abs_frame_error,
            len(holdout_ids),
        )
    if checkpoint_dir is not None:
        model.save(
            Path(checkpoint_dir) / "duration",
            loss_history=loss_curve,
            train_config=config.to_dict(),
            report=report.to_dict(),
        )
    return DurationTrainingResult(model=model, loss_curve=loss_curve, report=report)


def _decoder_loss(
    model: DurationModel,
    E: Tensor,
    batch: Sequence[str],
    encoded: Mapping[str, tuple[np.ndarray, np.ndarray, DurationSequence]],
    targets: Mapping[str, TargetFeature],
) -> Tensor:
    total: Tensor | None = None
    count = 0
    offset = 0
    for u in batch:
        n = len(encoded[u][0])
        if u in targets:
            expanded = length_regulate(E[offset : offset + n], encoded[u][2])
            term = feature_mse(model.decode_frames(expanded), targets[u].values.astype(model.dtype))
            total = term if total is None else add(total, term)
            count += 1
        offset += n
    if total is None:
        return Tensor(np.zeros((), dtype=model.dtype))
    return mul(total, 1.0 / count)


def _holdout_report(
    model: DurationModel,
    train_ids: list[str],
    holdout_ids: list[str],
    records: Mapping[str, AlignmentRecord],
    styles: Mapping[str, tuple[str, ...]],
) -> DurationReport:
    errors: list[int] = []
    for u in holdout_ids:
        predicted = predict_durations(model, records[u].phonemes, styles[u])
        errors.extend(np.abs(predicted.as_array() - records[u].durations.as_array()).tolist())
    return DurationReport(
        train_utterances=train_ids,
        holdout_utterances=holdout_ids,
        mean_abs_frame_error=float(np.mean(errors)) if errors else None,
        std_abs_frame_error=float(np.std(errors)) if errors else None,
    )
