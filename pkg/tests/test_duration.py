import numpy as np
import pytest

from duration_aligner.alignment import alignments_from_manifest
from duration_aligner.autodiff import Tape, Tensor, tensor_sum
from duration_aligner.ctc import DurationSequence, pda
from duration_aligner.duration import (
    DurationModel,
    DurationTrainConfig,
    duration_mae,
    feature_mse,
    fuse_embeddings,
    length_regulate,
    predict_durations,
    train_duration_model,
    tts_loss,
)
from duration_aligner.errors import ConfigurationError, ContractError, FormatError, TrainingError
from duration_aligner.features import FeatureMatrix
from duration_aligner.inventory import PhonemeInventory

from .conftest import make_manifest, one_hot_log_probs

E = np.array([[1.0, 10.0], [2.0, 20.0]])


# --- length_regulate tests ---


def test_length_regulate_repeats_rows():
    out = length_regulate(E, [2, 3])
    np.testing.assert_array_equal(out.numpy(), [E[0], E[0], E[1], E[1], E[1]])


def test_length_regulate_zero_duration():
    np.testing.assert_array_equal(length_regulate(E, [0, 4]).numpy(), [E[1]] * 4)


def test_length_regulate_random_durations(rng):
    table = rng.normal(size=(6, 3))
    for _ in range(50):
        counts = rng.integers(0, 5, size=6)
        out = length_regulate(table, counts.tolist()).numpy()
        assert out.shape == (counts.sum(), 3)
        np.testing.assert_array_equal(out, np.repeat(table, counts, axis=0))


def test_length_regulate_pda_durations_cover_frames(rng):
    labels = [3, 0, 0, 3, 1, 1, 1, 3, 2, 3, 3]
    durations = pda(one_hot_log_probs(labels, 4), [0, 1, 2])
    assert isinstance(durations, DurationSequence)
    out = length_regulate(rng.normal(size=(3, 2)), durations)
    assert out.shape[0] == len(labels)


def test_length_regulate_gradient_sums_repeats():
    table = Tensor(E.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(length_regulate(table, [2, 3]))
    np.testing.assert_array_equal(tape.backward(loss, {"E": table})["E"], [[2, 2], [3, 3]])


@pytest.mark.parametrize("durations", [[1], [1, -1]], ids=["length", "negative"])
def test_length_regulate_invalid(durations):
    with pytest.raises(ContractError):
        length_regulate(E, durations)


# --- loss tests ---


def test_tts_loss_constant_offset():
    reference = np.arange(12.0).reshape(3, 4)
    durations = [1, 3]
    loss = tts_loss(reference + 1.0, reference, np.log1p(durations), durations)
    assert loss.item() == pytest.approx(1.0)


def test_tts_loss_accepts_feature_matrices():
    values = np.ones((2, 3))
    H = FeatureMatrix(values, "latent", 0.01)
    assert tts_loss(H, H, np.log1p([3.0]), [3]).item() == pytest.approx(0.0)


def test_duration_mae_is_log_domain():
    assert duration_mae(np.zeros(2), [0, np.e - 1]).item() == pytest.approx(0.5)


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        duration_mae(np.zeros(3), [1, 2])
    with pytest.raises(ContractError):
        feature_mse(np.zeros((2, 3)), np.zeros((2, 4)))


# --- model tests ---

INVENTORY = PhonemeInventory(("a", "b", "c"))


def test_fused_embeddings_sum():
    model = DurationModel(INVENTORY, ["1", "2"], embedding_dim=4, hidden_dim=3)
    fused = fuse_embeddings(model, [2, 0], [1, 1]).numpy()
    phonemes = model.params["phoneme_embedding"].numpy()
    styles = model.params["style_embedding"].numpy()
    np.testing.assert_allclose(fused, [phonemes[2] + styles[1], phonemes[0] + styles[1]])
    with pytest.raises(ContractError):
        fuse_embeddings(model, [0, 1], [0])


def test_tts_loss_gradient_matches_finite_differences(rng):
    model = DurationModel(
        INVENTORY,
        ["1", "2"],
        embedding_dim=3,
        hidden_dim=4,
        target_dim=2,
        precision="float64",
        seed=4,
    )
    phoneme_ids, style_ids, durations = [0, 2, 1], [1, 0, 1], [2, 1, 3]
    reference = rng.normal(size=(2, sum(durations)))

    def loss():
        E = fuse_embeddings(model, phoneme_ids, style_ids)
        frames = model.decode_frames(length_regulate(E, durations))
        return tts_loss(frames, reference, model.predict_log_durations(E), durations)

    with Tape() as tape:
        grads = tape.backward(loss(), model.params)

    eps = 1e-5
    for name, param in model.params.items():
        flat = param.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            original = flat[i]
            flat[i] = original + eps
            plus = loss().item()
            flat[i] = original - eps
            minus = loss().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, name


def test_predict_durations_at_least_one_frame():
    model = DurationModel(INVENTORY, ["_"], embedding_dim=4, hidden_dim=3)
    model.params["predictor.b2"].data[...] = -5.0
    model.params["predictor.W2"].data[...] = 0.0
    assert predict_durations(model, ["a", "b"]).durations == (1, 1)
    model.params["predictor.b2"].data[...] = np.log1p(6.0)
    assert predict_durations(model, ["a", "b", "c"]).durations == (6, 6, 6)


def test_unknown_style():
    model = DurationModel(INVENTORY, ["_"])
    with pytest.raises(ContractError, match="Style"):
        predict_durations(model, ["a"], ["˥"])


def test_checkpoint_roundtrip(tmp_path):
    model = DurationModel(INVENTORY, ["1", "2"], embedding_dim=4, hidden_dim=3, target_dim=5)
    model.save(tmp_path / "duration")
    loaded, metadata = DurationModel.load(tmp_path / "duration")
    assert metadata["target_dim"] == 5
    assert loaded.styles == ("1", "2")
    for name, tensor in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].numpy(), tensor.numpy())
    assert predict_durations(loaded, ["c"], ["2"]) == predict_durations(model, ["c"], ["2"])


def test_load_rejects_acoustic_checkpoint(tmp_path):
    DurationModel(INVENTORY, ["_"]).save(tmp_path / "x", kind="asr")
    with pytest.raises(FormatError):
        DurationModel.load(tmp_path / "x")


# --- training tests ---


def _constant_corpus(n_utterances=20, duration=5):
    rng = np.random.default_rng(8)
    rows = []
    for i in range(n_utterances):
        phonemes = rng.choice(["a", "b", "c"], size=int(rng.integers(2, 6))).tolist()
        rows.append((f"u{i:02d}", phonemes, [duration] * len(phonemes)))
    manifest = make_manifest(*rows)
    return manifest, alignments_from_manifest(manifest, 0.01)


def test_learns_constant_durations():
    manifest, records = _constant_corpus()
    config = DurationTrainConfig(
        embedding_dim=8,
        hidden_dim=16,
        epochs=150,
        learning_rate=0.02,
        dropout=0.0,
        holdout_fraction=0.25,
        seed=1,
    )
    result = train_duration_model(records, manifest, config)
    assert len(result.report.holdout_utterances) == 5
    assert result.report.mean_abs_frame_error < 0.5
    assert result.loss_curve[-1] < result.loss_curve[0]


def test_training_is_deterministic(tmp_path):
    manifest, records = _constant_corpus(8)
    config = DurationTrainConfig(embedding_dim=4, hidden_dim=4, epochs=3, seed=2)
    first = train_duration_model(records, manifest, config, checkpoint_dir=tmp_path / "a")
    second = train_duration_model(records, manifest, config, checkpoint_dir=tmp_path / "b")
    assert first.loss_curve == second.loss_curve
    assert first.report == second.report
    for name, tensor in first.model.params.items():
        np.testing.assert_array_equal(second.model.params[name].numpy(), tensor.numpy())
    for suffix in (".tnsr", ".json"):
        assert (tmp_path / "a" / f"duration{suffix}").read_bytes() == (
            tmp_path / "b" / f"duration{suffix}"
        ).read_bytes()


@pytest.mark.parametrize("fraction", [0.5, 0.6, 0.9])
def test_single_record_stays_in_training(fraction):
    manifest, records = _constant_corpus(1)
    config = DurationTrainConfig(
        embedding_dim=4, hidden_dim=4, epochs=1, holdout_fraction=fraction
    )
    result = train_duration_model(records, manifest, config)
    assert result.report.train_utterances == ["u00"]
    assert result.report.holdout_utterances == []
    assert result.report.mean_abs_frame_error is None
    assert len(result.loss_curve) == 1


def test_training_with_frame_targets(tmp_path):
    manifest, records = _constant_corpus(6, duration=3)
    rng = np.random.default_rng(0)
    targets = {
        r.utterance_id: FeatureMatrix(rng.normal(size=(4, r.total_frames)), "latent", 0.01)
        for r in records[:4]
    }
    config = DurationTrainConfig(embedding_dim=4, hidden_dim=4, epochs=2, holdout_fraction=0.0)
    result = train_duration_model(
        records, manifest, config, targets=targets, checkpoint_dir=tmp_path
    )
    assert result.model.target_dim == 4
    assert all(np.isfinite(result.loss_curve))
    assert result.report.mean_abs_frame_error is None
    loaded, metadata = DurationModel.load(tmp_path / "duration")
    assert metadata["report"]["holdout_utterances"] == []
    assert loaded.target_dim == 4


def test_frame_targets_must_match_durations():
    manifest, records = _constant_corpus(3, duration=3)
    bad = records[0]
    targets = {bad.utterance_id: FeatureMatrix(np.zeros((2, bad.total_frames + 1)), "latent", 0.01)}
    with pytest.raises(ContractError, match="frames"):
        train_duration_model(records, manifest, DurationTrainConfig(epochs=1), targets=targets)


def test_records_must_cover_manifest():
    manifest, records = _constant_corpus(3)
    other = make_manifest(("z1", ["a"], None))
    with pytest.raises(TrainingError):
        train_duration_model(records, other)


@pytest.mark.parametrize(
    "kwargs", [{"holdout_fraction": 1.0}, {"epochs": 0}, {"learning_rate": 0.0}]
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        DurationTrainConfig(**kwargs)
