import numpy as np
import pytest

from duration_aligner.acoustic import (
    AsrModel,
    TrainConfig,
    asr_forward,
    decode_greedy,
    train_asr,
    warmup_learning_rate,
)
from duration_aligner.autodiff import Tape
from duration_aligner.ctc import TargetSequence
from duration_aligner.errors import (
    ConfigurationError,
    FormatError,
    ShapeError,
    TrainingError,
)
from duration_aligner.features import FeatureExtractor, FeatureMatrix, extract_corpus
from duration_aligner.inventory import PhonemeInventory
from duration_aligner.manifest import Manifest

from .conftest import SMALL_FEATURES, make_manifest

INVENTORY = PhonemeInventory(("a", "b"))


def _features(values, source_id=""):
    return FeatureMatrix(values, kind="melspec", frame_hop_seconds=0.01, source_id=source_id)


def _tiny_model(seed=0, precision="float64"):
    return AsrModel(INVENTORY, input_dim=3, hidden_dim=4, precision=precision, seed=seed)


def _swap_halves(W, H):
    return np.concatenate([W[H:], W[:H]], axis=0)


# --- forward tests ---


def test_zero_parameters_give_uniform_output(rng):
    model = _tiny_model()
    zeros = {name: np.zeros(shape) for name, shape in model.param_shapes().items()}
    model = AsrModel(INVENTORY, input_dim=3, hidden_dim=4, params=zeros)
    out = asr_forward(model, _features(rng.normal(size=(3, 6))))
    assert out.log_probs.shape == (3, 6)
    np.testing.assert_allclose(out.log_probs, -np.log(3), rtol=1e-6)


def test_single_frame(rng):
    out = asr_forward(_tiny_model(), _features(rng.normal(size=(3, 1))))
    assert out.log_probs.shape == (3, 1)
    assert out.is_normalized()
    assert out.frame_hop_seconds == 0.01


def test_time_reversal_symmetry(rng):
    """Swapping the directions maps a reversed input to the reversed output."""
    model = _tiny_model(seed=5)
    H = model.hidden_dim
    state = model.state_dict()
    swapped = {}
    for name, value in state.items():
        if ".fwd." in name:
            swapped[name.replace(".fwd.", ".bwd.")] = value
        elif ".bwd." in name:
            swapped[name.replace(".bwd.", ".fwd.")] = value
        else:
            swapped[name] = value
    for name in ("lstm1.fwd.W", "lstm1.bwd.W", "proj.W"):
        swapped[name] = _swap_halves(swapped[name], H)
    mirrored = AsrModel(INVENTORY, input_dim=3, hidden_dim=H, params=swapped, precision="float64")

    x = rng.normal(size=(3, 7))
    forward = asr_forward(model, _features(x)).log_probs
    backward = asr_forward(mirrored, _features(x[:, ::-1])).log_probs
    np.testing.assert_allclose(backward[:, ::-1], forward, atol=1e-12)


def test_batching_matches_single_utterances(rng):
    model = _tiny_model(seed=2)
    inputs = [rng.normal(size=(3, t)) for t in (5, 2, 7)]
    batched = model.forward_batch(inputs)
    for x, out in zip(inputs, batched):
        (single,) = model.forward_batch([x])
        assert out.shape == (3, x.shape[1])
        np.testing.assert_allclose(out.numpy(), single.numpy(), atol=1e-12)


def test_input_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        asr_forward(_tiny_model(), _features(rng.normal(size=(4, 5))))


def test_decode_greedy_uses_symbols(rng):
    decoded = decode_greedy(_tiny_model(), _features(rng.normal(size=(3, 5))))
    assert set(decoded) <= {"a", "b"}


# --- gradient tests ---


def test_gradient_matches_finite_differences(rng):
    model = _tiny_model(seed=9)
    x = rng.normal(size=(3, 5))
    target = TargetSequence((0, 1), blank_id=INVENTORY.blank_id)
    with Tape() as tape:
        loss = model.batch_loss([x], [target])
        grads = tape.backward(loss, model.params)

    eps = 1e-5
    for name, param in model.params.items():
        flat = param.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            original = flat[i]
            flat[i] = original + eps
            plus = model.batch_loss([x], [target]).item()
            flat[i] = original - eps
            minus = model.batch_loss([x], [target]).item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, name


# --- checkpoint tests ---


def test_checkpoint_roundtrip_is_bit_identical(tmp_path, rng):
    model = AsrModel(INVENTORY, input_dim=3, hidden_dim=4, feature_config=SMALL_FEATURES)
    features = _features(rng.normal(size=(3, 6)))
    model.save(tmp_path / "asr", epoch=3)
    loaded, metadata = AsrModel.load(tmp_path / "asr")
    assert metadata["epoch"] == 3
    assert loaded.feature_config == SMALL_FEATURES
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(
        asr_forward(loaded, features).log_probs, asr_forward(model, features).log_probs
    )

    loaded.save(tmp_path / "again")
    assert (tmp_path / "again.tnsr").read_bytes() == (tmp_path / "asr.tnsr").read_bytes()


def test_load_rejects_other_checkpoints(tmp_path):
    model = _tiny_model()
    model.save(tmp_path / "asr", kind="duration")
    with pytest.raises(FormatError, match="not an acoustic"):
        AsrModel.load(tmp_path / "asr")


def test_parameter_shape_checked():
    model = _tiny_model()
    params = model.state_dict()
    params["proj.b"] = np.zeros((1, 5))
    with pytest.raises(ShapeError):
        AsrModel(INVENTORY, input_dim=3, hidden_dim=4, params=params)
    del params["proj.b"]
    with pytest.raises(FormatError):
        AsrModel(INVENTORY, input_dim=3, hidden_dim=4, params=params)


# --- training tests ---


def _random_corpus(rng, rows):
    manifest = make_manifest(*rows)
    features = {
        utterance_id: _features(rng.normal(size=(3, n_frames)), utterance_id)
        for (utterance_id, _, _), n_frames in zip(rows, [8, 6, 9, 2])
    }
    return manifest, features


ROWS = [
    ("u1", ["a", "b"], None),
    ("u2", ["b"], None),
    ("u3", ["a", "b", "a"], None),
]


def test_training_is_deterministic(rng):
    manifest, features = _random_corpus(rng, ROWS)
    config = TrainConfig(batch_size=2, epochs=2, hidden_dim=4, seed=4, precision="float64")
    first = train_asr(manifest, features, INVENTORY, config)
    second = train_asr(manifest, features, INVENTORY, config)
    assert first.loss_curve == second.loss_curve
    for name, value in first.model.state_dict().items():
        np.testing.assert_array_equal(value, second.model.state_dict()[name])


def test_training_writes_checkpoint(tmp_path, rng):
    manifest, features = _random_corpus(rng, ROWS)
    config = TrainConfig(batch_size=3, epochs=2, hidden_dim=4)
    result = train_asr(manifest, features, INVENTORY, config, checkpoint_dir=tmp_path)
    model, metadata = AsrModel.load(tmp_path / "asr")
    assert metadata["epoch"] == 2
    assert metadata["loss_history"] == pytest.approx(result.loss_curve)
    np.testing.assert_array_equal(model.state_dict()["proj.W"], result.model.state_dict()["proj.W"])


def test_infeasible_utterances_are_skipped(rng):
    rows = ROWS + [("u4", ["a", "a", "b"], None)]
    manifest, features = _random_corpus(rng, rows)
    with pytest.warns(UserWarning, match="Skipping utterance 'u4'"):
        result = train_asr(manifest, features, INVENTORY, TrainConfig(epochs=1, hidden_dim=4))
    assert result.skipped == ["u4"]


def test_all_infeasible(rng):
    manifest, features = _random_corpus(rng, [("u1", ["a", "a", "a", "a", "a"], None)])
    with pytest.warns(UserWarning), pytest.raises(TrainingError, match="too short"):
        train_asr(manifest, features, INVENTORY, TrainConfig(epochs=1))


def test_empty_manifest():
    with pytest.raises(TrainingError, match="empty"):
        train_asr(Manifest(entries=()), {}, INVENTORY)


def test_missing_features(rng):
    manifest, features = _random_corpus(rng, ROWS)
    del features["u2"]
    with pytest.raises(TrainingError, match="u2"):
        train_asr(manifest, features, INVENTORY, TrainConfig(epochs=1))


def test_training_reduces_loss(tiny_corpus):
    features, failures = extract_corpus(tiny_corpus, FeatureExtractor("melspec", SMALL_FEATURES))
    assert not failures
    inventory = PhonemeInventory.from_manifest(tiny_corpus)
    config = TrainConfig(
        batch_size=2,
        epochs=6,
        hidden_dim=8,
        dropout=0.0,
        peak_learning_rate=1e-2,
        warmup_steps=1,
    )
    result = train_asr(tiny_corpus, features, inventory, config)
    assert len(result.loss_curve) == 6
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert result.model.feature_kind == "melspec"


# --- config tests ---


def test_warmup_schedule():
    assert warmup_learning_rate(10, 1e-3, 10) == pytest.approx(1e-3)
    assert warmup_learning_rate(1, 1e-3, 10) == pytest.approx(1e-4)
    assert warmup_learning_rate(40, 1e-3, 10) == pytest.approx(5e-4)


@pytest.mark.parametrize(
    "kwargs",
    [{"batch_size": 0}, {"dropout": 1.0}, {"precision": "float16"}, {"epochs": 0}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_train_config_from_dict():
    assert TrainConfig.from_dict({"epochs": 3}).epochs == 3
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"momentum": 0.9})
