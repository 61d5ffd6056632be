import numpy as np
import pytest
import torch

from exprflow.dataset import synth_neutral_set
from exprflow.errors import StateError, ValidationError
from exprflow.ned import NEDConfig, NEDModel, flame_zero_neutral, generate_neutral, reconstruction_mse, train_ned


@pytest.fixture(scope="module")
def neutral():
    e, p, center, std = synth_neutral_set(500, seed=0)
    return np.concatenate([e, p], 1), center, std


@pytest.fixture(scope="module")
def trained(neutral):
    return train_ned(neutral[0], NEDConfig(epochs=100, seed=0))


def test_architecture_depths():
    m = NEDModel()
    for stack in (m.encoder, m.pose_decoder, m.expr_decoder):
        assert sum(isinstance(layer, torch.nn.Linear) for layer in stack) == 4


def test_training_reduces_mse(trained):
    assert trained.history[-1] < 0.1 * trained.history[0]
    assert len(trained.history) == 100


def test_training_is_seeded(neutral):
    a = train_ned(neutral[0][:64], NEDConfig(epochs=3, seed=4))
    b = train_ned(neutral[0][:64], NEDConfig(epochs=3, seed=4))
    for (k, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), k


def test_memorises_single_sample(neutral):
    x = np.tile(neutral[0][0], (50, 1))
    model = train_ned(x, NEDConfig(epochs=200, seed=0))
    assert reconstruction_mse(model, x).max() < 1e-4


def test_accepts_pairs(neutral):
    data = neutral[0][:8]
    model = train_ned([(row[:50], row[50:]) for row in data], NEDConfig(epochs=1))
    assert bool(model.fitted)


@pytest.mark.parametrize("bad", [np.zeros((0, 56)), np.zeros((1, 56)), np.zeros((4, 55))])
def test_rejects_bad_input(bad):
    with pytest.raises(ValidationError):
        train_ned(bad, NEDConfig(epochs=1))


def test_generate_dims_and_determinism(trained):
    e, theta = generate_neutral(trained, 7)
    assert e.shape == (50,) and theta.shape == (6,)
    e2, theta2 = generate_neutral(trained, 7)
    assert np.array_equal(e, e2) and np.array_equal(theta, theta2)
    assert np.isfinite(e).all() and np.isfinite(theta).all()


def test_generated_neutrals_stay_in_cluster(trained, neutral):
    _, center, std = neutral
    inside = 0
    for seed in range(100):
        e, theta = generate_neutral(trained, seed)
        inside += np.all(np.abs(np.r_[e, theta] - center) <= 3 * std)
    assert inside >= 95


def test_reconstruction_beats_random_latent(trained, neutral):
    x = neutral[0]
    recon = reconstruction_mse(trained, x)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        z = 3 * torch.randn(len(x), trained.latent_dim, generator=g)
        rand = torch.mean((trained.decode(z) - torch.as_tensor(x, dtype=torch.float32)) ** 2, 1).numpy()
    assert np.median(recon) < np.median(rand)


def test_untrained_model_raises():
    with pytest.raises(StateError):
        generate_neutral(NEDModel(), 0)


def test_save_load(tmp_path, trained):
    trained.save(tmp_path / "ned")
    loaded = NEDModel.load(tmp_path / "ned")
    a, b = generate_neutral(trained, 3), generate_neutral(loaded, 3)
    assert np.array_equal(a[0], b[0]) and loaded.history == pytest.approx(trained.history)


def test_flame_zero_neutral():
    e, theta = flame_zero_neutral([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    assert not e.any()
    assert theta.tolist() == [0.1, 0.2, 0.3, 0.0, 0.0, 0.0]
