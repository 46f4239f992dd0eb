import numpy as np
import pytest

from dualcurriculum import autodiff as ad
from dualcurriculum.data import SynthSpec, WindowInstance, split_series, synth_generate
from dualcurriculum.models import (AttentionForecaster, ModelConfig, RecurrentForecaster, TrainConfig,
                                   build_model, evaluate_mse, extract_embeddings, forward, load_checkpoint,
                                   per_instance_losses, predict, save_checkpoint, train_representation)

from conftest import check_gradients

# final train MSE of the reference run on a noise-free sinusoid (T=300, L=12, H=4, d=32,
# 30 epochs, batch 8, lr 1e-3, seed 0), times two
SINUSOID_BOUND = {"lstm": 2 * 3.42e-5, "attention": 2 * 1.15e-4}


def instances(rng, n, L=6, C=2, H=3, Ct=1):
    return [WindowInstance(i, rng.normal(size=(L, C)), rng.normal(size=(H, Ct)), i) for i in range(n)]


def test_zero_recurrent_gives_zero_cell_state():
    cfg = ModelConfig("lstm", 5, 3, 2, 1, 8)
    m = RecurrentForecaster.init(cfg, 0, zero=True)
    m.params["b_out"].values = np.array([0.25, -1.5])
    pred, c = forward(m, np.zeros((5, 3)))
    np.testing.assert_array_equal(c, np.zeros(8))
    np.testing.assert_array_equal(pred.reshape(-1), [0.25, -1.5])


def test_attention_single_position_weight_is_one(rng):
    m = AttentionForecaster.init(ModelConfig("attention", 1, 2, 2, 1, 8), 3)
    m.forward_batch(rng.normal(size=(4, 1, 2)))
    np.testing.assert_array_equal(m.last_attention, np.ones((4, 1, 1)))


def test_attention_rows_sum_to_one(rng):
    m = AttentionForecaster.init(ModelConfig("attention", 7, 2, 2, 1, 8), 3)
    m.forward_batch(rng.normal(size=(5, 7, 2)))
    assert np.max(np.abs(m.last_attention.sum(axis=-1) - 1.0)) < 1e-9


def test_removing_residual_changes_output(rng):
    cfg = ModelConfig("attention", 6, 2, 2, 1, 8)
    x = rng.normal(size=(3, 6, 2))
    with_res = AttentionForecaster.init(cfg, 5).forward_batch(x)[0].values
    without = AttentionForecaster.init(cfg, 5, residual=False).forward_batch(x)[0].values
    assert not np.allclose(with_res, without)


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_order_sensitive(kind, rng):
    m = build_model(ModelConfig(kind, 6, 2, 2, 1, 8), 1)
    x = rng.normal(size=(6, 2))
    assert not np.allclose(forward(m, x)[0], forward(m, x[::-1])[0])


@pytest.mark.parametrize("B,C,d", [(1, 1, 2), (2, 3, 4), (3, 2, 5)])
def test_recurrent_gradient_three_steps(B, C, d):
    rng = np.random.default_rng(B * 100 + d)
    m = RecurrentForecaster.init(ModelConfig("lstm", 3, C, 2, 1, d), B)
    m.params["b"].values = rng.normal(scale=0.5, size=m.params["b"].shape)
    x = rng.normal(size=(B, 3, C))
    y = rng.normal(size=(B, 2))
    w = rng.normal(size=(B, d))

    def loss():
        pred, c = m.forward_batch(x)
        return ad.add(ad.mse(pred, y), ad.sum_(ad.mul(c, w)))

    assert check_gradients(loss, list(m.params.values())) < 1e-4


@pytest.mark.parametrize("B,L,C,d", [(1, 2, 1, 2), (2, 3, 2, 4), (2, 4, 3, 3)])
def test_attention_gradient(B, L, C, d):
    rng = np.random.default_rng(B * 1000 + L * 10 + d)
    m = AttentionForecaster.init(ModelConfig("attention", L, C, 2, 1, d), B)
    for name, p in m.params.items():
        if name.startswith("b_") or name.endswith("shift"):
            p.values = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(B, L, C))
    y = rng.normal(size=(B, 2))

    def loss():
        pred, emb = m.forward_batch(x)
        return ad.add(ad.mse(pred, y), ad.mean(ad.mul(emb, emb)))

    assert check_gradients(loss, list(m.params.values())) < 1e-4


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_zero_lr_leaves_parameters(kind, rng):
    data = instances(rng, 20)
    m = build_model(ModelConfig(kind, 6, 2, 3, 1, 8), 0)
    before = m.get_state()
    _, curve = train_representation(m, data, TrainConfig(epochs=3, batch_size=4, lr=0.0))
    for k, v in m.get_state().items():
        assert np.array_equal(v, before[k])
    assert max(curve) - min(curve) <= 1e-12


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_training_deterministic(kind, rng):
    data = instances(rng, 16)
    cfg = ModelConfig(kind, 6, 2, 3, 1, 8)
    runs = [train_representation(build_model(cfg, 4), data, TrainConfig(epochs=2, batch_size=5, seed=9))
            for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for k, v in runs[0][0].get_state().items():
        assert np.array_equal(v, runs[1][0].get_state()[k])


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_fits_clean_sinusoid(kind):
    series = synth_generate(SynthSpec(T=300, noise_std=0.0, trend=0.0))
    bundle = split_series(series, 12, 4, 1)
    m = build_model(ModelConfig(kind, 12, 2, 4, 1, 32), 0)
    _, curve = train_representation(m, bundle.train, TrainConfig(epochs=30, batch_size=8, lr=1e-3, seed=0))
    assert curve[-1] < 0.1
    assert curve[-1] < SINUSOID_BOUND[kind]
    assert curve[-1] < curve[0]


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_embedding_table_alignment(kind, rng):
    data = instances(rng, 5)
    m = build_model(ModelConfig(kind, 6, 2, 3, 1, 8), 2)
    table = extract_embeddings(m, data)
    assert table.embeddings.shape == (5, 8)
    np.testing.assert_array_equal(table.instance_index, np.arange(5))
    for w in data:
        np.testing.assert_allclose(table.embeddings[w.index], forward(m, w.x)[1], rtol=0, atol=1e-14)


def test_duplicate_instances_share_embedding(rng):
    data = instances(rng, 6)
    data[4] = WindowInstance(4, data[1].x.copy(), data[1].y, 4)
    m = build_model(ModelConfig("lstm", 6, 2, 3, 1, 8), 2)
    emb = extract_embeddings(m, data).embeddings
    np.testing.assert_array_equal(emb[1], emb[4])


def test_per_instance_losses_match_loop(rng):
    data = instances(rng, 7)
    m = build_model(ModelConfig("attention", 6, 2, 3, 1, 8), 2)
    losses = per_instance_losses(m, data)
    for w in data:
        pred, _ = forward(m, w.x)
        assert losses[w.index] == pytest.approx(np.mean((pred - w.y) ** 2), rel=1e-12)
    assert evaluate_mse(m, data) == pytest.approx(losses.mean(), rel=1e-12)


class _Oracle:
    """Stub forecaster that returns each instance's own target."""

    def __init__(self, data):
        self.lookup = {w.x.tobytes(): w.y.reshape(-1) for w in data}
        self.config = ModelConfig("stub", 6, 2, 3, 1, 1)

    def forward_batch(self, x):
        pred = np.stack([self.lookup[row.tobytes()] for row in x])
        return ad.Tensor(pred), ad.Tensor(np.zeros((len(x), 1)))


def test_oracle_stub_has_zero_loss(rng):
    data = instances(rng, 9)
    np.testing.assert_array_equal(per_instance_losses(_Oracle(data), data), np.zeros(9))


def test_losses_scale_quadratically(rng):
    data = instances(rng, 6)
    oracle = _Oracle(data)
    base = predict(oracle, data)[0]
    shifted = [WindowInstance(w.index, w.x, w.y + 1.0, w.origin) for w in data]
    doubled = [WindowInstance(w.index, w.x, w.y + 2.0, w.origin) for w in data]
    a, b = per_instance_losses(oracle, shifted), per_instance_losses(oracle, doubled)
    np.testing.assert_allclose(a, 1.0)
    np.testing.assert_allclose(b, 4.0 * a)
    assert base.shape == (6, 3)


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_checkpoint_round_trip(kind, tmp_path, rng):
    m = build_model(ModelConfig(kind, 6, 2, 3, 1, 8), 7)
    back = load_checkpoint(save_checkpoint(m, tmp_path / "m.json"))
    assert back.config == m.config
    for k, v in m.get_state().items():
        assert np.array_equal(back.get_state()[k], v)
    x = rng.normal(size=(6, 2))
    np.testing.assert_array_equal(forward(back, x)[0], forward(m, x)[0])


def test_bad_input_shape():
    m = build_model(ModelConfig("lstm", 6, 2, 3, 1, 8), 0)
    with pytest.raises(ValueError):
        m.forward_batch(np.zeros((1, 5, 2)))
    with pytest.raises(ValueError):
        build_model(ModelConfig("gru", 6, 2, 3, 1, 8), 0)


def test_nan_input_reports_context(rng):
    data = instances(rng, 8)
    data[3] = WindowInstance(3, np.full((6, 2), np.nan), data[3].y, 3)
    with pytest.raises(ad.NonFiniteError, match="epoch 0"):
        train_representation(build_model(ModelConfig("lstm", 6, 2, 3, 1, 4), 0), data,
                             TrainConfig(epochs=1, batch_size=4))
