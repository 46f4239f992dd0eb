import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcurriculum import autodiff as ad
from dualcurriculum.optim import AdamState, adam_step, clip_grad_norm

from conftest import check_gradients

SHAPES = [(3,), (2, 5), (4, 3), (2, 3, 4)]


def leaf(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def test_tanh_derivative_at_zero():
    x = ad.Tensor(0.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tanh(x)
    grads = ad.backward(y, tape)
    assert grads[x] == pytest.approx(1.0, abs=0)


def test_matmul_sum_matches_finite_differences(rng):
    A, B = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    assert check_gradients(lambda: ad.sum_(A @ B), [A, B]) < 1e-4


def test_mse_of_identical_tensors_has_zero_gradient(rng):
    x = leaf(rng, (4, 3))
    with ad.Tape() as tape:
        loss = ad.mse(x, x)
    grads = ad.backward(loss, tape)
    assert loss.item() == 0.0
    assert np.all(grads[x] == 0.0)


@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_ops(rng, shape):
    a, b = leaf(rng, shape), leaf(rng, shape)
    w = rng.normal(size=shape)
    for fn in (lambda: ad.sum_(ad.mul(ad.add(a, b), w)),
               lambda: ad.sum_(ad.mul(ad.sub(a, b), w)),
               lambda: ad.sum_(ad.mul(ad.mul(a, b), w)),
               lambda: ad.sum_(ad.mul(ad.tanh(a), w)),
               lambda: ad.sum_(ad.mul(ad.sigmoid(a), w))):
        assert check_gradients(fn, [a, b]) < 1e-4


@pytest.mark.parametrize("shape", [(2, 3), (3, 1), (4, 5)])
def test_broadcast_add_mul(rng, shape):
    a = leaf(rng, (2,) + shape)
    b = leaf(rng, shape[-1:])
    w = rng.normal(size=(2,) + shape)
    assert check_gradients(lambda: ad.sum_(ad.mul(ad.mul(ad.add(a, b), b), w)), [a, b]) < 1e-4


@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (3, 4, 2), (5, 2, 6)])
def test_matmul(rng, m, k, n):
    A, B = leaf(rng, (m, k)), leaf(rng, (k, n))
    w = rng.normal(size=(m, n))
    assert check_gradients(lambda: ad.sum_(ad.mul(A @ B, w)), [A, B]) < 1e-4


@pytest.mark.parametrize("shape", [(2, 3, 4), (1, 2, 2), (3, 5, 2)])
def test_batched_matmul_and_transpose(rng, shape):
    A = leaf(rng, shape)
    B = leaf(rng, shape)
    w = rng.normal(size=shape[:1] + (shape[1], shape[1]))
    assert check_gradients(lambda: ad.sum_(ad.mul(A @ ad.transpose(B), w)), [A, B]) < 1e-4


@pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 6)])
def test_softmax(rng, shape):
    x = leaf(rng, shape, 2.0)
    w = rng.normal(size=shape)
    assert check_gradients(lambda: ad.sum_(ad.mul(ad.softmax(x), w)), [x]) < 1e-4
    np.testing.assert_allclose(ad.softmax(x).values.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 6)])
def test_layer_norm(rng, shape):
    x = leaf(rng, shape, 3.0)
    g, b = leaf(rng, shape[-1:]), leaf(rng, shape[-1:])
    w = rng.normal(size=shape)
    assert check_gradients(lambda: ad.sum_(ad.mul(ad.layer_norm(x, g, b), w)), [x, g, b]) < 1e-4


@pytest.mark.parametrize("shape", [(6,), (3, 4), (2, 3, 5)])
def test_concat_and_slice(rng, shape):
    a, b = leaf(rng, shape), leaf(rng, shape)
    w = rng.normal(size=shape[:-1] + (shape[-1],))

    def fn():
        joined = ad.concat([a, b], axis=-1)
        return ad.sum_(ad.mul(ad.slice_(joined, (..., slice(1, 1 + shape[-1]))), w))

    assert check_gradients(fn, [a, b]) < 1e-4


@pytest.mark.parametrize("shape,axis", [((5,), None), ((3, 4), 0), ((2, 3, 4), -1), ((2, 3, 4), (1, 2))])
def test_reductions(rng, shape, axis):
    x = leaf(rng, shape)
    for red in (ad.sum_, ad.mean):
        out_shape = np.sum(np.zeros(shape), axis=axis).shape
        w = rng.normal(size=out_shape)
        assert check_gradients(lambda: ad.sum_(ad.mul(red(x, axis=axis), w)), [x]) < 1e-4


@pytest.mark.parametrize("shape", [(4,), (3, 2), (2, 3, 4)])
def test_squared_error_losses(rng, shape):
    p, t = leaf(rng, shape), leaf(rng, shape)
    w = rng.normal(size=shape[:1])
    assert check_gradients(lambda: ad.mse(p, t), [p, t]) < 1e-4
    assert check_gradients(lambda: ad.sum_(ad.mul(ad.per_instance_mse(p, t), w)), [p, t]) < 1e-4


def test_per_instance_mse_example():
    pred = ad.Tensor([[0.0, 0.0], [3.0, 3.0]])
    target = ad.Tensor(np.zeros((2, 2)))
    np.testing.assert_array_equal(ad.per_instance_mse(pred, target).values, [0.0, 9.0])
    assert ad.mse(pred, target).item() == 4.5
    assert ad.mse(target, target).item() == 0.0


def test_per_instance_mse_consistent_with_mse(rng):
    pred, target = rng.normal(size=(8, 24)), rng.normal(size=(8, 24))
    per = ad.per_instance_mse(pred, target).values
    assert abs(per.mean() - ad.mse(pred, target).item()) < 1e-12


def test_per_instance_mse_batch_axis(rng):
    pred, target = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(ad.per_instance_mse(pred, target, batch_axis=1).values,
                               ((pred - target) ** 2).mean(axis=0), rtol=1e-14)


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng, (3,))
    with ad.Tape() as tape:
        y = ad.tanh(x)
    with pytest.raises(ValueError):
        ad.backward(y, tape)


def test_tape_records_in_topological_order(rng):
    x = leaf(rng, (3,))
    with ad.Tape() as tape:
        y = ad.sum_(ad.tanh(ad.mul(x, x)))
    seen = set()
    for node in tape.nodes:
        for p in node.parents:
            assert p is x or id(p) in seen or not p.requires_grad
        seen.add(id(node.out))
    assert tape.nodes[-1].out is y


def test_no_recording_outside_tape(rng):
    x = leaf(rng, (3,))
    y = ad.tanh(x)
    assert not y.requires_grad


def test_non_finite_fails_fast():
    x = ad.Tensor([1.0, np.inf], requires_grad=True)
    with ad.Tape():
        with pytest.raises(ad.NonFiniteError, match="tanh|add"):
            ad.add(x, 1.0)


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, (4,))
    assert check_gradients(lambda: ad.sum_(ad.mul(ad.tanh(x), ad.tanh(x))), [x]) < 1e-4


# ---------------------------------------------------------------------------
# clipping and Adam


def test_clip_three_four_five():
    out, norm = clip_grad_norm({"g": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(out["g"], [0.6, 0.8], rtol=1e-15)


def test_clip_below_threshold_unchanged():
    g = np.array([0.3, 0.4])
    out, norm = clip_grad_norm({"g": g}, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(out["g"], g)


def test_clip_two_tensors_scaled_jointly():
    grads = {"a": np.array([6.0, 0.0]), "b": np.array([[0.0], [8.0]])}
    out, norm = clip_grad_norm(grads, 2.0)
    assert norm == 10.0
    for k in grads:
        np.testing.assert_allclose(out[k], grads[k] * 0.2, rtol=1e-15)
    after = np.sqrt(sum(np.sum(v * v) for v in out.values()))
    assert abs(after - 2.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(0.01, 50))
def test_clip_idempotent(values, max_norm):
    grads = {"g": np.array(values)}
    once, _ = clip_grad_norm(grads, max_norm)
    twice, _ = clip_grad_norm(once, max_norm)
    np.testing.assert_allclose(twice["g"], once["g"], rtol=1e-12, atol=0)


def test_adam_first_step():
    p = ad.Tensor([0.5], requires_grad=True)
    state = AdamState(learning_rate=1e-3, clip_max_norm=None)
    adam_step({"p": p}, {"p": np.array([1.0])}, state)
    # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8)
    assert p.values[0] == pytest.approx(expected, abs=1e-15)
    assert 0.5 - p.values[0] == pytest.approx(9.99999e-4, rel=1e-6)
    assert state.step_count == 1


def test_adam_two_steps_against_hand_oracle():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    p = ad.Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState(learning_rate=lr, clip_max_norm=None)
    gs = [np.array([0.5, -1.0]), np.array([-0.25, 2.0])]
    theta, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate(gs, start=1):
        adam_step({"p": p}, {"p": g}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p.values, theta, rtol=1e-14)


def test_adam_clips_before_moments():
    p = ad.Tensor([0.0, 0.0], requires_grad=True)
    state = AdamState(learning_rate=1e-3, clip_max_norm=1.0)
    norm = adam_step({"p": p}, {"p": np.array([3.0, 4.0])}, state)
    assert norm == 5.0
    np.testing.assert_allclose(state.m["p"], 0.1 * np.array([0.6, 0.8]), rtol=1e-14)


def test_adam_zero_gradient():
    p = ad.Tensor([1.0, 2.0], requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.values, [1.0, 2.0])
    assert state.step_count == 1


def test_adam_lr_zero_updates_moments_only(rng):
    init = rng.normal(size=(3, 2))
    p = ad.Tensor(init.copy(), requires_grad=True)
    state = AdamState(learning_rate=0.0)
    for _ in range(3):
        adam_step({"p": p}, {"p": rng.normal(size=(3, 2))}, state)
    assert np.array_equal(p.values, init)
    assert np.any(state.m["p"] != 0) and np.any(state.v["p"] != 0)
    assert state.step_count == 3
    assert state.m["p"].shape == state.v["p"].shape == init.shape


def test_adam_rejects_bad_gradients():
    p = ad.Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState())
    with pytest.raises(KeyError):
        adam_step({"p": p}, {"q": np.zeros(1)}, AdamState())
