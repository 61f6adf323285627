import numpy as np
import pytest

from maneuver_pooling.errors import ShapeError, UsageError
from maneuver_pooling.nn import (
    LstmParams, ParamStore, Tensor, affine, clip, concat, cumsum, conv2d, exp, gather_rows, grad_check,
    leaky_relu, log, log_softmax, lstm_sequence, lstm_step, maxpool2d, padded_max,
    scatter_rows, sigmoid, softmax, square, sumpool2d, tanh,
)
from maneuver_pooling.nn import checkpoint
from maneuver_pooling.nn.optim import Adam, clip_global_norm

TOL = 1e-4
SEEDS = range(10)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def lstm_params(rng, n_in, hidden):
    store = ParamStore(rng)
    p = store.lstm("cell", n_in, hidden)
    return store, p


# lstm_step

def test_lstm_zero_params_zero_state():
    p = LstmParams(Tensor(np.zeros((8, 3))), Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    h, c = lstm_step(p, Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    assert np.array_equal(h.data, np.zeros((1, 2)))
    assert np.array_equal(c.data, np.zeros((1, 2)))


def test_lstm_zero_params_unit_cell():
    p = LstmParams(Tensor(np.zeros((8, 3))), Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    h, c = lstm_step(p, Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))))
    np.testing.assert_allclose(c.data, 0.5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5), rtol=0, atol=1e-15)


def test_lstm_step_shape_error_names_both_shapes():
    rng = np.random.default_rng(0)
    _, p = lstm_params(rng, 3, 4)
    with pytest.raises(ShapeError, match=r"\(2, 5\).*\(16, 3\)"):
        lstm_step(p, Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


def test_lstm_step_deterministic():
    rng = np.random.default_rng(3)
    _, p = lstm_params(rng, 3, 4)
    x, h, c = (Tensor(rng.normal(size=(2, n))) for n in (3, 4, 4))
    a = lstm_step(p, x, h, c)
    b = lstm_step(p, x, h, c)
    assert all(np.array_equal(u.data, v.data) for u, v in zip(a, b))


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_step_gradients(seed):
    rng = np.random.default_rng(seed)
    store, p = lstm_params(rng, 3, 4)
    x, h, c = leaf(rng, 2, 3), leaf(rng, 2, 4), leaf(rng, 2, 4)
    wh, wc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def f():
        h2, c2 = lstm_step(p, x, h, c)
        return (h2 * Tensor(wh)).sum() + (c2 * Tensor(wc)).sum()

    assert grad_check(f, [x, h, c, *store.values()]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_sequence_matches_steps_and_gradients(seed):
    rng = np.random.default_rng(seed)
    store, p = lstm_params(rng, 3, 4)
    xs = leaf(rng, 5, 2, 3)
    hs = lstm_sequence(p, xs)
    h = Tensor(np.zeros((2, 4)))
    c = Tensor(np.zeros((2, 4)))
    for t in range(5):
        h, c = lstm_step(p, Tensor(xs.data[t]), h, c)
        np.testing.assert_allclose(hs.data[t], h.data, rtol=0, atol=1e-14)
    w = Tensor(rng.normal(size=hs.shape))
    assert grad_check(lambda: (lstm_sequence(p, xs) * w).sum(), [xs, *store.values()]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_lstm_sequence_constant_input(seed):
    rng = np.random.default_rng(seed)
    store, p = lstm_params(rng, 3, 4)
    x = leaf(rng, 2, 3)
    h0, c0 = leaf(rng, 2, 4), leaf(rng, 2, 4)
    hs = lstm_sequence(p, x, steps=4, h0=h0, c0=c0)
    ref = lstm_sequence(p, Tensor(np.broadcast_to(x.data, (4, 2, 3)).copy()), h0=h0, c0=c0)
    np.testing.assert_allclose(hs.data, ref.data, rtol=0, atol=1e-14)
    w = Tensor(rng.normal(size=hs.shape))
    f = lambda: (lstm_sequence(p, x, steps=4, h0=h0, c0=c0) * w).sum()  # noqa: E731
    assert grad_check(f, [x, h0, c0, *store.values()]) < TOL


def test_lstm_forget_bias_initialised_to_one():
    store = ParamStore(np.random.default_rng(0))
    p = store.lstm("enc", 3, 4)
    np.testing.assert_array_equal(p.b.data, [0] * 4 + [1] * 4 + [0] * 8)


# affine / activations / softmax

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros((1, 3)))).data, 1 / 3, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    with np.errstate(over="raise"):
        out = softmax(Tensor(np.array([[1000.0, 0.0, 0.0]]))).data
    assert out[0, 0] == 1.0 and np.all(out[0, 1:] < 1e-300)
    assert np.all(np.isfinite(out))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + 7.0)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(a > 0)


def test_leaky_relu_negative():
    assert leaky_relu(Tensor(np.array([-2.0])), 0.1).data[0] == pytest.approx(-0.2, abs=1e-15)
    assert leaky_relu(Tensor(np.array([3.0])), 0.1).data[0] == 3.0


def test_clip_values_and_gradient():
    x = Tensor(np.array([-3.0, -0.5, 0.0, 2.0, 7.0]), requires_grad=True)
    y = clip(x, -1.0, 2.0)
    np.testing.assert_array_equal(y.data, [-1.0, -0.5, 0.0, 2.0, 2.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_cumsum_values_and_gradient(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 5, 3)
    np.testing.assert_allclose(cumsum(x, 0).data, np.cumsum(x.data, 0))
    w = rng.normal(size=(5, 3))
    assert grad_check(lambda: (cumsum(x, 0) * w).sum() + (cumsum(x, 1) * w).sum(), [x]) < TOL


def test_affine_shape_error():
    with pytest.raises(ShapeError):
        affine(Tensor(np.zeros((4, 3))), Tensor(np.zeros(4)), Tensor(np.zeros((2, 5))))


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    w, bias = leaf(rng, 5, 4), leaf(rng, 5)

    def f():
        z = affine(w, bias, leaky_relu(a, 0.1))
        y = tanh(z) + sigmoid(z) * 2.0 + square(z) * 0.1
        y = concat([y, log(b) / b, exp(a * 0.3)], axis=1)
        return (y * Tensor(np.linspace(-1, 1, y.shape[1]))).sum() + softmax(z).sum(axis=0)[1]

    assert grad_check(f, [a, b, w, bias]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_family_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    assert grad_check(lambda: (softmax(x) * Tensor(w)).sum(), [x]) < TOL
    assert grad_check(lambda: (log_softmax(x) * Tensor(w)).sum(), [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_scatter_max_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 6, 4)
    groups = np.array([[0, 2, 5], [1, -1, -1], [-1, -1, -1], [3, 4, -1]])
    w = rng.normal(size=(4, 4))
    assert grad_check(lambda: (padded_max(x, groups) * Tensor(w)).sum(), [x]) < TOL
    w2 = rng.normal(size=(9, 4))
    assert grad_check(lambda: (scatter_rows(x, [8, 0, 3, 2, 5, 7], 9) * Tensor(w2)).sum(), [x]) < TOL
    w3 = rng.normal(size=(4, 4))
    assert grad_check(lambda: (gather_rows(x, [5, 5, 0, 1]) * Tensor(w3)).sum(), [x]) < TOL


def test_padded_max_empty_group_is_zero():
    x = Tensor(-np.ones((2, 3)))
    out = padded_max(x, np.array([[-1, -1], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[0, 0, 0], [-1, -1, -1]])


# conv / pooling

def test_conv_identity_kernel_is_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 13, 3))
    out = conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(x[:1]))
    assert np.array_equal(out.data, x[:1])
    k = np.zeros((2, 2, 1, 1))
    k[0, 0] = k[1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(k), Tensor(x)).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 2))
    out = conv2d(Tensor(k), Tensor(x)).data
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 2] * k[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 3))))


def test_maxpool_single_positive():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 3.5
    assert maxpool2d(Tensor(x), (2, 2)).data.item() == 3.5


def test_sumpool_overlapping_windows():
    x = np.arange(13 * 3, dtype=float).reshape(1, 1, 13, 3)
    out = sumpool2d(Tensor(x), (4, 3), (3, 3)).data
    assert out.shape == (1, 1, 4, 1)
    expected = [x[0, 0, r:r + 4].sum() for r in (0, 3, 6, 9)]
    np.testing.assert_array_equal(out[0, 0, :, 0], expected)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 3, 7, 4)
    k = leaf(rng, 2, 3, 3, 2)
    b = leaf(rng, 2)

    def f():
        y = conv2d(k, x, b)
        return (maxpool2d(y, (2, 1)) * Tensor(w1)).sum() + (sumpool2d(y, (3, 2), (2, 1)) * Tensor(w2)).sum()

    y_shape = conv2d(k, x, b).shape
    w1 = rng.normal(size=maxpool2d(Tensor(np.zeros(y_shape)), (2, 1)).shape)
    w2 = rng.normal(size=sumpool2d(Tensor(np.zeros(y_shape)), (3, 2), (2, 1)).shape)
    assert grad_check(f, [x, k, b]) < TOL


# grad_check harness

def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    w = leaf(rng, 4, 3)
    x = Tensor(rng.normal(size=(2, 3)))
    assert grad_check(lambda: affine(w, None, x).sum(), [w]) < 1e-10


def test_grad_check_detects_corrupted_gradient():
    rng = np.random.default_rng(0)
    w = leaf(rng, 4, 3)
    x = Tensor(rng.normal(size=(2, 3)))
    f = lambda: tanh(affine(w, None, x)).sum()  # noqa: E731
    f().backward()
    wrong = [w.grad * 1.01]
    assert grad_check(f, [w], analytic=wrong) > TOL


def test_grad_check_rejects_non_scalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        grad_check(lambda: w * 2.0, [w])


# optimizer and checkpoint container

def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        square(x).sum().backward()
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)


def test_clip_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([30.0, 40.0])
    assert clip_global_norm([a], 10.0) == pytest.approx(50.0)
    np.testing.assert_allclose(a.grad, [6.0, 8.0])


def test_checkpoint_roundtrip_and_layout():
    state = {"b": np.arange(3, dtype=np.float32), "a.weight": np.ones((2, 2), dtype=np.float32)}
    blob = checkpoint.dumps(state)
    assert blob[:4] == b"MPCK" and blob[4] == 1
    back = checkpoint.loads(blob)
    assert list(back) == ["a.weight", "b"]
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
    # 9 header + (2+8+1+8+16) + (2+1+1+4+12)
    assert len(blob) == 9 + 35 + 20
