import math

import numpy as np
import pytest

from emocat.autodiff import GraphError, Tensor, grad_check, no_grad
from emocat.layers import (GRU, LSTM, Conv1d, Dense, Embedding, Params, VaeHead, VaeLatent, class_weights,
                           cross_entropy, kl_standard_normal, l1_loss, weighted_cross_entropy)


@pytest.fixture
def params():
    return Params(seed=0)


def test_dense_identity(params):
    layer = Dense(params, "d", 3, 3)
    layer.weight.data = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_conv1d_pointwise_scale(params):
    conv = Conv1d(params, "c", 1, 1, 1)
    conv.weight.data = np.full((1, 1, 1), 2.0)
    out = conv(Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)))
    np.testing.assert_array_equal(out.data.ravel(), [2.0, 4.0, 6.0])


def test_conv1d_same_padding_preserves_length(params):
    conv = Conv1d(params, "c", 4, 6, 5)
    assert conv(Tensor(np.ones((2, 3, 4)))).shape == (2, 3, 6)


def test_lstm_zero_params_give_zero_state(params):
    lstm = LSTM(params, "l", 3, 5)
    for t in (lstm.W, lstm.U, lstm.b):
        t.data = np.zeros_like(t.data)
    h, c = lstm.step(Tensor(np.ones((1, 3))), (Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 5)))))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_dense_rejects_wrong_width(params):
    with pytest.raises(GraphError):
        Dense(params, "d", 3, 2)(Tensor(np.ones((1, 4))))


def test_embedding_range(params):
    emb = Embedding(params, "e", 5, 2)
    with pytest.raises(IndexError):
        emb(np.array([0, 5]))


def test_initialisation_bounds():
    p = Params(seed=4)
    w = p.weight("w", (50, 20), 50)
    assert np.abs(w.data).max() <= math.sqrt(1 / 50)
    assert np.all(p.bias("b", (20,)).data == 0)


# ------------------------------------------------------------------ losses


def test_l1_examples():
    assert l1_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).data == 0.0
    assert l1_loss(Tensor([1.0, 1.0]), Tensor([0.0, 2.0])).data == 1.0
    with pytest.raises(GraphError):
        l1_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_l1_against_elementwise_sum():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += abs(x - y)
    assert l1_loss(Tensor(a), Tensor(b)).data == pytest.approx(total / a.size, abs=1e-12)


def _latent(mu, lv):
    mu, lv = Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(lv))
    return VaeLatent(mu, lv, mu)


def test_kl_examples():
    assert kl_standard_normal(_latent([0.0], [0.0])).data == 0.0
    assert kl_standard_normal(_latent([1.0], [0.0])).data == pytest.approx(0.5, abs=1e-12)
    expected = 0.5 * (4 - 1 - math.log(4))
    assert kl_standard_normal(_latent([0.0], [math.log(4)])).data == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.80685, abs=1e-5)


def test_kl_nonnegative_and_zero_only_at_prior():
    grid = np.linspace(-2, 2, 41)
    mu, lv = np.meshgrid(grid, grid)
    kl = 0.5 * (np.exp(lv) + mu ** 2 - 1 - lv)
    for m, v, k in zip(mu.ravel(), lv.ravel(), kl.ravel()):
        val = float(kl_standard_normal(_latent([m], [v])).data)
        assert val == pytest.approx(k, abs=1e-12)
        assert val >= 0
        assert (val == 0) == (m == 0 and v == 0)


def test_class_weight_examples():
    np.testing.assert_allclose(class_weights([90, 10]), [0.2, 1.8], atol=1e-12)
    np.testing.assert_allclose(class_weights([5, 5, 5]), [1, 1, 1], atol=1e-12)
    counts = [70, 10, 10, 5, 5]
    # spreadsheet-style: reciprocal, column total, scale to C
    recips = [1 / c for c in counts]
    col_total = sum(recips)
    oracle = [len(counts) * r / col_total for r in recips]
    w = class_weights(counts)
    np.testing.assert_allclose(w, oracle, atol=1e-12)
    assert w.sum() == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValueError, match="absent"):
        class_weights([3, 0])


def test_weighted_ce_examples():
    logits = np.zeros(7)
    logits[2] = 30.0
    assert weighted_cross_entropy(Tensor(logits), 2, np.ones(7)).data < 1e-9
    assert cross_entropy(Tensor(np.zeros(7)), 4).data == pytest.approx(math.log(7), abs=1e-12)
    assert math.log(7) == pytest.approx(1.94591, abs=1e-5)
    z = np.random.default_rng(0).normal(size=7)
    w = np.ones(7)
    w2 = w.copy()
    w2[3] = 2.0
    one = weighted_cross_entropy(Tensor(z), 3, w).data
    two = weighted_cross_entropy(Tensor(z), 3, w2).data
    assert two == pytest.approx(2 * one, abs=1e-15)
    with pytest.raises(IndexError):
        cross_entropy(Tensor(z), 7)


def test_uniform_weights_equal_unweighted():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 7))
    labels = rng.integers(7, size=5)
    a = weighted_cross_entropy(Tensor(z), labels, np.ones(7)).data
    b = cross_entropy(Tensor(z), labels).data
    assert a == pytest.approx(b, abs=1e-12)


# ------------------------------------------------------------------ sampling


def test_vae_noise_off_is_deterministic(params):
    head = VaeHead(params, "v", 4, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 6, 4)))
    a, b = head(x), head(x)
    assert np.array_equal(a.sample.data, b.sample.data)
    assert np.array_equal(a.sample.data, a.mu.data)


def test_vae_noise_reproducible_with_seed(params):
    head = VaeHead(params, "v", 4, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 6, 4)))
    a = head(x, np.random.default_rng(9)).sample.data
    b = head(x, np.random.default_rng(9)).sample.data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, head(x).sample.data)


# ------------------------------------------------------------------ gradient checks


def _probe_loss(out, seed):
    R = np.random.default_rng(seed + 77).normal(size=out.shape)
    return (out * R).sum()


LAYERS = {
    "dense": lambda p: (Dense(p, "d", 3, 4), lambda l, x: l(x), (4, 3)),
    "conv1d": lambda p: (Conv1d(p, "c", 3, 4, 3), lambda l, x: l(x), (2, 6, 3)),
    "gru": lambda p: (GRU(p, "g", 3, 4), lambda l, x: l(x), (2, 5, 3)),
    "gru_step": lambda p: (GRU(p, "g", 3, 4), lambda l, x: l.step(x, x[:, :1] * Tensor(np.ones((1, 4)))), (2, 3)),
    "lstm": lambda p: (LSTM(p, "l", 3, 4), lambda l, x: l(x), (2, 5, 3)),
    "lstm_step": lambda p: (LSTM(p, "l", 3, 4),
                            lambda l, x: l.step(x, (Tensor(np.full((2, 4), 0.1)), Tensor(np.full((2, 4), -0.2))))[0],
                            (2, 3)),
    "vae_head": lambda p: (VaeHead(p, "v", 3, 2), lambda l, x: l(x, np.random.default_rng(0)).sample, (2, 4, 3)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
@pytest.mark.parametrize("seed", range(10))
def test_layer_grad_check(name, seed):
    p = Params(seed)
    layer, call, shape = LAYERS[name](p)
    names = list(p.tensors)
    x = np.random.default_rng(seed).normal(size=shape)

    def builder(ts):
        for n, t in zip(names, ts[1:]):
            setattr_param(layer, p, n, t)
        return _probe_loss(call(layer, ts[0]), seed)

    err = grad_check(builder, [x] + [p[n].data for n in names])
    assert err <= 1e-4


def setattr_param(layer, params, name, tensor):
    # swap the registered parameter object everywhere the layer references it
    old = params.tensors[name]
    params.tensors[name] = tensor
    stack = [layer]
    while stack:
        obj = stack.pop()
        for k, v in vars(obj).items():
            if v is old:
                setattr(obj, k, tensor)
            elif hasattr(v, "__dict__") and not isinstance(v, (Tensor, np.ndarray)):
                stack.append(v)


LOSSES = {
    "l1": (lambda t: l1_loss(t[0], t[1]), [(3, 4), (3, 4)]),
    "kl": (lambda t: kl_standard_normal(VaeLatent(t[0], t[1], t[0])), [(2, 5, 3), (2, 5, 3)]),
    "weighted_ce": (lambda t: weighted_cross_entropy(t[0], [1, 3, 0], [0.5, 1.0, 2.0, 3.5]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("seed", range(10))
def test_loss_grad_check(name, seed):
    fn, shapes = LOSSES[name]
    rng = np.random.default_rng(seed)
    inputs = [rng.normal(size=s) for s in shapes]
    assert grad_check(fn, inputs) <= 1e-4


def test_layers_have_no_hidden_state(params):
    gru = GRU(params, "g", 2, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 2)))
    with no_grad():
        assert np.array_equal(gru(x).data, gru(x).data)
