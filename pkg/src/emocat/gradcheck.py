"""The finite-difference oracle suite run by ``emocat gradcheck``.

Every case maps a seed to (inputs, builder).  Non-scalar outputs are reduced
with a fixed random weighting so every output entry contributes.
"""
import numpy as np

from emocat.autodiff import Tensor, concat, conv1d, grad_check, gru_sequence, lstm_sequence, roundoff_floor
from emocat.corpus import EMBEDDING_DIM
from emocat.inverter import GradTransformSpec
from emocat.layers import (GRU, LSTM, Conv1d, Dense, Params, VaeHead, VaeLatent, kl_standard_normal, l1_loss,
                           weighted_cross_entropy)
from emocat.model import Batch, EmoCatConfig, EmoCatNet

TOLERANCE = 1e-4


def _weighted(out, seed):
    r = np.random.default_rng([seed, 1000]).normal(size=out.shape)
    return (out * r).sum()


def _primitive(fn, *shapes, positive=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        inputs = [rng.uniform(0.5, 2.0, size=s) if positive else rng.normal(size=s) for s in shapes]
        return inputs, lambda t: _weighted(fn(t), seed)
    return case


def _recurrent(fn, gates):
    def case(seed):
        rng = np.random.default_rng(seed)
        inputs = [rng.normal(size=(2, 5, 3)), rng.normal(size=(3, gates * 4)) * 0.5,
                  rng.normal(size=(4, gates * 4)) * 0.5, rng.normal(size=gates * 4) * 0.1]
        return inputs, lambda t: _weighted(fn(t), seed)
    return case


def _layer(make, call, x_shape):
    def case(seed):
        probe = Params(seed)
        make(probe)
        names = list(probe.tensors)
        inputs = [np.random.default_rng([seed, 1]).normal(size=x_shape)] + [probe[n].data for n in names]

        def builder(t):
            layer = make(Params(seed, bound=dict(zip(names, t[1:]))))
            return _weighted(call(layer, t[0]), seed)
        return inputs, builder
    return case


def _loss(fn, *shapes):
    def case(seed):
        rng = np.random.default_rng(seed)
        return [rng.normal(size=s) for s in shapes], fn
    return case


TINY_MODEL = dict(feature_dim=8, bottleneck_dim=3, phoneme_vocab_a=4, phoneme_vocab_b=4, phoneme_embedding_dim=3,
                  kernel_width=3, encoder_channels=4, encoder_layers=1, decoder_channels=4, decoder_lstm=4,
                  classifier_hidden=4, bottleneck_rate=2)


def _model(kind):
    def case(seed):
        cfg = EmoCatConfig(**TINY_MODEL, classifier_kind=kind, init_seed=seed,
                           transform=GradTransformSpec("identity"))
        names = list(EmoCatNet(cfg).params.tensors)
        rng = np.random.default_rng([seed, 2])
        B, T = 2, 6
        batch = Batch(rng.uniform(size=(B, T, cfg.feature_dim)), rng.integers(cfg.phoneme_vocab, size=(B, T)),
                      rng.normal(size=(B, EMBEDDING_DIM)) * 0.2, rng.integers(cfg.num_classes, size=B))
        inputs = [p.data for p in EmoCatNet(cfg).params]

        def builder(t):
            net = EmoCatNet(cfg, Params(seed, bound=dict(zip(names, t))))
            return net.forward_batch(batch, rng=np.random.default_rng([seed, 3]))["total"]
        return inputs, builder
    return case


CASES = {
    "add": _primitive(lambda t: t[0] + t[1], (3, 4), (4,)),
    "multiply": _primitive(lambda t: t[0] * t[1], (2, 3), (2, 3)),
    "matmul": _primitive(lambda t: t[0] @ t[1], (2, 3, 4), (4, 5)),
    "conv1d": _primitive(lambda t: conv1d(t[0], t[1], t[2]), (2, 6, 3), (3, 3, 4), (4,)),
    "tanh": _primitive(lambda t: t[0].tanh(), (3, 5)),
    "sigmoid": _primitive(lambda t: t[0].sigmoid(), (3, 5)),
    "exp": _primitive(lambda t: t[0].exp(), (4,)),
    "log": _primitive(lambda t: t[0].log(), (4, 2), positive=True),
    "softmax": _primitive(lambda t: t[0].softmax(), (3, 6)),
    "log_softmax": _primitive(lambda t: t[0].log_softmax(), (3, 6)),
    "slicing": _primitive(lambda t: t[0][:, 1:4] * 1.0, (3, 6)),
    "gather": _primitive(lambda t: t[0][:, [0, 0, 2, 2], :], (2, 4, 3)),
    "concat": _primitive(lambda t: concat([t[0], t[1]], axis=-1), (2, 3), (2, 2)),
    "mean": _primitive(lambda t: t[0].mean(axis=1), (3, 4, 2)),
    "lstm_sequence": _recurrent(lambda t: lstm_sequence(*t), 4),
    "gru_sequence": _recurrent(lambda t: gru_sequence(*t[:3], t[3][:12], lengths=[5, 3]), 3),
    "layer.dense": _layer(lambda p: Dense(p, "d", 3, 4), lambda l, x: l(x), (4, 3)),
    "layer.conv1d": _layer(lambda p: Conv1d(p, "c", 3, 4, 3), lambda l, x: l(x), (2, 6, 3)),
    "layer.gru": _layer(lambda p: GRU(p, "g", 3, 4), lambda l, x: l(x), (2, 5, 3)),
    "layer.gru_step": _layer(lambda p: GRU(p, "g", 3, 4), lambda l, x: l.step(x, (x[:, :1] * 0.5) @ Tensor(np.ones((1, 4)))),
                             (2, 3)),
    "layer.lstm": _layer(lambda p: LSTM(p, "l", 3, 4), lambda l, x: l(x), (2, 5, 3)),
    "layer.lstm_step": _layer(lambda p: LSTM(p, "l", 3, 4),
                              lambda l, x: l.step(x, (Tensor(np.full((2, 4), 0.1)), Tensor(np.full((2, 4), -0.2))))[0],
                              (2, 3)),
    "layer.vae_head": _layer(lambda p: VaeHead(p, "v", 3, 2), lambda l, x: l(x, np.random.default_rng(0)).sample,
                             (2, 4, 3)),
    "loss.l1": _loss(lambda t: l1_loss(t[0], t[1]), (3, 4), (3, 4)),
    "loss.kl": _loss(lambda t: kl_standard_normal(VaeLatent(t[0], t[1], t[0])), (2, 5, 3), (2, 5, 3)),
    "loss.weighted_ce": _loss(lambda t: weighted_cross_entropy(t[0], [1, 3, 0], [0.5, 1.0, 2.0, 3.5]), (3, 4)),
    "model.emocat_ff": _model("ff"),
    "model.emocat_gru": _model("gru"),
}


def check_case(name, seed, max_entries=None):
    """Max relative error of one case at one seed.

    Full-model cases have a loss of order one, so central differences cannot
    resolve entries below ``roundoff_floor``; those use it as the floor.
    """
    inputs, builder = CASES[name](seed)
    floor = 1e-8
    if name.startswith("model."):
        floor = max(floor, roundoff_floor(builder([Tensor(a) for a in inputs]).data))
    return grad_check(builder, inputs, max_entries=max_entries, seed=seed, floor=floor)


def run_suite(seeds=range(10), names=None, model_entries=40):
    """{case name: worst relative error over ``seeds``}."""
    out = {}
    for name in names or CASES:
        entries = model_entries if name.startswith("model.") else None
        out[name] = max(check_case(name, s, entries) for s in seeds)
    return out
