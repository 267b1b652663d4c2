"""Parameterised layers and losses built on :mod:`emocat.autodiff`.

All sequence tensors are batch-major ``(B, T, C)``.  Weights are drawn
uniformly from +-sqrt(1/fan_in); biases start at zero.
"""
from dataclasses import dataclass

import numpy as np

from emocat.autodiff import GraphError, Tensor, concat, conv1d, gru_sequence, lstm_sequence


class Params:
    """An ordered name -> Tensor registry shared by all layers of a model.

    ``bound`` maps names to ready-made Tensors that are used instead of fresh
    draws; gradient checks use it to make the checked leaves the weights.
    """

    def __init__(self, seed=0, bound=None):
        self.rng = np.random.default_rng(seed)
        self.tensors = {}
        self.bound = dict(bound or {})

    def weight(self, name, shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def bias(self, name, shape):
        return self._add(name, np.zeros(shape))

    def _add(self, name, value):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = self.bound.get(name)
        if t is None:
            t = Tensor(value, requires_grad=True, name=name)
        elif t.shape != value.shape:
            raise GraphError(f"{name}: expected shape {value.shape}, got {t.shape}")
        self.tensors[name] = t
        return t

    def __iter__(self):
        return iter(self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def state(self):
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load(self, state):
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.tensors[k].shape:
                raise GraphError(f"{k}: expected shape {self.tensors[k].shape}, got {v.shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


class Dense:
    def __init__(self, params, name, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.weight = params.weight(f"{name}.weight", (n_in, n_out), n_in)
        self.bias = params.bias(f"{name}.bias", (n_out,))

    def __call__(self, x):
        if x.shape[-1] != self.n_in:
            raise GraphError(f"dense: incompatible shapes {x.shape} and {self.weight.shape}")
        return x @ self.weight + self.bias


class Conv1d:
    def __init__(self, params, name, c_in, c_out, width):
        if width % 2 != 1:
            raise ValueError(f"conv width must be odd for same padding, got {width}")
        self.weight = params.weight(f"{name}.weight", (width, c_in, c_out), width * c_in)
        self.bias = params.bias(f"{name}.bias", (c_out,))

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias)


class Embedding:
    def __init__(self, params, name, vocab, dim):
        self.vocab = vocab
        self.table = params.weight(f"{name}.table", (vocab, dim), 1)

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise IndexError(f"id out of range [0, {self.vocab})")
        return self.table[ids]


class LSTM:
    """Uni-directional LSTM; gates ordered input, forget, candidate, output."""

    def __init__(self, params, name, n_in, hidden):
        self.hidden = hidden
        self.W = params.weight(f"{name}.W", (n_in, 4 * hidden), n_in)
        self.U = params.weight(f"{name}.U", (hidden, 4 * hidden), hidden)
        self.b = params.bias(f"{name}.b", (4 * hidden,))

    def step(self, x, state):
        """One time step built from primitive ops; x (B, I), state (h, c)."""
        h, c = state
        H = self.hidden
        z = x @ self.W + h @ self.U + self.b
        i = z[:, :H].sigmoid()
        f = z[:, H:2 * H].sigmoid()
        g = z[:, 2 * H:3 * H].tanh()
        o = z[:, 3 * H:].sigmoid()
        c = f * c + i * g
        return o * c.tanh(), c

    def __call__(self, x):
        return lstm_sequence(x, self.W, self.U, self.b)


class GRU:
    """GRU with the reset gate applied before the recurrent candidate matmul."""

    def __init__(self, params, name, n_in, hidden):
        self.hidden = hidden
        self.W = params.weight(f"{name}.W", (n_in, 3 * hidden), n_in)
        self.U = params.weight(f"{name}.U", (hidden, 3 * hidden), hidden)
        self.b = params.bias(f"{name}.b", (3 * hidden,))

    def step(self, x, h):
        H = self.hidden
        xw = x @ self.W + self.b
        a = xw[:, :2 * H] + h @ self.U[:, :2 * H]
        r = a[:, :H].sigmoid()
        z = a[:, H:].sigmoid()
        n = (xw[:, 2 * H:] + (r * h) @ self.U[:, 2 * H:]).tanh()
        return (1.0 - z) * n + z * h

    def __call__(self, x, lengths=None):
        return gru_sequence(x, self.W, self.U, self.b, lengths=lengths)


@dataclass
class VaeLatent:
    mu: Tensor
    log_var: Tensor
    sample: Tensor


class VaeHead:
    """Projects features to a diagonal Gaussian and draws a reparameterised sample."""

    def __init__(self, params, name, n_in, d_z):
        self.mu = Dense(params, f"{name}.mu", n_in, d_z)
        self.log_var = Dense(params, f"{name}.log_var", n_in, d_z)

    def __call__(self, x, rng=None):
        mu = self.mu(x)
        log_var = self.log_var(x)
        if rng is None:
            return VaeLatent(mu, log_var, mu)
        eps = rng.standard_normal(mu.shape)
        return VaeLatent(mu, log_var, mu + (log_var * 0.5).exp() * eps)


# ------------------------------------------------------------------ losses


def l1_loss(pred, target):
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise GraphError(f"l1_loss: incompatible shapes {pred.shape} and {target.shape}")
    return (pred - target).abs().mean()


def kl_standard_normal(latent):
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis, averaged elsewhere."""
    mu, lv = latent.mu, latent.log_var
    per = (lv.exp() + mu * mu - 1.0 - lv).sum(axis=-1) * 0.5
    return per.mean()


def class_weights(counts):
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        absent = [i for i, c in enumerate(counts) if c <= 0]
        raise ValueError(f"classes absent from corpus: {absent}")
    inv = 1.0 / counts
    return inv * (len(counts) / inv.sum())


def weighted_cross_entropy(logits, labels, weights=None):
    """Mean over the batch of ``w[label] * -log softmax(logits)[label]``.

    ``logits`` is (C,) with an int label or (B, C) with a label array.
    """
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels))
    C = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= C:
        raise IndexError(f"label out of range [0, {C})")
    if weights is not None and len(weights) != C:
        raise GraphError(f"weights length {len(weights)} != number of classes {C}")
    pick = np.zeros(logits.shape)
    pick[np.arange(len(labels)), labels] = 1.0
    if weights is not None:
        pick *= np.asarray(weights, dtype=np.float64)[labels][:, None]
    nll = -(logits.log_softmax(axis=-1) * pick).sum(axis=-1)
    return nll.mean()


def cross_entropy(logits, labels):
    return weighted_cross_entropy(logits, labels, None)


def masked_mean_time(x, lengths=None):
    """Mean over the time axis of (B, T, C), ignoring frames past ``lengths``."""
    if lengths is None:
        return x.mean(axis=1)
    B, T = x.shape[:2]
    lengths = np.asarray(lengths)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]
    return (x * mask).sum(axis=1) * (1.0 / lengths[:, None].astype(np.float64))


__all__ = [
    "Params", "Dense", "Conv1d", "Embedding", "LSTM", "GRU", "VaeHead", "VaeLatent",
    "l1_loss", "kl_standard_normal", "class_weights", "weighted_cross_entropy",
    "cross_entropy", "masked_mean_time", "concat",
]
