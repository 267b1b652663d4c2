"""Gradient transforms placed between the bottleneck and the adversarial classifier.

Four kinds are supported:

* ``identity``  - the gradient passes unchanged
* ``reversal``  - ``-lam * delta``
* ``inv-sq``    - ``-lam * delta / ||delta||^2``: small gradients become large
  and large ones small.  The denominator is floored at ``norm_floor`` and the
  output norm is capped at ``out_norm_cap``.
* ``inv-exp``   - ``-lam * delta / exp(||delta||^2)``: bounded by
  ``lam / sqrt(2e)``, so it needs no stabilisers.

Norms are Euclidean over the whole per-utterance gradient tensor.
"""
from dataclasses import dataclass, replace

import numpy as np

from emocat.autodiff import GraphError

KINDS = ("identity", "reversal", "inv-sq", "inv-exp")

_ALIASES = {
    "identity": "identity", "reversal": "reversal",
    "inv-sq": "inv-sq", "inv_sq": "inv-sq", "invsquarenorm": "inv-sq",
    "inv-exp": "inv-exp", "inv_exp": "inv-exp", "invexpsquarenorm": "inv-exp",
}


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class GradTransformSpec:
    kind: str = "identity"
    lam: float = 1.0
    norm_floor: float = 1e-8
    out_norm_cap: float = 1e3
    # linear ramp of lam from 0 over this many steps; 0 means constant
    warmup_steps: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.norm_floor < 0:
            raise ValueError(f"norm_floor must be nonnegative, got {self.norm_floor}")
        if not self.out_norm_cap > 0:
            raise ValueError(f"out_norm_cap must be positive, got {self.out_norm_cap}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")

    def at_step(self, step):
        """The spec with lambda ramped for training step ``step`` (0-based)."""
        if self.warmup_steps <= 0 or step >= self.warmup_steps:
            return self
        return replace(self, lam=self.lam * max(step, 1) / self.warmup_steps, warmup_steps=0)


def transform_gradient(spec, delta, where=None):
    delta = np.asarray(delta, dtype=np.float64)
    if spec.kind == "identity":
        return delta
    if not np.all(np.isfinite(delta)):
        raise NonFiniteGradient(f"non-finite gradient arriving at {where or 'transform'}")
    if spec.kind == "reversal":
        return -spec.lam * delta
    sq = float(np.sum(delta * delta))
    if spec.kind == "inv-exp":
        return -spec.lam * delta * np.exp(-sq)
    out = -spec.lam * delta / max(sq, spec.norm_floor) if sq > 0 else np.zeros_like(delta)
    norm = np.sqrt(np.sum(out * out))
    if norm > spec.out_norm_cap:
        out = out * (spec.out_norm_cap / norm)
    return out


def output_norm_profile(spec, r):
    """Norm of the transformed gradient as a function of the incoming norm ``r``."""
    r = np.asarray(r, dtype=np.float64)
    if spec.kind == "identity":
        return r
    if spec.kind == "reversal":
        return spec.lam * r
    if spec.kind == "inv-exp":
        return spec.lam * r * np.exp(-r * r)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r > 0, spec.lam * r / np.maximum(r * r, spec.norm_floor), 0.0)
    return np.minimum(out, spec.out_norm_cap)


class _Attachment:
    """Callable applied by ``autodiff.backward`` to a node's outgoing gradient.

    With ``per_item`` the leading axis indexes utterances and each slice is
    transformed on its own.  ``item_scale`` undoes a batch-mean reduction so
    the norm is the one of the utterance's own loss gradient.
    """

    def __init__(self, spec, per_item=False, item_scale=1.0):
        self.spec = spec
        self.per_item = per_item
        self.item_scale = float(item_scale)

    def __call__(self, g, node):
        where = node.name or node.op
        if self.spec.kind == "identity":
            return g
        if not self.per_item:
            return transform_gradient(self.spec, g * self.item_scale, where) / self.item_scale
        out = np.empty_like(g)
        for i in range(g.shape[0]):
            out[i] = transform_gradient(self.spec, g[i] * self.item_scale, f"{where}[{i}]") / self.item_scale
        return out


def attach(node, spec, per_item=False, item_scale=1.0):
    """Attach ``spec`` to ``node``; gradients flowing past it are transformed."""
    if node.grad_transform is not None:
        raise GraphError(f"a gradient transform is already attached to {node!r}")
    node.grad_transform = _Attachment(spec, per_item=per_item, item_scale=item_scale)
    return node
