import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emocat.autodiff import GraphError, Tensor, backward, identity
from emocat.inverter import (KINDS, GradTransformSpec, NonFiniteGradient, attach, output_norm_profile,
                             transform_gradient)

finite = st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-3)


def safe_norm(v):
    # scaled so the squares cannot underflow for tiny vectors
    m = np.abs(v).max()
    return 0.0 if m == 0 else m * np.linalg.norm(v / m)


def no_cap(kind, lam=1.0, floor=0.0):
    return GradTransformSpec(kind, lam=lam, norm_floor=floor, out_norm_cap=np.inf)


def test_reversal_example():
    out = transform_gradient(GradTransformSpec("reversal", 1.0), np.array([0.5, -0.25]))
    np.testing.assert_array_equal(out, [-0.5, 0.25])


def test_inverse_square_norm_example():
    out = transform_gradient(GradTransformSpec("inv-sq", 1.0), np.array([2.0, 0.0]))
    np.testing.assert_allclose(out, [-0.5, 0.0], atol=1e-15)


def test_inverse_exp_square_norm_example():
    out = transform_gradient(GradTransformSpec("inv-exp", 1.0), np.array([1.0]))
    assert out[0] == pytest.approx(-math.exp(-1.0), abs=1e-15)
    assert out[0] == pytest.approx(-0.36788, abs=1e-5)


def test_identity_is_bitwise():
    d = np.random.default_rng(0).normal(size=(4, 3))
    out = transform_gradient(GradTransformSpec("identity", lam=7.0, norm_floor=3.0, out_norm_cap=1e-3), d)
    assert out is d or np.array_equal(out, d)


def test_non_finite_delta_names_node():
    with pytest.raises(NonFiniteGradient, match="bottleneck"):
        transform_gradient(GradTransformSpec("reversal"), np.array([np.nan, 1.0]), "bottleneck")


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(lam=-1.0), dict(norm_floor=-1.0),
                                 dict(out_norm_cap=0.0), dict(kind="flip")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        GradTransformSpec(**{"kind": "reversal", **bad})


def test_cap_bounds_output_norm():
    spec = GradTransformSpec("inv-sq", lam=1.0, norm_floor=1e-8, out_norm_cap=10.0)
    out = transform_gradient(spec, np.array([1e-4, 0.0]))
    assert np.linalg.norm(out) == pytest.approx(10.0, rel=1e-12)
    assert out[0] < 0  # direction preserved


def test_norm_profile_examples():
    assert output_norm_profile(GradTransformSpec("inv-sq", 1.0), 2.0) == pytest.approx(0.5, abs=1e-15)
    r = 1 / math.sqrt(2)
    assert output_norm_profile(GradTransformSpec("inv-exp", 1.0), r) == pytest.approx(r * math.exp(-0.5), abs=1e-15)
    assert output_norm_profile(GradTransformSpec("inv-exp", 1.0), r) == pytest.approx(0.42888, abs=1e-5)
    assert output_norm_profile(GradTransformSpec("reversal", 2.0), 3.0) == 6.0


def test_inv_exp_profile_peak_and_tail_on_grid():
    spec = GradTransformSpec("inv-exp", 1.0)
    grid = np.linspace(0.0, 5.0, 5_000_001)
    prof = output_norm_profile(spec, grid)
    assert abs(grid[np.argmax(prof)] - 1 / math.sqrt(2)) <= 1e-6
    tail = prof[grid > 1 / math.sqrt(2)]
    assert np.all(np.diff(tail) < 0)
    assert prof.max() <= 1 / math.sqrt(2 * math.e) + 1e-15


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.01, 10))
def test_profile_matches_transformed_norm(delta, lam):
    for kind in KINDS[1:]:
        spec = no_cap(kind, lam)
        out = transform_gradient(spec, delta)
        r = np.linalg.norm(delta)
        if kind == "inv-sq" and r == 0:
            continue
        assert safe_norm(out) == pytest.approx(float(output_norm_profile(spec, r)), rel=1e-9, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(0.01, 10))
def test_inverse_square_norm_inverts(r, lam):
    assert output_norm_profile(no_cap("inv-sq", lam), r) * r == pytest.approx(lam, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)), st.floats(0.1, 10))
def test_lambda_linearity(delta, c):
    for kind in KINDS:
        base = transform_gradient(no_cap(kind, 1.0, 1e-8), delta)
        scaled = transform_gradient(no_cap(kind, c, 1e-8), delta)
        if kind == "identity":
            np.testing.assert_array_equal(scaled, base)
        else:
            np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-12)


def _ce_logit_grad(confidence, n_classes=7):
    """Gradient of softmax cross-entropy w.r.t. logits when the true class has ``confidence``."""
    p = np.full(n_classes, (1 - confidence) / (n_classes - 1))
    p[0] = confidence
    onehot = np.zeros(n_classes)
    onehot[0] = 1
    return p - onehot


def test_leakage_scenarios_reverse_the_ordering():
    leaky = _ce_logit_grad(0.99)        # confident classifier: input leaks emotion
    clean = _ce_logit_grad(0.40)        # unsure classifier: little leakage
    assert np.linalg.norm(leaky) < np.linalg.norm(clean)
    inv = GradTransformSpec("inv-sq")
    rev = GradTransformSpec("reversal")
    norm = lambda spec, d: np.linalg.norm(transform_gradient(spec, d))
    assert norm(inv, leaky) > norm(inv, clean)
    assert norm(rev, leaky) < norm(rev, clean)
    # near-certain classifier: the inverse hits the cap, the reversal nearly vanishes
    tiny = _ce_logit_grad(1 - 1e-4)
    assert norm(inv, tiny) == pytest.approx(inv.out_norm_cap, rel=1e-9)
    assert norm(rev, tiny) < 2e-4


# ------------------------------------------------------------------ attachment


def test_identity_attachment_is_transparent():
    x1 = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    x2 = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    n1 = identity(x1 * 3.0)
    n2 = identity(x2 * 3.0)
    attach(n1, GradTransformSpec("identity"))
    l1, l2 = (n1 * n1).sum(), (n2 * n2).sum()
    assert np.array_equal(l1.data, l2.data)
    backward(l1)
    backward(l2)
    assert np.array_equal(x1.grad, x2.grad)


def test_reversal_on_leaf_passthrough():
    x = Tensor(2.0, requires_grad=True)
    node = identity(x)
    attach(node, GradTransformSpec("reversal", 1.0))
    backward(node)
    assert x.grad == -1.0
    assert node.grad == 1.0  # the node's own gradient is untouched


def test_reversal_half_on_linear():
    x = Tensor(1.0, requires_grad=True)
    f = x * 3.0
    attach(f, GradTransformSpec("reversal", 0.5))
    backward(f)
    assert x.grad == pytest.approx(-1.5)


@pytest.mark.parametrize("kind", KINDS)
def test_forward_value_is_unchanged(kind):
    v = np.random.default_rng(3).normal(size=(2, 5))
    plain = identity(Tensor(v, requires_grad=True))
    tagged = attach(identity(Tensor(v, requires_grad=True)), GradTransformSpec(kind))
    assert np.array_equal(plain.data, tagged.data)


def test_double_attach_rejected():
    node = identity(Tensor(1.0, requires_grad=True))
    attach(node, GradTransformSpec("reversal"))
    with pytest.raises(GraphError, match="already"):
        attach(node, GradTransformSpec("inv-sq"))


def test_per_item_norms_are_independent():
    g = np.array([[2.0, 0.0], [0.0, 0.5]])
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    node = attach(identity(x), GradTransformSpec("inv-sq"), per_item=True)
    backward((node * g).sum())
    np.testing.assert_allclose(x.grad, [[-0.5, 0.0], [0.0, -2.0]], atol=1e-15)


def test_item_scale_undoes_batch_mean():
    # loss = mean of two per-utterance losses; each utterance's own gradient is [2, 0]
    g = np.array([[2.0, 0.0], [2.0, 0.0]])
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    node = attach(identity(x), GradTransformSpec("inv-sq"), per_item=True, item_scale=2)
    backward((node * g).sum() * 0.5)
    np.testing.assert_allclose(x.grad, [[-0.25, 0.0], [-0.25, 0.0]], atol=1e-15)


def test_lambda_warmup_ramp():
    spec = GradTransformSpec("reversal", lam=2.0, warmup_steps=10)
    assert spec.at_step(5).lam == pytest.approx(1.0)
    assert spec.at_step(10).lam == 2.0
    assert spec.at_step(0).lam == pytest.approx(0.2)
