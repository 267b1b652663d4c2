"""The fused-loop kernels and the vectorised numpy kernels must agree."""
import numpy as np
import pytest

from emocat import kernels


L, N = kernels.LOOPS, kernels.NUMPY


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_conv1d_paths_agree(rng):
    x = rng.normal(size=(3, 11, 4))
    w = rng.normal(size=(5, 4, 6))
    b = rng.normal(size=6)
    out, cols = L["conv1d_forward"](x, w, b)
    ref, ref_cols = N["conv1d_forward"](x, w, b)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    g = rng.normal(size=out.shape)
    for a, r in zip(L["conv1d_backward"](g, cols, w, 11),
                    N["conv1d_backward"](g, ref_cols, w, 11)):
        np.testing.assert_allclose(a, r, atol=1e-12)


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 7, 2))
    w = rng.normal(size=(3, 2, 1))
    b = np.array([0.5])
    out, _ = kernels.conv1d_forward(x, w, b)
    xp = np.pad(x[0], ((1, 1), (0, 0)))
    direct = [sum(xp[t + k] @ w[k, :, 0] for k in range(3)) + 0.5 for t in range(7)]
    np.testing.assert_allclose(out[0, :, 0], direct, atol=1e-12)


def test_lstm_paths_agree(rng):
    T, B, H = 9, 2, 5
    xw = rng.normal(size=(T, B, 4 * H))
    U = rng.normal(size=(H, 4 * H)) * 0.3
    res = L["lstm_forward"](xw, U)
    ref = N["lstm_forward"](xw, U)
    for a, r in zip(res, ref):
        np.testing.assert_allclose(a, r, atol=1e-12)
    dh = rng.normal(size=(T, B, H))
    for a, r in zip(L["lstm_backward"](dh, *res, U), N["lstm_backward"](dh, *ref, U)):
        np.testing.assert_allclose(a, r, atol=1e-12)


def test_gru_paths_agree_with_mask(rng):
    T, B, H = 8, 3, 4
    xw = rng.normal(size=(T, B, 3 * H))
    U = rng.normal(size=(H, 3 * H)) * 0.3
    mask = (np.arange(T)[:, None] < np.array([8, 5, 2])[None, :]).astype(float)
    res = L["gru_forward"](xw, U, mask)
    ref = N["gru_forward"](xw, U, mask)
    for a, r in zip(res, ref):
        np.testing.assert_allclose(a, r, atol=1e-12)
    # frozen past the end
    np.testing.assert_array_equal(res[0][-1, 2], res[0][2, 2])
    dh = rng.normal(size=(T, B, H))
    for a, r in zip(L["gru_backward"](dh, *res, U, mask), N["gru_backward"](dh, *ref, U, mask)):
        np.testing.assert_allclose(a, r, atol=1e-12)


def test_backend_name():
    assert kernels.backend() in ("numba", "numpy")
    assert kernels.lstm_forward is (L if kernels.USE_NUMBA else N)["lstm_forward"]

