"""Hot numeric kernels: 1-D convolution and fused LSTM/GRU recurrences.

Each kernel has two implementations with identical signatures:

* a vectorised numpy version (``NUMPY``), used when numba is missing or
  ``EMOCAT_DISABLE_NUMBA`` is set;
* an explicit-loop version (``LOOPS``) that fuses all the elementwise gate
  math into one pass per time step and leaves only the matmuls to BLAS.
  It is compiled with ``@njit`` when numba is active.

The module-level names (``lstm_forward`` etc.) point at whichever set is
active.  Sequence kernels work time-major (``(T, B, H)``) so that every
per-step slice is contiguous for ``np.dot``.
"""
import math
import os

import numpy as np

_flag = os.environ.get("EMOCAT_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no", "off")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    USE_NUMBA = True
except ImportError:
    USE_NUMBA = False


def _maybe_jit(fn):
    if USE_NUMBA:
        return njit(cache=True)(fn)
    return fn


def backend():
    return "numba" if USE_NUMBA else "numpy"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# Scalar activations for the loop kernels.  libm's tanh is several times
# slower than exp, so tanh goes through exp as well; absolute error stays
# within a few ulp.


@_maybe_jit
def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@_maybe_jit
def _tanh(x):
    e = math.exp(-2.0 * abs(x))
    r = (1.0 - e) / (1.0 + e)
    return r if x >= 0.0 else -r


# ================================================================ numpy

# ---------------------------------------------------------------- conv1d


def conv1d_forward_np(x, w, b):
    """Same-padded 1-D convolution.

    x: (B, T, C), w: (K, C, O), b: (O,).  Returns (out (B, T, O), cols)
    where ``cols`` is the (B*T, K*C) unfolded input kept for backward.
    """
    B, T, C = x.shape
    K, _, O = w.shape
    pad = K // 2
    cols = np.zeros((B, T, K * C))
    for k in range(K):
        shift = k - pad
        t_lo, t_hi = max(0, -shift), min(T, T - shift)
        if t_hi > t_lo:
            cols[:, t_lo:t_hi, k * C:(k + 1) * C] = x[:, t_lo + shift:t_hi + shift, :]
    cols2 = cols.reshape(B * T, K * C)
    out = cols2 @ w.reshape(K * C, O) + b
    return out.reshape(B, T, O), cols2


def conv1d_backward_np(g, cols2, w, T):
    """Gradients of conv1d_forward w.r.t. (x, w, b) given upstream g (B, T, O)."""
    K, C, O = w.shape
    B = g.shape[0]
    pad = K // 2
    g2 = g.reshape(B * T, O)
    dw = (cols2.T @ g2).reshape(K, C, O)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(K * C, O).T).reshape(B, T, K * C)
    dx = np.zeros((B, T, C))
    for k in range(K):
        shift = k - pad
        t_lo, t_hi = max(0, -shift), min(T, T - shift)
        if t_hi > t_lo:
            dx[:, t_lo + shift:t_hi + shift, :] += dcols[:, t_lo:t_hi, k * C:(k + 1) * C]
    return dx, dw, db


# ---------------------------------------------------------------- LSTM

# gate layout along the 4H axis: input, forget, cell candidate, output


def lstm_forward_np(xw, U):
    """Run an LSTM over time.

    xw: (T, B, 4H) input projection including bias; U: (H, 4H).
    Returns hs (T+1, B, H), cs (T+1, B, H), gates (T, B, 4H) with
    activations already applied.  Index 0 of hs/cs is the zero initial state.
    """
    T, B, G = xw.shape
    H = G // 4
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, G))
    for t in range(T):
        z = xw[t] + hs[t] @ U
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        gg = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        cs[t + 1] = f * cs[t] + i * gg
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates[t, :, :H] = i
        gates[t, :, H:2 * H] = f
        gates[t, :, 2 * H:3 * H] = gg
        gates[t, :, 3 * H:] = o
    return hs, cs, gates


def lstm_backward_np(dhs, hs, cs, gates, U):
    """Backprop through lstm_forward.

    dhs: (T, B, H) gradient w.r.t. the emitted hidden states hs[1:].
    Returns dxw (T, B, 4H) and dU (H, 4H).
    """
    T, B, H = dhs.shape
    G = 4 * H
    dxw = np.empty((T, B, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        gg = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dxw[t]
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U.T
    dU = hs[:-1].reshape(T * B, H).T @ dxw.reshape(T * B, G)
    return dxw, dU


# ---------------------------------------------------------------- GRU

# gate layout along the 3H axis: reset, update, candidate
# h' = (1 - z) * n + z * h,  n = tanh(x_n + (r * h) @ U_n)
# mask[t, b] == 0 freezes the state (padding past the sequence end)


def gru_forward_np(xw, U, mask):
    """xw: (T, B, 3H) input projection incl. bias; U: (H, 3H); mask: (T, B)."""
    T, B, G = xw.shape
    H = G // 3
    Urz, Un = U[:, :2 * H], U[:, 2 * H:]
    hs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, G))
    for t in range(T):
        h = hs[t]
        a = xw[t, :, :2 * H] + h @ Urz
        r = _sigmoid(a[:, :H])
        z = _sigmoid(a[:, H:])
        n = np.tanh(xw[t, :, 2 * H:] + (r * h) @ Un)
        m = mask[t][:, None]
        hs[t + 1] = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
        gates[t, :, :H] = r
        gates[t, :, H:2 * H] = z
        gates[t, :, 2 * H:] = n
    return hs, gates


def gru_backward_np(dhs, hs, gates, U, mask):
    T, B, H = dhs.shape
    G = 3 * H
    Urz_t, Un_t = U[:, :2 * H].T, U[:, 2 * H:].T
    dxw = np.empty((T, B, G))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h = hs[t]
        r = gates[t, :, :H]
        z = gates[t, :, H:2 * H]
        n = gates[t, :, 2 * H:]
        m = mask[t][:, None]
        dh = dhs[t] + dh_next
        dhc = dh * m
        dan = dhc * (1.0 - z) * (1.0 - n * n)
        drh = dan @ Un_t
        dxw[t, :, :H] = drh * h * r * (1.0 - r)
        dxw[t, :, H:2 * H] = dhc * (h - n) * z * (1.0 - z)
        dxw[t, :, 2 * H:] = dan
        dh_next = dh * (1.0 - m) + dhc * z + drh * r + dxw[t, :, :2 * H] @ Urz_t
    h2 = hs[:-1].reshape(T * B, H)
    rh2 = (gates[:, :, :H] * hs[:-1]).reshape(T * B, H)
    dU = np.empty((H, G))
    dU[:, :2 * H] = h2.T @ dxw[:, :, :2 * H].reshape(T * B, 2 * H)
    dU[:, 2 * H:] = rh2.T @ dxw[:, :, 2 * H:].reshape(T * B, H)
    return dxw, dU


# ================================================================ loops


@_maybe_jit
def conv1d_forward_loops(x, w, b):
    B, T, C = x.shape
    K, _, O = w.shape
    pad = K // 2
    cols2 = np.zeros((B * T, K * C))
    for bi in range(B):
        for t in range(T):
            row = bi * T + t
            for k in range(K):
                s = t + k - pad
                if 0 <= s < T:
                    for c in range(C):
                        cols2[row, k * C + c] = x[bi, s, c]
    out = np.dot(cols2, np.ascontiguousarray(w).reshape(K * C, O))
    for row in range(B * T):
        for o in range(O):
            out[row, o] += b[o]
    return out.reshape(B, T, O), cols2


@_maybe_jit
def conv1d_backward_loops(g, cols2, w, T):
    K, C, O = w.shape
    B = g.shape[0]
    pad = K // 2
    g2 = np.ascontiguousarray(g).reshape(B * T, O)
    w2 = np.ascontiguousarray(w).reshape(K * C, O)
    dw = np.dot(cols2.T, g2).reshape(K, C, O)
    db = np.zeros(O)
    for row in range(B * T):
        for o in range(O):
            db[o] += g2[row, o]
    dcols = np.dot(g2, w2.T)
    dx = np.zeros((B, T, C))
    for bi in range(B):
        for t in range(T):
            row = bi * T + t
            for k in range(K):
                s = t + k - pad
                if 0 <= s < T:
                    for c in range(C):
                        dx[bi, s, c] += dcols[row, k * C + c]
    return dx, dw, db


@_maybe_jit
def lstm_forward_loops(xw, U):
    T, B, G = xw.shape
    H = G // 4
    U = np.ascontiguousarray(U)
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, G))
    for t in range(T):
        a = np.dot(hs[t], U)
        for bi in range(B):
            for j in range(H):
                i = _sig(xw[t, bi, j] + a[bi, j])
                f = _sig(xw[t, bi, H + j] + a[bi, H + j])
                gg = _tanh(xw[t, bi, 2 * H + j] + a[bi, 2 * H + j])
                o = _sig(xw[t, bi, 3 * H + j] + a[bi, 3 * H + j])
                c = f * cs[t, bi, j] + i * gg
                cs[t + 1, bi, j] = c
                hs[t + 1, bi, j] = o * _tanh(c)
                gates[t, bi, j] = i
                gates[t, bi, H + j] = f
                gates[t, bi, 2 * H + j] = gg
                gates[t, bi, 3 * H + j] = o
    return hs, cs, gates


@_maybe_jit
def lstm_backward_loops(dhs, hs, cs, gates, U):
    T, B, H = dhs.shape
    G = 4 * H
    Ut = np.ascontiguousarray(U.T)
    dxw = np.empty((T, B, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for bi in range(B):
            for j in range(H):
                i = gates[t, bi, j]
                f = gates[t, bi, H + j]
                gg = gates[t, bi, 2 * H + j]
                o = gates[t, bi, 3 * H + j]
                tc = _tanh(cs[t + 1, bi, j])
                dh = dhs[t, bi, j] + dh_next[bi, j]
                dc = dc_next[bi, j] + dh * o * (1.0 - tc * tc)
                dxw[t, bi, j] = dc * gg * i * (1.0 - i)
                dxw[t, bi, H + j] = dc * cs[t, bi, j] * f * (1.0 - f)
                dxw[t, bi, 2 * H + j] = dc * i * (1.0 - gg * gg)
                dxw[t, bi, 3 * H + j] = dh * tc * o * (1.0 - o)
                dc_next[bi, j] = dc * f
        dh_next = np.dot(dxw[t], Ut)
    dU = np.dot(np.ascontiguousarray(hs[:T]).reshape(T * B, H).T, dxw.reshape(T * B, G))
    return dxw, dU


@_maybe_jit
def gru_forward_loops(xw, U, mask):
    T, B, G = xw.shape
    H = G // 3
    Urz = np.ascontiguousarray(U[:, :2 * H])
    Un = np.ascontiguousarray(U[:, 2 * H:])
    hs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, G))
    rh = np.empty((B, H))
    for t in range(T):
        a = np.dot(hs[t], Urz)
        for bi in range(B):
            for j in range(H):
                r = _sig(xw[t, bi, j] + a[bi, j])
                gates[t, bi, j] = r
                gates[t, bi, H + j] = _sig(xw[t, bi, H + j] + a[bi, H + j])
                rh[bi, j] = r * hs[t, bi, j]
        un = np.dot(rh, Un)
        for bi in range(B):
            m = mask[t, bi]
            for j in range(H):
                h = hs[t, bi, j]
                z = gates[t, bi, H + j]
                n = _tanh(xw[t, bi, 2 * H + j] + un[bi, j])
                gates[t, bi, 2 * H + j] = n
                hs[t + 1, bi, j] = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
    return hs, gates


@_maybe_jit
def gru_backward_loops(dhs, hs, gates, U, mask):
    T, B, H = dhs.shape
    G = 3 * H
    Urz_t = np.ascontiguousarray(U[:, :2 * H].T)
    Un_t = np.ascontiguousarray(U[:, 2 * H:].T)
    dxw = np.empty((T, B, G))
    dh_next = np.zeros((B, H))
    dh_prev = np.empty((B, H))
    dan = np.empty((B, H))
    darz = np.empty((B, 2 * H))
    for t in range(T - 1, -1, -1):
        for bi in range(B):
            m = mask[t, bi]
            for j in range(H):
                h = hs[t, bi, j]
                z = gates[t, bi, H + j]
                n = gates[t, bi, 2 * H + j]
                dh = dhs[t, bi, j] + dh_next[bi, j]
                dhc = dh * m
                dan[bi, j] = dhc * (1.0 - z) * (1.0 - n * n)
                darz[bi, H + j] = dhc * (h - n) * z * (1.0 - z)
                dh_prev[bi, j] = dh * (1.0 - m) + dhc * z
        drh = np.dot(dan, Un_t)
        for bi in range(B):
            for j in range(H):
                r = gates[t, bi, j]
                darz[bi, j] = drh[bi, j] * hs[t, bi, j] * r * (1.0 - r)
                dh_prev[bi, j] += drh[bi, j] * r
        dh_next = dh_prev + np.dot(darz, Urz_t)
        for bi in range(B):
            for j in range(2 * H):
                dxw[t, bi, j] = darz[bi, j]
            for j in range(H):
                dxw[t, bi, 2 * H + j] = dan[bi, j]
    h2 = np.ascontiguousarray(hs[:T]).reshape(T * B, H)
    rh2 = np.empty((T * B, H))
    darz2 = np.empty((T * B, 2 * H))
    dan2 = np.empty((T * B, H))
    for t in range(T):
        for bi in range(B):
            row = t * B + bi
            for j in range(H):
                rh2[row, j] = gates[t, bi, j] * hs[t, bi, j]
                dan2[row, j] = dxw[t, bi, 2 * H + j]
            for j in range(2 * H):
                darz2[row, j] = dxw[t, bi, j]
    dU = np.empty((H, G))
    dU[:, :2 * H] = np.dot(h2.T, darz2)
    dU[:, 2 * H:] = np.dot(rh2.T, dan2)
    return dxw, dU


# ================================================================ dispatch

NAMES = ("conv1d_forward", "conv1d_backward", "lstm_forward", "lstm_backward",
         "gru_forward", "gru_backward")
NUMPY = {name: globals()[name + "_np"] for name in NAMES}
LOOPS = {name: globals()[name + "_loops"] for name in NAMES}
ACTIVE = LOOPS if USE_NUMBA else NUMPY

conv1d_forward = ACTIVE["conv1d_forward"]
conv1d_backward = ACTIVE["conv1d_backward"]
lstm_forward = ACTIVE["lstm_forward"]
lstm_backward = ACTIVE["lstm_backward"]
gru_forward = ACTIVE["gru_forward"]
gru_backward = ACTIVE["gru_backward"]
