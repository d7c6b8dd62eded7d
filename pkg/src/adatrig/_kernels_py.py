"""Pure-NumPy recurrent kernels; behavioral twin of the compiled module.

Arrays are time-major and C-contiguous. ``preact`` holds the input
projection ``x @ W_x + b`` for every step, so the kernel only runs the
recurrence: the per-step ``h @ W_h`` matmul, the gate nonlinearities, and
the masked state carry (padded steps keep the previous state).

Gate layout along the last axis is [input, forget, cell, output].
"""

import numpy as np

BACKEND = "numpy"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(preact, w_h, mask):
    """Run an LSTM over time.

    preact: (T, B, 4H) float64, x @ W_x + b
    w_h:    (H, 4H) float64 recurrent weights
    mask:   (T, B) float64, 1.0 on real tokens

    Returns (y, hs, cs, gates, tch):
      y     (T, B, H) masked hidden outputs
      hs    (T, B, H) carried hidden state
      cs    (T, B, H) carried cell state
      gates (T, B, 4H) post-activation gate values
      tch   (T, B, H) tanh of the candidate cell state
    """
    T, B, H4 = preact.shape
    H = H4 // 4
    y = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, H4))
    tch = np.empty((T, B, H))

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = preact[t] + h @ w_h
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        c_hat = f * c + i * g
        tc = np.tanh(c_hat)
        h_hat = o * tc
        m = mask[t][:, None]
        c = m * c_hat + (1.0 - m) * c
        h = m * h_hat + (1.0 - m) * h
        gates[t, :, :H] = i
        gates[t, :, H : 2 * H] = f
        gates[t, :, 2 * H : 3 * H] = g
        gates[t, :, 3 * H :] = o
        tch[t] = tc
        cs[t] = c
        hs[t] = h
        y[t] = m * h_hat
    return y, hs, cs, gates, tch


def lstm_backward(dy, w_h, mask, gates, tch, hs, cs):
    """Backpropagate through ``lstm_forward``.

    dy: (T, B, H) gradient w.r.t. the masked outputs y.

    Returns (dpreact, dw_h); the caller turns dpreact into input/projection
    gradients with two large matmuls.
    """
    T, B, H = dy.shape
    dpre = np.empty((T, B, 4 * H))
    dw_h = np.zeros_like(w_h)
    dH = np.zeros((B, H))
    dC = np.zeros((B, H))
    zero = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        m = mask[t][:, None]
        i = gates[t, :, :H]
        f = gates[t, :, H : 2 * H]
        g = gates[t, :, 2 * H : 3 * H]
        o = gates[t, :, 3 * H :]
        tc = tch[t]
        c_prev = cs[t - 1] if t > 0 else zero
        h_prev = hs[t - 1] if t > 0 else zero

        dh_hat = m * (dy[t] + dH)
        dc_hat = m * dC + dh_hat * o * (1.0 - tc * tc)
        do = dh_hat * tc
        di = dc_hat * g
        df = dc_hat * c_prev
        dg = dc_hat * i
        dC = dc_hat * f + (1.0 - m) * dC

        da = dpre[t]
        da[:, :H] = di * i * (1.0 - i)
        da[:, H : 2 * H] = df * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dg * (1.0 - g * g)
        da[:, 3 * H :] = do * o * (1.0 - o)

        dw_h += h_prev.T @ da
        dH = (1.0 - m) * dH + da @ w_h.T
    return dpre, dw_h
