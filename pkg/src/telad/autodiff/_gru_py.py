"""Pure numpy GRU sequence kernels (fallback for ``_gru_ext``).

All arrays are time-major and C-contiguous float64:

* ``xp``   (T, B, 3H)  input projections ``x_t @ W_x + b_x``, gate order [r | z | n]
* ``h0``   (B, H)
* ``w_h``  (H, 3H), ``b_h`` (3H,)
* ``hs``   (T, B, H)   hidden state after each step

In autonomous mode the step input is the previous hidden state, so ``xp`` is
not supplied and ``w_x`` (H, 3H) / ``b_x`` are applied inside the loop.
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_forward(xp, h0, w_h, b_h, w_x=None, b_x=None, steps=0):
    autonomous = xp is None
    T = steps if autonomous else xp.shape[0]
    B, H = h0.shape
    hs = np.empty((T, B, H))
    r_c = np.empty((T, B, H))
    z_c = np.empty((T, B, H))
    n_c = np.empty((T, B, H))
    ghn_c = np.empty((T, B, H))
    h = h0
    for t in range(T):
        gh = h @ w_h + b_h
        gx = h @ w_x + b_x if autonomous else xp[t]
        r = _sigmoid(gx[:, :H] + gh[:, :H])
        z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        ghn = gh[:, 2 * H:]
        n = np.tanh(gx[:, 2 * H:] + r * ghn)
        h = (1.0 - z) * n + z * h
        hs[t] = h
        r_c[t] = r
        z_c[t] = z
        n_c[t] = n
        ghn_c[t] = ghn
    return hs, (r_c, z_c, n_c, ghn_c)


def gru_backward(dhs, cache, h0, hs, w_h, w_x=None):
    """Backpropagate through time.

    Returns ``(dgx, dgh, dh0)`` where ``dgx``/``dgh`` are the (T, B, 3H)
    gradients of the input-side and hidden-side gate pre-activations.
    Weight gradients are reduced by the caller with two large matmuls.
    """
    r_c, z_c, n_c, ghn_c = cache
    autonomous = w_x is not None
    T, B, H = hs.shape
    dgx = np.empty((T, B, 3 * H))
    dgh = np.empty((T, B, 3 * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        r, z, n, ghn = r_c[t], z_c[t], n_c[t], ghn_c[t]
        dh = dhs[t] + dh_next
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (h_prev - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx[t, :, :H] = dr_pre
        dgx[t, :, H:2 * H] = dz_pre
        dgx[t, :, 2 * H:] = dn_pre
        dgh[t, :, :2 * H] = dgx[t, :, :2 * H]
        dgh[t, :, 2 * H:] = dn_pre * r
        dh_next = dh * z + dgh[t] @ w_h.T
        if autonomous:
            dh_next += dgx[t] @ w_x.T
    return dgx, dgh, dh_next
