"""Hot numeric kernels with two interchangeable backends.

The inner loops that dominate training time live here: fused dense-layer
forward/backward, the GRU sequence unroll (forward and backward through
time), and the RMSProp parameter update. Each kernel has a pure-numpy
reference implementation and, when numba is importable, an ``@njit``
compiled twin. The active backend is chosen once at import:

    PRUNESHARE_NUMBA=0   force the numpy fallback
    (default)            numba when available

Both backends are exported under explicit names (``*_numpy`` / ``*_numba``)
so the parity tests and ``benchmarks/bench_kernels.py`` can compare them
directly. All arrays are float64; activation codes are 0=identity, 1=relu,
2=tanh, 3=softmax.
"""

from __future__ import annotations

import os

import numpy as np

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_TANH = 2
ACT_SOFTMAX = 3


# ---------------------------------------------------------------------------
# numpy reference backend
# ---------------------------------------------------------------------------

def _softmax_rows(pre):
    shifted = pre - pre.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def dense_forward_numpy(x, w, b, act):
    """Fused dense layer: activation(x @ w.T + b).

    x: (B, I), w: (O, I), b: (O,). Returns post-activation (B, O).
    """
    pre = x @ w.T + b
    if act == ACT_RELU:
        return np.maximum(pre, 0.0)
    if act == ACT_TANH:
        return np.tanh(pre)
    if act == ACT_SOFTMAX:
        return _softmax_rows(pre)
    return pre


def dense_backward_numpy(x, w, post, act, dpost):
    """Gradients of a dense layer given the post-activation value.

    Returns (dx, dw, db). ``post`` may already include a binary unit mask;
    the caller is responsible for masking ``dpost`` first.
    """
    if act == ACT_RELU:
        dpre = dpost * (post > 0.0)
    elif act == ACT_TANH:
        dpre = dpost * (1.0 - post * post)
    elif act == ACT_SOFTMAX:
        inner = (dpost * post).sum(axis=1, keepdims=True)
        dpre = post * (dpost - inner)
    else:
        dpre = dpost
    dw = dpre.T @ x
    db = dpre.sum(axis=0)
    dx = dpre @ w
    return dx, dw, db


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_forward_seq_numpy(x_seq, h0, w_r, w_z, w_c, u_r, u_z, u_c,
                          b_r, b_z, b_c, unit_mask):
    """Unroll a GRU over a (T, B, I) sequence.

    Gating:  r = sigm(Wr x + Ur h + br)
             z = sigm(Wz x + Uz h + bz)
             c = tanh(Wc x + Uc (r*h) + bc)
             h' = (z*h + (1-z)*c) * unit_mask

    ``unit_mask`` is (B, H); pass ones when no units are pruned (multiplying
    by 1.0 is exact, so the unmasked path is bit-identical). ``h0`` is masked
    on entry. Returns (h_seq, r_seq, z_seq, c_seq, hprev_seq).
    """
    T, B, _ = x_seq.shape
    H = h0.shape[1]
    h_seq = np.empty((T, B, H))
    r_seq = np.empty((T, B, H))
    z_seq = np.empty((T, B, H))
    c_seq = np.empty((T, B, H))
    hprev_seq = np.empty((T, B, H))
    h = h0 * unit_mask
    for t in range(T):
        x = x_seq[t]
        hprev_seq[t] = h
        r = _sigmoid(x @ w_r.T + h @ u_r.T + b_r)
        z = _sigmoid(x @ w_z.T + h @ u_z.T + b_z)
        c = np.tanh(x @ w_c.T + (r * h) @ u_c.T + b_c)
        h = (z * h + (1.0 - z) * c) * unit_mask
        r_seq[t] = r
        z_seq[t] = z
        c_seq[t] = c
        h_seq[t] = h
    return h_seq, r_seq, z_seq, c_seq, hprev_seq


def gru_backward_seq_numpy(x_seq, r_seq, z_seq, c_seq, hprev_seq,
                           w_r, w_z, w_c, u_r, u_z, u_c,
                           unit_mask, dh_out_seq, dh_final):
    """Backward through time for :func:`gru_forward_seq_numpy`.

    ``dh_out_seq`` is the gradient arriving at each step's (masked) output;
    ``dh_final`` an extra gradient on the last state. Returns
    (dx_seq, dh0, dw_r, dw_z, dw_c, du_r, du_z, du_c, db_r, db_z, db_c).
    """
    T, B, I = x_seq.shape
    H = unit_mask.shape[1]
    dx_seq = np.empty((T, B, I))
    dw_r = np.zeros_like(w_r)
    dw_z = np.zeros_like(w_z)
    dw_c = np.zeros_like(w_c)
    du_r = np.zeros_like(u_r)
    du_z = np.zeros_like(u_z)
    du_c = np.zeros_like(u_c)
    db_r = np.zeros(H)
    db_z = np.zeros(H)
    db_c = np.zeros(H)
    carry = dh_final.copy()
    for t in range(T - 1, -1, -1):
        x = x_seq[t]
        r = r_seq[t]
        z = z_seq[t]
        c = c_seq[t]
        hprev = hprev_seq[t]
        dhr = (dh_out_seq[t] + carry) * unit_mask
        dz_pre = dhr * (hprev - c) * z * (1.0 - z)
        dc_pre = dhr * (1.0 - z) * (1.0 - c * c)
        dhprev = dhr * z
        drh = dc_pre @ u_c
        dr_pre = drh * hprev * r * (1.0 - r)
        dhprev = dhprev + drh * r
        dw_c += dc_pre.T @ x
        du_c += dc_pre.T @ (r * hprev)
        db_c += dc_pre.sum(axis=0)
        dw_r += dr_pre.T @ x
        du_r += dr_pre.T @ hprev
        db_r += dr_pre.sum(axis=0)
        dw_z += dz_pre.T @ x
        du_z += dz_pre.T @ hprev
        db_z += dz_pre.sum(axis=0)
        dhprev = dhprev + dr_pre @ u_r + dz_pre @ u_z
        dx_seq[t] = dr_pre @ w_r + dz_pre @ w_z + dc_pre @ w_c
        carry = dhprev
    dh0 = carry * unit_mask
    return (dx_seq, dh0, dw_r, dw_z, dw_c, du_r, du_z, du_c,
            db_r, db_z, db_c)


def rmsprop_update_numpy(p, g, v, lr, decay, eps):
    """In-place RMSProp step on flat views: v <- decay*v + (1-decay)*g^2,
    p <- p - lr*g/(sqrt(v)+eps)."""
    v *= decay
    v += (1.0 - decay) * g * g
    p -= lr * g / (np.sqrt(v) + eps)


def sgd_update_numpy(p, g, lr):
    p -= lr * g


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

def _env_wants_numba() -> bool:
    return os.environ.get("PRUNESHARE_NUMBA", "1").lower() not in ("0", "false", "off")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @njit(cache=True)
    def dense_forward_numba(x, w, b, act):
        pre = np.dot(x, w.T)
        B, O = pre.shape
        if act == ACT_SOFTMAX:
            out = np.empty_like(pre)
            for i in range(B):
                m = pre[i, 0] + b[0]
                for j in range(O):
                    v = pre[i, j] + b[j]
                    if v > m:
                        m = v
                s = 0.0
                for j in range(O):
                    e = np.exp(pre[i, j] + b[j] - m)
                    out[i, j] = e
                    s += e
                for j in range(O):
                    out[i, j] /= s
            return out
        for i in range(B):
            for j in range(O):
                v = pre[i, j] + b[j]
                if act == ACT_RELU:
                    # v <= 0 (not v > 0) so NaN propagates like np.maximum
                    pre[i, j] = 0.0 if v <= 0.0 else v
                elif act == ACT_TANH:
                    pre[i, j] = np.tanh(v)
                else:
                    pre[i, j] = v
        return pre

    @njit(cache=True)
    def dense_backward_numba(x, w, post, act, dpost):
        B, O = post.shape
        dpre = np.empty_like(dpost)
        if act == ACT_SOFTMAX:
            for i in range(B):
                inner = 0.0
                for j in range(O):
                    inner += dpost[i, j] * post[i, j]
                for j in range(O):
                    dpre[i, j] = post[i, j] * (dpost[i, j] - inner)
        else:
            for i in range(B):
                for j in range(O):
                    if act == ACT_RELU:
                        dpre[i, j] = dpost[i, j] if post[i, j] > 0.0 else 0.0
                    elif act == ACT_TANH:
                        dpre[i, j] = dpost[i, j] * (1.0 - post[i, j] * post[i, j])
                    else:
                        dpre[i, j] = dpost[i, j]
        dw = np.dot(dpre.T, x)
        db = np.empty(O)
        for j in range(O):
            s = 0.0
            for i in range(B):
                s += dpre[i, j]
            db[j] = s
        dx = np.dot(dpre, w)
        return dx, dw, db

    @njit(cache=True)
    def gru_forward_seq_numba(x_seq, h0, w_r, w_z, w_c, u_r, u_z, u_c,
                              b_r, b_z, b_c, unit_mask):
        T, B, _ = x_seq.shape
        H = h0.shape[1]
        h_seq = np.empty((T, B, H))
        r_seq = np.empty((T, B, H))
        z_seq = np.empty((T, B, H))
        c_seq = np.empty((T, B, H))
        hprev_seq = np.empty((T, B, H))
        h = h0 * unit_mask
        rh = np.empty((B, H))
        for t in range(T):
            x = x_seq[t]
            xr = np.dot(x, w_r.T)
            xz = np.dot(x, w_z.T)
            xc = np.dot(x, w_c.T)
            hr = np.dot(h, u_r.T)
            hz = np.dot(h, u_z.T)
            for i in range(B):
                for j in range(H):
                    hprev_seq[t, i, j] = h[i, j]
                    r = 1.0 / (1.0 + np.exp(-(xr[i, j] + hr[i, j] + b_r[j])))
                    r_seq[t, i, j] = r
                    rh[i, j] = r * h[i, j]
            hc = np.dot(rh, u_c.T)
            for i in range(B):
                for j in range(H):
                    z = 1.0 / (1.0 + np.exp(-(xz[i, j] + hz[i, j] + b_z[j])))
                    c = np.tanh(xc[i, j] + hc[i, j] + b_c[j])
                    z_seq[t, i, j] = z
                    c_seq[t, i, j] = c
                    hv = (z * h[i, j] + (1.0 - z) * c) * unit_mask[i, j]
                    h_seq[t, i, j] = hv
            h = h_seq[t]
        return h_seq, r_seq, z_seq, c_seq, hprev_seq

    @njit(cache=True)
    def gru_backward_seq_numba(x_seq, r_seq, z_seq, c_seq, hprev_seq,
                               w_r, w_z, w_c, u_r, u_z, u_c,
                               unit_mask, dh_out_seq, dh_final):
        T, B, I = x_seq.shape
        H = unit_mask.shape[1]
        dx_seq = np.empty((T, B, I))
        dw_r = np.zeros_like(w_r)
        dw_z = np.zeros_like(w_z)
        dw_c = np.zeros_like(w_c)
        du_r = np.zeros_like(u_r)
        du_z = np.zeros_like(u_z)
        du_c = np.zeros_like(u_c)
        db_r = np.zeros(H)
        db_z = np.zeros(H)
        db_c = np.zeros(H)
        carry = dh_final.copy()
        dz_pre = np.empty((B, H))
        dc_pre = np.empty((B, H))
        dr_pre = np.empty((B, H))
        dhprev = np.empty((B, H))
        rh = np.empty((B, H))
        for t in range(T - 1, -1, -1):
            x = x_seq[t]
            for i in range(B):
                for j in range(H):
                    r = r_seq[t, i, j]
                    z = z_seq[t, i, j]
                    c = c_seq[t, i, j]
                    hp = hprev_seq[t, i, j]
                    dhr = (dh_out_seq[t, i, j] + carry[i, j]) * unit_mask[i, j]
                    dz_pre[i, j] = dhr * (hp - c) * z * (1.0 - z)
                    dc_pre[i, j] = dhr * (1.0 - z) * (1.0 - c * c)
                    dhprev[i, j] = dhr * z
                    rh[i, j] = r * hp
            drh = np.dot(dc_pre, u_c)
            for i in range(B):
                for j in range(H):
                    r = r_seq[t, i, j]
                    hp = hprev_seq[t, i, j]
                    dr_pre[i, j] = drh[i, j] * hp * r * (1.0 - r)
                    dhprev[i, j] += drh[i, j] * r
            dw_c += np.dot(dc_pre.T, x)
            du_c += np.dot(dc_pre.T, rh)
            dw_r += np.dot(dr_pre.T, x)
            du_r += np.dot(dr_pre.T, hprev_seq[t])
            dw_z += np.dot(dz_pre.T, x)
            du_z += np.dot(dz_pre.T, hprev_seq[t])
            for j in range(H):
                sr = 0.0
                sz = 0.0
                sc = 0.0
                for i in range(B):
                    sr += dr_pre[i, j]
                    sz += dz_pre[i, j]
                    sc += dc_pre[i, j]
                db_r[j] += sr
                db_z[j] += sz
                db_c[j] += sc
            dh_gates = np.dot(dr_pre, u_r) + np.dot(dz_pre, u_z)
            for i in range(B):
                for j in range(H):
                    carry[i, j] = dhprev[i, j] + dh_gates[i, j]
            dx_seq[t] = np.dot(dr_pre, w_r) + np.dot(dz_pre, w_z) + np.dot(dc_pre, w_c)
        dh0 = carry * unit_mask
        return (dx_seq, dh0, dw_r, dw_z, dw_c, du_r, du_z, du_c,
                db_r, db_z, db_c)

    @njit(cache=True)
    def rmsprop_update_numba(p, g, v, lr, decay, eps):
        n = p.shape[0]
        for i in range(n):
            gi = g[i]
            vi = decay * v[i] + (1.0 - decay) * gi * gi
            v[i] = vi
            p[i] -= lr * gi / (np.sqrt(vi) + eps)

    @njit(cache=True)
    def sgd_update_numba(p, g, lr):
        n = p.shape[0]
        for i in range(n):
            p[i] -= lr * g[i]


USING_NUMBA = HAVE_NUMBA and _env_wants_numba()

if USING_NUMBA:
    dense_forward = dense_forward_numba
    dense_backward = dense_backward_numba
    gru_forward_seq = gru_forward_seq_numba
    gru_backward_seq = gru_backward_seq_numba
    rmsprop_update = rmsprop_update_numba
    sgd_update = sgd_update_numba
else:
    dense_forward = dense_forward_numpy
    dense_backward = dense_backward_numpy
    gru_forward_seq = gru_forward_seq_numpy
    gru_backward_seq = gru_backward_seq_numpy
    rmsprop_update = rmsprop_update_numpy
    sgd_update = sgd_update_numpy
