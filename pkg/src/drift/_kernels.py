"""Hot kernels (conv1d, group norm, Adam update) with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``DRIFT_DISABLE_NUMBA=1`` to
force the numpy path; it is also used automatically when numba cannot be
imported. ``set_backend`` switches at runtime (benchmarks and tests use it to
compare both paths in one process).

Both paths compute the convolution as im2col + GEMM, so they agree to
rounding; each path on its own is bitwise deterministic.
"""

from __future__ import annotations

import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("DRIFT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


BACKEND = "numba" if HAVE_NUMBA and not _env_disabled() else "numpy"


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    BACKEND = name


def get_backend() -> str:
    return BACKEND


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _im2col_np(x, k, stride, pad):
    B, C, L = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride, :]  # B, C, Lout, k
    lout = win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * lout, C * k), lout


def conv1d_forward_np(x, w, stride, pad):
    B = x.shape[0]
    cout, cin, k = w.shape
    cols, lout = _im2col_np(x, k, stride, pad)
    out = cols @ w.reshape(cout, cin * k).T
    return np.ascontiguousarray(out.reshape(B, lout, cout).transpose(0, 2, 1))


def conv1d_backward_np(g, x, w, stride, pad, need_x, need_w):
    B, cin, L = x.shape
    cout, _, k = w.shape
    lout = g.shape[2]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * lout, cout)
    gx = gw = None
    if need_w:
        cols, _ = _im2col_np(x, k, stride, pad)
        gw = (g2.T @ cols).reshape(cout, cin, k)
    if need_x:
        gcols = (g2 @ w.reshape(cout, cin * k)).reshape(B, lout, cin, k)
        gxp = np.zeros((B, cin, L + 2 * pad), dtype=x.dtype)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, pad : pad + L] if pad else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


# ---------------------------------------------------------------------------
# numba path: fused im2col / col2im loops around BLAS GEMM
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, pad):
        B, C, L = x.shape
        lout = (L + 2 * pad - k) // stride + 1
        cols = np.zeros((B * lout, C * k), dtype=x.dtype)
        for b in range(B):
            for t in range(lout):
                row = b * lout + t
                start = t * stride - pad
                for c in range(C):
                    base = c * k
                    for j in range(k):
                        idx = start + j
                        if idx >= 0 and idx < L:
                            cols[row, base + j] = x[b, c, idx]
        return cols, lout

    @njit(cache=True)
    def _conv1d_forward_nb(x, w, stride, pad):
        B = x.shape[0]
        cout, cin, k = w.shape
        cols, lout = _im2col_nb(x, k, stride, pad)
        wm = np.ascontiguousarray(w.reshape(cout, cin * k).T)
        prod = np.dot(cols, wm)
        out = np.empty((B, cout, lout), dtype=x.dtype)
        for b in range(B):
            for t in range(lout):
                row = b * lout + t
                for o in range(cout):
                    out[b, o, t] = prod[row, o]
        return out

    @njit(cache=True)
    def _conv1d_grad_w_nb(g, x, w, stride, pad):
        B, cin, L = x.shape
        cout, _, k = w.shape
        lout = g.shape[2]
        g2t = np.empty((cout, B * lout), dtype=g.dtype)
        for b in range(B):
            for o in range(cout):
                for t in range(lout):
                    g2t[o, b * lout + t] = g[b, o, t]
        cols, _ = _im2col_nb(x, k, stride, pad)
        return np.dot(g2t, cols).reshape(cout, cin, k)

    @njit(cache=True)
    def _conv1d_grad_x_nb(g, x, w, stride, pad):
        B, cin, L = x.shape
        cout, _, k = w.shape
        lout = g.shape[2]
        g2 = np.empty((B * lout, cout), dtype=g.dtype)
        for b in range(B):
            for t in range(lout):
                for o in range(cout):
                    g2[b * lout + t, o] = g[b, o, t]
        wm = np.ascontiguousarray(w.reshape(cout, cin * k))
        gcols = np.dot(g2, wm)
        gx = np.zeros((B, cin, L), dtype=x.dtype)
        for b in range(B):
            for t in range(lout):
                row = b * lout + t
                start = t * stride - pad
                for c in range(cin):
                    base = c * k
                    for j in range(k):
                        idx = start + j
                        if idx >= 0 and idx < L:
                            gx[b, c, idx] += gcols[row, base + j]
        return gx


def conv1d_forward_nb(x, w, stride, pad):
    # the compiled kernels need one dtype; promote as numpy would
    dt = np.result_type(x, w)
    return _conv1d_forward_nb(np.ascontiguousarray(x, dt), np.ascontiguousarray(w, dt), stride, pad)


def conv1d_backward_nb(g, x, w, stride, pad, need_x, need_w):
    dt = np.result_type(g, x, w)
    g = np.ascontiguousarray(g, dt)
    x = np.ascontiguousarray(x, dt)
    w = np.ascontiguousarray(w, dt)
    gx = _conv1d_grad_x_nb(g, x, w, stride, pad) if need_x else None
    gw = _conv1d_grad_w_nb(g, x, w, stride, pad) if need_w else None
    return gx, gw


def conv1d_forward(x, w, stride, pad):
    if BACKEND == "numba":
        return conv1d_forward_nb(x, w, stride, pad)
    return conv1d_forward_np(x, w, stride, pad)


def conv1d_backward(g, x, w, stride, pad, need_x=True, need_w=True):
    if BACKEND == "numba":
        return conv1d_backward_nb(g, x, w, stride, pad, need_x, need_w)
    return conv1d_backward_np(g, x, w, stride, pad, need_x, need_w)


# ---------------------------------------------------------------------------
# group norm (x: B, C, L) -> (out, xhat, inv_std)
# ---------------------------------------------------------------------------


def group_norm_forward_np(x, groups, w, b, eps):
    B, C, L = x.shape
    xg = x.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xc * inv).reshape(B, C, L)
    out = xhat * w[None, :, None] + b[None, :, None]
    return out, xhat, inv.reshape(B, groups)


def group_norm_backward_np(g, xhat, inv, groups, w):
    B, C, L = g.shape
    gw = (g * xhat).sum(axis=(0, 2))
    gb = g.sum(axis=(0, 2))
    gxhat = (g * w[None, :, None]).reshape(B, groups, -1)
    xh = xhat.reshape(B, groups, -1)
    gx = inv[:, :, None] * (
        gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True)
    )
    return gx.reshape(B, C, L), gw, gb


if HAVE_NUMBA:

    @njit(cache=True)
    def _group_norm_forward_nb(x, groups, w, b, eps):
        B, C, L = x.shape
        cpg = C // groups
        n = cpg * L
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty((B, groups), dtype=x.dtype)
        for bi in range(B):
            for gi in range(groups):
                c0 = gi * cpg
                s = 0.0
                for c in range(c0, c0 + cpg):
                    for t in range(L):
                        s += x[bi, c, t]
                mu = s / n
                v = 0.0
                for c in range(c0, c0 + cpg):
                    for t in range(L):
                        d = x[bi, c, t] - mu
                        v += d * d
                iv = 1.0 / np.sqrt(v / n + eps)
                inv[bi, gi] = iv
                for c in range(c0, c0 + cpg):
                    for t in range(L):
                        h = (x[bi, c, t] - mu) * iv
                        xhat[bi, c, t] = h
                        out[bi, c, t] = h * w[c] + b[c]
        return out, xhat, inv

    @njit(cache=True)
    def _group_norm_backward_nb(g, xhat, inv, groups, w):
        B, C, L = g.shape
        cpg = C // groups
        n = cpg * L
        gx = np.empty_like(g)
        gw = np.zeros(C, dtype=g.dtype)
        gb = np.zeros(C, dtype=g.dtype)
        for bi in range(B):
            for gi in range(groups):
                c0 = gi * cpg
                m1 = 0.0
                m2 = 0.0
                for c in range(c0, c0 + cpg):
                    for t in range(L):
                        gh = g[bi, c, t] * w[c]
                        m1 += gh
                        m2 += gh * xhat[bi, c, t]
                        gw[c] += g[bi, c, t] * xhat[bi, c, t]
                        gb[c] += g[bi, c, t]
                m1 /= n
                m2 /= n
                iv = inv[bi, gi]
                for c in range(c0, c0 + cpg):
                    for t in range(L):
                        gx[bi, c, t] = iv * (g[bi, c, t] * w[c] - m1 - xhat[bi, c, t] * m2)
        return gx, gw, gb

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, b1, a1, b2, a2, step, rc2, eps):
        # scalars arrive in the parameter dtype so the loop runs in that precision
        pf = p.ravel()
        gf = g.ravel()
        mf = m.ravel()
        vf = v.ravel()
        for i in range(pf.size):
            gi = gf[i]
            mi = b1 * mf[i] + a1 * gi
            vi = b2 * vf[i] + a2 * (gi * gi)
            mf[i] = mi
            vf[i] = vi
            pf[i] -= step * mi / (np.sqrt(vi) * rc2 + eps)


def group_norm_forward(x, groups, w, b, eps=1e-5):
    if BACKEND == "numba":
        return _group_norm_forward_nb(np.ascontiguousarray(x), groups, w, b, eps)
    return group_norm_forward_np(x, groups, w, b, eps)


def group_norm_backward(g, xhat, inv, groups, w):
    if BACKEND == "numba":
        return _group_norm_backward_nb(np.ascontiguousarray(g), xhat, inv, groups, w)
    return group_norm_backward_np(g, xhat, inv, groups, w)


def adam_update_np(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam moment and parameter update; c1, c2 are the bias corrections."""
    if BACKEND == "numba" and p.flags.c_contiguous and g.flags.c_contiguous:
        t = p.dtype.type
        _adam_update_nb(p, g, m, v, t(b1), t(1.0 - b1), t(b2), t(1.0 - b2), t(lr / c1), t(1.0 / math.sqrt(c2)), t(eps))
    else:
        adam_update_np(p, g, m, v, lr, b1, b2, eps, c1, c2)


def im2col(x, k, stride, pad):
    """(B, C, L) -> ((B * L_out), C * k) patch matrix with column order (c, j)."""
    if BACKEND == "numba":
        cols, _ = _im2col_nb(np.ascontiguousarray(x), k, stride, pad)
        return cols
    cols, _ = _im2col_np(x, k, stride, pad)
    return cols
