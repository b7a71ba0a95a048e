"""Rank-modulated and LoRA-adapted 1-D convolutions.

A conv weight ``(C_out, C_in, k)`` is viewed as a matrix ``(C_out*k, C_in)``
(rows indexed by output channel and tap, columns by input channel). Rank
modulation factors that matrix with an SVD and splits the factors at rank
``r``: the top-``r`` singular triplets are trainable, the rest are frozen,
and the forward pass runs one ordinary convolution with the summed weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import (
    DimensionError,
    Parameter,
    Tensor,
    _make,
    add,
    conv1d,
    conv_output_length,
    grad_enabled,
    matmul,
    mul,
    no_grad,
    qr_orthonormalize,
    reshape,
    svd,
    transpose,
)


@dataclass(frozen=True)
class ConvGeometry:
    c_out: int
    c_in: int
    k: int
    stride: int = 1
    padding: int = 0

    @property
    def m(self) -> int:
        return self.c_out * self.k

    @property
    def n(self) -> int:
        return self.c_in

    @property
    def r_max(self) -> int:
        return min(self.m, self.n)

    @property
    def lora_r_max(self) -> int:
        # rank bound of the (C_out) x (C_in*k) adapter product
        return min(self.c_out, self.c_in * self.k)

    def out_length(self, length: int) -> int:
        return conv_output_length(length, self.k, self.stride, self.padding)


def reshape_conv_to_matrix(w: np.ndarray) -> np.ndarray:
    c_out, c_in, k = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 1)).reshape(c_out * k, c_in)


def reshape_matrix_to_conv(wm, c_out: int, c_in: int, k: int):
    """Inverse of ``reshape_conv_to_matrix``; differentiable when given a Tensor."""
    if isinstance(wm, Tensor):
        return transpose(reshape(wm, (c_out, k, c_in)), (0, 2, 1))
    return np.ascontiguousarray(np.asarray(wm).reshape(c_out, k, c_in).transpose(0, 2, 1))


def _clamp_rank(r: int, hi: int, what: str) -> int:
    if r < 1 or r > hi:
        clamped = min(max(int(r), 1), hi)
        warnings.warn(f"{what} rank {r} outside [1, {hi}]; clamped to {clamped}", stacklevel=3)
        return clamped
    return int(r)


class FactoredMatrix:
    """SVD factors of a weight matrix split into trainable and frozen parts.

    ``frozen_product`` caches ``u_frozen diag(s_frozen) v_frozen^T``; it is
    recomputed from the stored frozen factors only, so a reloaded matrix
    reproduces it bitwise.
    """

    def __init__(self, u_train, s_train, v_train, u_frozen, s_frozen, v_frozen):
        self.u_train = Parameter(u_train, requires_grad=True)
        self.s_train = Parameter(s_train, requires_grad=True)
        self.v_train = Parameter(v_train, requires_grad=True)
        self.u_frozen = Parameter(u_frozen, requires_grad=False)
        self.s_frozen = Parameter(s_frozen, requires_grad=False)
        self.v_frozen = Parameter(v_frozen, requires_grad=False)
        self.frozen_product = (self.u_frozen.data * self.s_frozen.data) @ self.v_frozen.data.T

    @property
    def m(self) -> int:
        return self.u_train.shape[0]

    @property
    def n(self) -> int:
        return self.v_train.shape[0]

    @property
    def r(self) -> int:
        return self.s_train.shape[0]

    @property
    def p(self) -> int:
        return min(self.m, self.n)

    @property
    def dtype(self):
        return self.u_train.dtype

    def trainable(self) -> dict[str, Parameter]:
        return {"u_train": self.u_train, "s_train": self.s_train, "v_train": self.v_train}

    def frozen(self) -> dict[str, Parameter]:
        return {"u_frozen": self.u_frozen, "s_frozen": self.s_frozen, "v_frozen": self.v_frozen}

    def parameters(self) -> dict[str, Parameter]:
        return {**self.trainable(), **self.frozen()}

    def trainable_product(self) -> np.ndarray:
        return (self.u_train.data * self.s_train.data) @ self.v_train.data.T


def svd_partition(w, r: int, dtype=None) -> FactoredMatrix:
    """Factor ``w`` (m x n) and split at rank ``r`` (clamped to [1, min(m, n)])."""
    w = np.asarray(w)
    dtype = np.dtype(dtype) if dtype is not None else w.dtype
    m, n = w.shape
    r = _clamp_rank(r, min(m, n), "svd_partition")
    res = svd(w)
    V = res.Vt.T
    return FactoredMatrix(
        res.U[:, :r].astype(dtype),
        res.S[:r].astype(dtype),
        V[:, :r].astype(dtype),
        res.U[:, r:].astype(dtype),
        res.S[r:].astype(dtype),
        V[:, r:].astype(dtype),
    )


def merge(f: FactoredMatrix, conv_shape=None) -> Tensor:
    """Effective weight ``W_train + W_frozen``; differentiable in the trainable factors.

    One graph node: the backward pass projects the incoming weight gradient
    onto the trainable factors with two GEMMs of cost m*n*r each, so its cost
    shrinks with the trainable rank. With ``conv_shape`` = (c_out, c_in, k)
    the result is returned directly in conv layout.
    """
    u, s, v = f.u_train.data, f.s_train.data, f.v_train.data
    wm = (u * s) @ v.T + f.frozen_product
    if conv_shape is not None:
        c_out, c_in, k = conv_shape
        out = np.ascontiguousarray(wm.reshape(c_out, k, c_in).transpose(0, 2, 1))
    else:
        out = wm

    def backward(g):
        if conv_shape is not None:
            g = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(wm.shape)
        gv_ = g @ v
        return gv_ * s, np.einsum("ij,ij->j", u, gv_), (g.T @ u) * s

    return _make(out, (f.u_train, f.s_train, f.v_train), backward)


def set_trainable_rank(f: FactoredMatrix, r_new: int) -> FactoredMatrix:
    """Re-SVD the merged weight and re-partition at ``r_new``; no-op when unchanged."""
    r_new = _clamp_rank(r_new, f.p, "set_trainable_rank")
    if r_new == f.r:
        return f
    w = f.trainable_product().astype(np.float64) + f.frozen_product.astype(np.float64)
    return svd_partition(w, r_new, dtype=f.dtype)


def qr_refresh(f: FactoredMatrix) -> FactoredMatrix:
    """Re-orthonormalise the trainable factors in place.

    ``u = Q_u R_u`` and ``v = Q_v R_v``; the triangular residues are folded
    into ``s_train`` through their diagonals only, which is exact when the
    factors were already orthonormal and approximate otherwise.
    """
    qu = qr_orthonormalize(f.u_train.data.astype(np.float64))
    qv = qr_orthonormalize(f.v_train.data.astype(np.float64))
    s_new = np.diag(qu.r) * f.s_train.data.astype(np.float64) * np.diag(qv.r)
    f.u_train.assign(qu.q.astype(f.dtype))
    f.v_train.assign(qv.q.astype(f.dtype))
    f.s_train.assign(s_new.astype(f.dtype))
    return f


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _init_conv_weight(rng: np.random.Generator, geom: ConvGeometry, dtype) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(geom.c_in * geom.k)
    w = rng.uniform(-bound, bound, size=(geom.c_out, geom.c_in, geom.k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(geom.c_out,)).astype(dtype)
    return w, b


class PlainConv:
    kind = "plain"

    def __init__(self, geom: ConvGeometry, weight: np.ndarray, bias: np.ndarray):
        self.geom = geom
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)

    @classmethod
    def init(cls, geom: ConvGeometry, rng: np.random.Generator, dtype=np.float32) -> "PlainConv":
        return cls(geom, *_init_conv_weight(rng, geom, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.geom.stride, self.geom.padding)

    def effective_weight(self) -> np.ndarray:
        return self.weight.data

    def parameters(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}

    @property
    def rank(self) -> int:
        return self.geom.r_max


class FactoredConv:
    """Conv layer whose weight is held as a ``FactoredMatrix``."""

    kind = "factored"

    def __init__(self, geom: ConvGeometry, factors: FactoredMatrix, bias):
        if (factors.m, factors.n) != (geom.m, geom.n):
            raise DimensionError(f"factors {factors.m}x{factors.n} do not match geometry {geom}")
        self.geom = geom
        self.factors = factors
        self.bias = bias if isinstance(bias, Parameter) else Parameter(bias)
        self._cache_key = None
        self._cache = None

    @classmethod
    def from_weight(cls, geom: ConvGeometry, weight: np.ndarray, bias, r: int) -> "FactoredConv":
        r = min(max(int(r), 1), geom.r_max)
        fm = svd_partition(reshape_conv_to_matrix(weight), r, dtype=weight.dtype)
        return cls(geom, fm, bias)

    @property
    def rank(self) -> int:
        return self.factors.r

    def __call__(self, x: Tensor) -> Tensor:
        return factored_conv_forward(x, self, self.geom, self.bias)

    def weight_tensor(self) -> Tensor:
        """Merged conv-layout weight as a constant (cached on factor versions)."""
        g = self.geom
        f = self.factors
        key = (f, f.u_train.version, f.s_train.version, f.v_train.version)
        if self._cache_key is None or key[0] is not self._cache_key[0] or key[1:] != self._cache_key[1:]:
            wm = f.trainable_product() + f.frozen_product
            self._cache = reshape_matrix_to_conv(wm, g.c_out, g.c_in, g.k)
            self._cache_key = key
        return Tensor(self._cache)

    def effective_weight(self) -> np.ndarray:
        with no_grad():
            return self.weight_tensor().data.copy()

    def set_rank(self, r: int) -> None:
        r = min(max(int(r), 1), self.geom.r_max)
        self.factors = set_trainable_rank(self.factors, r)

    def parameters(self) -> dict[str, Parameter]:
        return {**self.factors.parameters(), "bias": self.bias}


def _weight_grad_route(geom: ConvGeometry, rows: int, r: int) -> str:
    """Cheaper of the two ways to get the trainable-factor gradients, by MAC count.

    ``dense`` forms the full conv weight gradient (rows * C_out * C_in * k)
    and projects it onto the factors (2 * m * n * r). ``lowrank`` projects
    the input onto V and the output gradient onto U first and then contracts
    per kernel tap, which costs rows * r * (C_in + 2k * C_out + k * C_in) and
    never materialises dW. Skinny products run at lower BLAS efficiency than
    the single large dW product, and dW shares its input traversal with the
    input-gradient pass; measured on the toy net, ``lowrank`` only pays off
    once it needs about a quarter of the dense MACs.
    """
    dense = rows * geom.c_out * geom.c_in * geom.k + 2 * geom.m * geom.n * r
    low = rows * r * (geom.c_in + 2 * geom.k * geom.c_out + geom.k * geom.c_in)
    return "lowrank" if 4 * low < dense else "dense"


def _factored_conv_graph(x: Tensor, layer: "FactoredConv", bias, route: str) -> Tensor:
    g_ = layer.geom
    f = layer.factors
    u, s, v = f.u_train.data, f.s_train.data, f.v_train.data
    w = layer.weight_tensor().data
    xd = x.data
    B, _, L = xd.shape
    lout = g_.out_length(L)
    out = _kernels.conv1d_forward(xd, w, g_.stride, g_.padding)
    if bias is not None:
        out = out + bias.data[None, :, None]
    rows = B * lout
    if route == "auto":
        route = _weight_grad_route(g_, rows, f.r)
    elif route not in ("dense", "lowrank"):
        raise ValueError(f"unknown weight-gradient route {route!r}")
    need_f = f.u_train.requires_grad

    def backward(grad):
        gx, gw = _kernels.conv1d_backward(
            grad, xd, w, g_.stride, g_.padding, need_x=x.requires_grad, need_w=need_f and route == "dense"
        )
        gb = grad.sum(axis=(0, 2)) if bias is not None else None
        if not need_f:
            return gx, None, None, None, gb
        k, c_in, c_out, r = g_.k, g_.c_in, g_.c_out, f.r
        if route == "dense":
            gm = np.ascontiguousarray(gw.transpose(0, 2, 1)).reshape(g_.m, g_.n)
            a = gm @ v
            bm = gm.T @ u
        else:
            pad = g_.padding
            xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
            xt = np.ascontiguousarray(xp.transpose(0, 2, 1))  # (B, L+2pad, C_in)
            xv = xt @ v  # input projected onto the trainable right factor
            g2 = np.ascontiguousarray(grad.transpose(0, 2, 1)).reshape(rows, c_out)
            q = (g2 @ u.reshape(c_out, k * r)).reshape(B, lout, k, r)
            span = g_.stride * (lout - 1) + 1
            dt = np.result_type(xd, grad, v)
            a = np.empty((c_out, k, r), dtype=dt)
            bm = np.zeros((c_in, r), dtype=dt)
            for j in range(k):
                a[:, j, :] = g2.T @ xv[:, j:j + span:g_.stride, :].reshape(rows, r)
                bm += xt[:, j:j + span:g_.stride, :].reshape(rows, c_in).T @ q[:, :, j, :].reshape(rows, r)
            a = a.reshape(g_.m, r)
        return gx, a * s, np.einsum("ij,ij->j", u, a), bm * s, gb

    parents = (x, f.u_train, f.s_train, f.v_train, bias if bias is not None else Tensor(np.zeros(1)))
    return _make(out, parents, backward)


def factored_conv_forward(x: Tensor, layer: FactoredConv, geom: ConvGeometry, bias=None, route: str = "auto") -> Tensor:
    """One plain convolution with the merged weight.

    Under autodiff the layer is a single graph node whose backward pass
    yields gradients for the trainable factors directly (see
    ``_weight_grad_route``); the forward arithmetic is identical either way.
    """
    if layer.geom != geom:
        raise DimensionError(f"geometry {geom} does not match layer geometry {layer.geom}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.ndim != 3 or x.shape[1] != geom.c_in:
        raise DimensionError(f"expected input (B, {geom.c_in}, L), got {x.shape}")
    if grad_enabled():
        return _factored_conv_graph(x, layer, bias, route)
    return conv1d(x, layer.weight_tensor(), bias, geom.stride, geom.padding)


class LoraConv:
    """Frozen base convolution plus an ``alpha``-scaled low-rank adapter.

    ``w_down`` is ``(r, C_in, k)`` and ``w_up`` is ``(C_out, r, 1)``, used as a
    ``(C_out, r)`` channel mix. The adapter pair is multiplied out into a
    ``(C_out, C_in, k)`` delta and added to the base weight before a single
    convolution.
    """

    kind = "lora"

    def __init__(self, geom: ConvGeometry, w_conv, bias, w_down, w_up, alpha: float = 1.0):
        self.geom = geom
        self.w_conv = Parameter(w_conv, requires_grad=False)
        self.bias = bias if isinstance(bias, Parameter) else Parameter(bias)
        self.w_down = Parameter(w_down)
        self.w_up = Parameter(w_up)
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.alpha = float(alpha)

    @classmethod
    def wrap(cls, geom: ConvGeometry, w_conv: np.ndarray, bias, r: int, rng: np.random.Generator, alpha: float = 1.0):
        r = min(max(int(r), 1), geom.lora_r_max)
        dtype = w_conv.dtype
        std = 1.0 / np.sqrt(geom.c_in * geom.k)
        w_down = (rng.standard_normal((r, geom.c_in, geom.k)) * std).astype(dtype)
        w_up = np.zeros((geom.c_out, r, 1), dtype=dtype)
        return cls(geom, w_conv, bias, w_down, w_up, alpha)

    @property
    def r(self) -> int:
        return self.w_down.shape[0]

    rank = r

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(x, self)

    def delta(self) -> Tensor:
        g = self.geom
        up = reshape(self.w_up, (g.c_out, self.r))
        down = reshape(self.w_down, (self.r, g.c_in * g.k))
        return reshape(matmul(up, down), (g.c_out, g.c_in, g.k))

    def effective_weight(self) -> np.ndarray:
        return lora_merge(self)

    def parameters(self) -> dict[str, Parameter]:
        return {"w_conv": self.w_conv, "bias": self.bias, "w_down": self.w_down, "w_up": self.w_up}


def lora_forward(x: Tensor, layer: LoraConv) -> Tensor:
    g = layer.geom
    if layer.w_conv.shape != (g.c_out, g.c_in, g.k):
        raise DimensionError("LoRA base weight does not match its geometry")
    w = add(layer.w_conv, mul(layer.delta(), np.asarray(layer.alpha, dtype=layer.w_conv.dtype)))
    return conv1d(x, w, layer.bias, g.stride, g.padding)


def lora_merge(layer: LoraConv) -> np.ndarray:
    with no_grad():
        delta = layer.delta().data
    return layer.w_conv.data + np.asarray(layer.alpha, dtype=layer.w_conv.dtype) * delta


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def trainable_param_count(layer) -> int:
    """Trainable scalars of a factored matrix, factored conv or LoRA conv.

    Biases are counted for conv layers (always trainable); a bare
    ``FactoredMatrix`` has none.
    """
    if isinstance(layer, FactoredMatrix):
        return layer.r * (layer.m + layer.n + 1)
    if isinstance(layer, FactoredConv):
        return trainable_param_count(layer.factors) + layer.geom.c_out
    if isinstance(layer, LoraConv):
        return layer.r * (layer.geom.c_in * layer.geom.k + layer.geom.c_out) + layer.geom.c_out
    if isinstance(layer, PlainConv):
        return layer.weight.data.size + layer.bias.data.size
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


def conv_forward_flops(geom: ConvGeometry, length: int, batch: int = 1) -> int:
    """Multiply-accumulates of one convolution."""
    return batch * geom.c_out * geom.c_in * geom.k * geom.out_length(length)


def layer_forward_flops(layer, length: int, batch: int = 1) -> dict[str, int]:
    """Counted forward multiply-accumulates, split into conv and adapter parts.

    A factored layer runs a single convolution with its merged weight, so its
    count does not depend on the trainable rank. The weight reconstruction
    happens once per parameter update (cached between updates) and is
    reported under ``weight_refresh``, not as forward cost. A LoRA layer adds
    the ``C_out x r x (C_in*k)`` adapter product on every forward call.
    """
    geom = layer.geom
    conv = conv_forward_flops(geom, length, batch)
    out = {"conv": conv, "adapter": 0, "weight_refresh": 0}
    if isinstance(layer, LoraConv):
        out["adapter"] = geom.c_out * layer.r * geom.c_in * geom.k
    elif isinstance(layer, FactoredConv):
        out["weight_refresh"] = geom.m * geom.n * layer.rank
    out["total"] = out["conv"] + out["adapter"]
    return out
