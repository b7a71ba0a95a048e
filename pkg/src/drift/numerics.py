"""Small reverse-mode autodiff over numpy arrays, plus SVD/QR helpers.

Only what the conv U-Net needs is here: elementwise arithmetic with limited
broadcasting, 2-D matmul, conv1d, group norm, a few smooth nonlinearities,
reshapes and concatenation. ``svd`` and ``qr_orthonormalize`` operate on raw
arrays and never enter the graph.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


class NumericalError(ArithmeticError):
    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Leaf tensor with an always-allocated gradient buffer.

    ``version`` is bumped on every in-place value update so layers can cache
    quantities derived from the value.
    """

    __slots__ = ("version",)

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.array(data, copy=True, order="C"), requires_grad=requires_grad)
        self.grad = np.zeros_like(self.data)
        self.version = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def assign(self, value: np.ndarray) -> None:
        if value.shape != self.data.shape:
            raise DimensionError(f"assign shape {value.shape} != {self.data.shape}")
        self.data[...] = value
        self.version += 1


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)), using tanh(softplus(x)) = e(e+2) / (e(e+2) + 2), e = exp(x)."""
    x = a.data
    e = np.exp(np.minimum(x, 20.0))
    num = e * (e + 2.0)
    t = num / (num + 2.0)
    out = x * t

    def backward(g):
        sig = e / (1.0 + e)
        return (g * (t + x * (1.0 - t * t) * sig),)

    return _make(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if _fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), backward)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(data, tensors, backward)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Repeat each position along the last axis ``factor`` times."""
    shape = a.shape

    def backward(g):
        return (g.reshape(shape[:-1] + (shape[-1], factor)).sum(axis=-1),)

    return _make(np.repeat(a.data, factor, axis=-1), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (B, in) @ weight (in, out) + bias (out,)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def conv_output_length(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B, C_in, L) with w (C_out, C_in, k)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    k = w.shape[2]
    if stride < 1 or padding < 0 or k > x.shape[2] + 2 * padding:
        raise DimensionError(
            f"invalid conv geometry: L={x.shape[2]}, k={k}, stride={stride}, padding={padding}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = _kernels.conv1d_forward(xd, wd, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx, gw = _kernels.conv1d_backward(g, xd, wd, stride, padding, x.requires_grad, w.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2)) if bias.requires_grad else None

    return _make(out, parents, backward)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation over (channels-in-group, length) for x (B, C, L)."""
    B, C, L = x.shape
    if C % groups:
        raise DimensionError(f"{C} channels not divisible into {groups} groups")
    wd = weight.data
    out, xhat, inv = _kernels.group_norm_forward(x.data, groups, wd, bias.data, eps)

    def backward(g):
        gx, gw, gb = _kernels.group_norm_backward(g, xhat, inv, groups, wd)
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = add(pred, neg(target))
    return mean(square(diff))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# decompositions (outside the graph)
# ---------------------------------------------------------------------------


@dataclass
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt


def _sign_fix(U: np.ndarray, Vt: np.ndarray) -> None:
    """Make the first non-negligible entry of each U column positive."""
    if U.size == 0:
        return
    tol = np.finfo(U.dtype).eps * 16
    mask = np.abs(U) > tol
    first = np.where(mask.any(axis=0), mask.argmax(axis=0), 0)
    signs = np.sign(U[first, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    Vt *= signs[:, None]


def svd(a) -> SvdResult:
    """Thin SVD with non-increasing singular values and a fixed sign convention."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input contains non-finite entries")
    work = a.astype(np.float64, copy=False)
    try:
        U, S, Vt = np.linalg.svd(work, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg

        try:
            U, S, Vt = scipy.linalg.svd(work, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge after 2 LAPACK drivers: {exc}", iterations=None) from exc
    U = np.ascontiguousarray(U)
    Vt = np.ascontiguousarray(Vt)
    _sign_fix(U, Vt)
    return SvdResult(U, S, Vt)


@dataclass
class QrResult:
    q: np.ndarray
    r: np.ndarray
    deficient: list[int] = field(default_factory=list)

    @property
    def rank_deficient(self) -> bool:
        return bool(self.deficient)


def qr_orthonormalize(a, rtol: float = 1e-10) -> QrResult:
    """Orthonormal basis for range(a) via reduced QR, diag(R) made non-negative.

    Columns whose R diagonal is negligible are replaced by arbitrary unit
    vectors orthogonal to the rest, and their indices are listed in
    ``deficient``.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    m, r = a.shape
    if r > m:
        raise DimensionError(f"qr_orthonormalize needs r <= m, got {a.shape}")
    q, rr = np.linalg.qr(a)
    d = np.sign(np.diag(rr)).astype(a.dtype)
    d[d == 0] = 1
    q = q * d
    rr = rr * d[:, None]
    scale = max(float(np.abs(rr).max()) if rr.size else 0.0, np.finfo(a.dtype).tiny)
    deficient = [j for j in range(r) if abs(rr[j, j]) <= rtol * scale]
    if deficient:
        q = _complete_basis(q, deficient)
    return QrResult(q, rr, deficient)


def _complete_basis(q: np.ndarray, bad: list[int]) -> np.ndarray:
    q = q.copy()
    good = [j for j in range(q.shape[1]) if j not in bad]
    basis = [q[:, j] for j in good]
    candidates = iter(np.eye(q.shape[0], dtype=q.dtype))
    for j in bad:
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                q[:, j] = v / nv
                basis.append(q[:, j])
                break
    return q


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam keyed by parameter name.

    State for a name is dropped and re-created whenever the Parameter object
    bound to that name changes (a re-partitioned factor is a new object).
    Parameters with ``requires_grad=False`` are never touched.
    """

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def _slot(self, name: str, p: Parameter) -> dict:
        st = self.state.get(name)
        if st is None or st["ref"] is not p:
            st = {"ref": p, "t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            self.state[name] = st
        return st

    def step(self, params: Mapping[str, Parameter]) -> None:
        for name, p in params.items():
            if not p.requires_grad:
                continue
            st = self._slot(name, p)
            st["t"] += 1
            t = st["t"]
            _kernels.adam_update(
                p.data, p.grad, st["m"], st["v"], self.lr, self.b1, self.b2, self.eps,
                1.0 - self.b1**t, 1.0 - self.b2**t,
            )
            p.version += 1
        self.prune(params)

    def prune(self, params: Mapping[str, Parameter]) -> None:
        for name in [n for n in self.state if n not in params]:
            del self.state[name]

    def _live(self, params: Mapping[str, Parameter] | None):
        """State entries still bound to ``params`` (all entries when None).

        An entry whose parameter was replaced would be reset at the next step
        anyway, so leaving it out of a snapshot changes nothing.
        """
        for name, st in sorted(self.state.items()):
            if params is None or params.get(name) is st["ref"]:
                yield name, st

    def state_arrays(self, params: Mapping[str, Parameter] | None = None) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self._live(params):
            out[f"{name}/m"] = st["m"]
            out[f"{name}/v"] = st["v"]
        return out

    def state_steps(self, params: Mapping[str, Parameter] | None = None) -> dict[str, int]:
        return {name: st["t"] for name, st in self._live(params)}

    def load_state(self, params: Mapping[str, Parameter], arrays: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> None:
        self.state = {}
        for name, t in steps.items():
            p = params[name]
            self.state[name] = {"ref": p, "t": int(t), "m": arrays[f"{name}/m"].copy(), "v": arrays[f"{name}/v"].copy()}


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
