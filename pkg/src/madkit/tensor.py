"""Dense float32 tensors with reverse-mode differentiation.

Only the kernels the multi-domain backbone needs are provided: 2-D
convolution, batch normalization, affine layers, and the handful of
elementwise / reshaping ops used by adapter folds and the training loss.
Reductions accumulate in float64; stored values are always float32.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericError

BN_MOMENTUM = 0.1

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A float32 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float32, copy=True, order="C")
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        data = np.asarray(arr, dtype=np.float32)
        t.data = data if data.flags.c_contiguous else data.copy(order="C")
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape, np.float32), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False):
        return cls(np.ones(shape, np.float32), requires_grad)

    # introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # autograd -------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("implicit gradient only defined for scalar outputs")
            grad = np.ones(self.shape, np.float64)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "backward pass")
                g32 = g.astype(np.float32)
                node.grad = g32 if node.grad is None else node.grad + g32
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, np.float64)

    # operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def _raise_item(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, np.float32))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    order.reverse()
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the float64 upstream gradient and returns one
    gradient (or None) per parent, in order.
    """
    _check_finite(data, name)
    out = Tensor._wrap(data)
    out._op = name
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise / shape ops -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, accumulated in float64."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = a64 @ b64

    def backward(g):
        return (g @ b64.T if a.requires_grad else None, a64.T @ g if b.requires_grad else None)

    return make_op(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, np.float32(0)), (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor) -> Tensor:
    out = np.array(a.data.sum(dtype=np.float64))
    return make_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array(a.data.mean(dtype=np.float64))
    return make_op(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "mean")


def place_center(a: Tensor, kernel: int, fill: float) -> Tensor:
    """Embed an [M, N] matrix at the spatial center of an [M, N, K, K] block.

    Every non-center position holds ``fill``. ``kernel`` must be odd.
    """
    if a.ndim != 2:
        raise DimensionError(f"place_center expects a matrix, got shape {a.shape}")
    c = (kernel - 1) // 2
    out = np.full(a.shape + (kernel, kernel), fill, np.float32)
    out[:, :, c, c] = a.data
    return make_op(out, (a,), lambda g: (g[:, :, c, c],), "place_center")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), dtype=np.float64)
    return make_op(out, (x,), lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape),), "avgpool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    x64, w64 = x.data.astype(np.float64), weight.data.astype(np.float64)
    out = x64 @ w64.T
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ w64 if x.requires_grad else None
        gw = g.T @ x64 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_op(out, parents, backward, "linear")


# convolution ---------------------------------------------------------------------


@dataclass
class FilterBank:
    """Convolution weights [M, N, K, K]; frozen banks never allocate gradients."""

    weights: Tensor
    frozen: bool = True

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        w = self.weights
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"filter bank must be [M, N, K, K], got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ConfigError(f"filter size K must be odd, got {w.shape[2]}")
        if self.frozen:
            w.requires_grad = False
            w.grad = None

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weights.shape


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, K: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """[B, N, Hp, Wp] (already padded) -> float64 [B*Ho*Wo, N*K*K]."""
    B, N = xp.shape[:2]
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = np.empty((B, Ho, Wo, N, K, K), np.float64)
    cols[...] = win.transpose(0, 2, 3, 1, 4, 5)
    return cols.reshape(B * Ho * Wo, N * K * K)


def _correlate(xp: np.ndarray, wmat: np.ndarray, K: int, stride: int, Ho: int, Wo: int) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col(xp, K, stride, Ho, Wo)
    out = (cols @ wmat.T).reshape(xp.shape[0], Ho, Wo, -1).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, filters: FilterBank | Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, N, H, W] input with [M, N, K, K] filters."""
    w = filters.weights if isinstance(filters, FilterBank) else filters
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and filters, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    B, N, H, W = x.shape
    M, Nw, K, K2 = w.shape
    if N != Nw or K != K2:
        raise DimensionError(f"conv2d: input channels {N} vs filter {w.shape}")
    Ho, Wo = conv_output_size(H, K, stride, padding), conv_output_size(W, K, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty ({Ho}x{Wo})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = w.data.reshape(M, N * K * K).astype(np.float64)
    out, cols = _correlate(xp, wmat, K, stride, Ho, Wo)

    def backward(g):
        gw = None
        if w.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, M)
            gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # full correlation of the (stride-dilated) output gradient with flipped, transposed filters
            Hd, Wd = (Ho - 1) * stride + 1, (Wo - 1) * stride + 1
            rh, rw = H + 2 * padding - K - (Hd - 1), W + 2 * padding - K - (Wd - 1)
            q = K - 1 - padding
            gp = np.zeros((B, M, Hd + 2 * q + rh, Wd + 2 * q + rw), np.float64)
            if q >= 0:
                gp[:, :, q : q + Hd : stride, q : q + Wd : stride] = g
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(N, M * K * K).astype(np.float64)
                gx, _ = _correlate(gp, wflip, K, 1, H, W)
            else:
                gx = _scatter_input_grad(g, wmat, B, N, H, W, K, stride, padding, Ho, Wo, M)
        return gx, gw

    return make_op(out, (x, w), backward, "conv2d")


def _scatter_input_grad(g, wmat, B, N, H, W, K, stride, padding, Ho, Wo, M):
    # padding > K - 1: windows can lie entirely in the padding; fall back to col2im
    dcols = (g.transpose(0, 2, 3, 1).reshape(-1, M) @ wmat).reshape(B, Ho, Wo, N, K, K)
    dxp = np.zeros((B, N, H + 2 * padding, W + 2 * padding), np.float64)
    for ki in range(K):
        for kj in range(K):
            dxp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += dcols[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, padding : padding + H, padding : padding + W]


# batch normalization -------------------------------------------------------------------


@dataclass
class BatchNormParams:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.running_mean = np.asarray(self.running_mean, np.float32).copy()
        self.running_var = np.asarray(self.running_var, np.float32).copy()
        c = self.channels
        if any(v.shape != (c,) for v in (self.shift.data, self.running_mean, self.running_var)):
            raise DimensionError("batch-norm parameter vectors must share one length")
        if self.epsilon <= 0 or (self.running_var < 0).any():
            raise DimensionError("batch-norm needs epsilon > 0 and non-negative running_var")

    @classmethod
    def identity(cls, channels: int, trainable: bool = True) -> "BatchNormParams":
        return cls(
            Tensor.ones(channels, trainable),
            Tensor.zeros(channels, trainable),
            np.zeros(channels, np.float32),
            np.ones(channels, np.float32),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def clone(self, trainable: bool = True) -> "BatchNormParams":
        return BatchNormParams(
            Tensor(self.scale.data, trainable),
            Tensor(self.shift.data, trainable),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.epsilon,
        )


def batchnorm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization of [B, C, H, W] input.

    Training mode uses batch statistics and updates the running estimates
    in place with momentum ``BN_MOMENTUM``; eval mode uses the running ones.
    """
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise DimensionError(f"batchnorm: input {x.shape} vs {params.channels} channels")
    scale, shift = params.scale, params.shift
    x64 = x.data.astype(np.float64)
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        params.running_mean = ((1 - BN_MOMENTUM) * params.running_mean + BN_MOMENTUM * mean).astype(np.float32)
        params.running_var = ((1 - BN_MOMENTUM) * params.running_var + BN_MOMENTUM * unbiased).astype(np.float32)
    else:
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x64 - mean[None, :, None, None]) * inv[None, :, None, None]
    s = scale.data.astype(np.float64)[None, :, None, None]
    out = xhat * s + shift.data[None, :, None, None]

    def backward(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * s
            if training:
                gx = (inv[None, :, None, None] / n) * (
                    n * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return make_op(out, (x, scale, shift), backward, "batchnorm")


# gradient checking ------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: tuple[int, int] | None = None
    tolerance: float = 1e-3
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    The error of one entry is ``|a - n| / max(|a|, |n|, s)`` where ``s`` is
    the largest analytic gradient magnitude in the same parameter tensor.
    Entries whose true gradient is tiny relative to their neighbours would
    otherwise divide float32 loss round-off (about ``ulp(loss) / step``) by
    a near-zero value. The perturbation uses the float32 values actually
    stored, so the divisor is ``x(+) - x(-)`` rather than ``2 * step``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    _check_finite(loss.data, "loss")
    loss.backward()
    worst, worst_at, worst_abs, count = 0.0, None, 0.0, 0
    rel_errors = []
    for pi, p in enumerate(params):
        analytic = np.zeros(p.size, np.float64) if p.grad is None else p.grad.astype(np.float64).reshape(-1)
        scale = float(np.abs(analytic).max()) if analytic.size else 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = np.float32(orig + step), np.float32(orig - step)
            with no_grad():
                flat[i] = hi
                lp = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = lo
                lm = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during finite differencing")
            numeric = (lp - lm) / (float(hi) - float(lo))
            err = abs(analytic[i] - numeric)
            denom = max(abs(analytic[i]), abs(numeric), scale)
            rel = err / denom if denom > 0 else 0.0
            rel_errors.append(rel)
            worst_abs = max(worst_abs, err)
            if rel > worst:
                worst, worst_at = rel, (pi, i)
            count += 1
    return GradCheckReport(worst, worst_abs, count, worst_at, tolerance, rel_errors)
