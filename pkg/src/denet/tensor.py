"""Minimal dense tensor with reverse-mode differentiation.

Only the layer kinds needed by the detector are provided: convolution,
transposed convolution, batch normalization, ReLU, softmax, affine maps,
plus the handful of elementwise/reshaping ops used to wire them together.
Arrays are plain numpy arrays in row-major ``[N, C, H, W]`` layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LAYER_KINDS = ("conv", "deconv", "batchnorm", "relu", "softmax", "linear", "skip-add")


class Tensor:
    """An array that remembers how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every recorded ancestor."""
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that is not part of a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # small operator surface used by the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# --------------------------------------------------------------------------
# convolution kernels (shared by conv2d and deconv2d)


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    f, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(f, -1).T
    out = out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _check_conv_shapes(x_shape, w_shape, stride, pad, op):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"{op}: expected 4-d input and weights, got input {x_shape} and weights {w_shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"{op}: stride must be >= 1 and pad >= 0 (got stride={stride}, pad={pad})")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``."""
    _check_conv_shapes(x.shape, w.shape, stride, pad, "conv2d")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if wc != c:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weights {w.shape} expect {wc}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(f"conv2d: input {x.shape} too small for weights {w.shape} with pad {pad}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match weights {w.shape}")
    out, cols = _conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        out += b.data.reshape(1, f, 1, 1)
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = _col2im(g2 @ w.data.reshape(f, -1), x.shape, kh, kw, stride, pad, ho, wo) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def deconv_output_padding(kernel: int, stride: int, pad: int) -> int:
    """Output padding making a transposed convolution exactly ``stride`` times larger."""
    return stride + 2 * pad - kernel


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int | None = None) -> Tensor:
    """Transposed convolution of ``x[N,C,H,W]`` with ``w[C,F,k,k]`` to ``[N,F,stride*H,stride*W]``.

    This is the adjoint of ``conv2d(y, w, stride=stride, pad=pad)`` applied to a
    ``[N,F,stride*H,stride*W]`` input.
    """
    _check_conv_shapes(x.shape, w.shape, stride, 0 if pad is None else pad, "deconv2d")
    n, c, h, wd = x.shape
    wc, f, kh, kw = w.shape
    if wc != c:
        raise ValueError(f"deconv2d: input {x.shape} has {c} channels but weights {w.shape} expect {wc}")
    if kh != kw:
        raise ValueError(f"deconv2d: square kernels only, weights {w.shape}")
    if pad is None:
        pad = (kh - 1) // 2
    if deconv_output_padding(kh, stride, pad) < 0:
        raise ValueError(f"deconv2d: kernel {kh} with pad {pad} cannot produce a {stride}x upsampling")
    if b is not None and b.shape != (f,):
        raise ValueError(f"deconv2d: bias shape {b.shape} does not match weights {w.shape}")
    out_shape = (n, f, stride * h, stride * wd)
    if _out_extent(out_shape[2], kh, stride, pad) != h or _out_extent(out_shape[3], kw, stride, pad) != wd:
        raise ValueError(f"deconv2d: input {x.shape} and weights {w.shape} are not a valid {stride}x upsampling")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    out = _col2im(x2 @ w.data.reshape(c, -1), out_shape, kh, kw, stride, pad, h, wd)
    if b is not None:
        out += b.data.reshape(1, f, 1, 1)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx, _ = _conv_forward(g, w.data, stride, pad)
        if w.requires_grad:
            cols, _, _ = _im2col(g, kh, kw, stride, pad)
            gw = (x2.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# --------------------------------------------------------------------------
# normalization, activations, affine


@dataclass
class RunningMoments:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, moments: RunningMoments, train: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over axis 1 of a 2-d or 4-d input.

    In train mode the batch statistics are used and ``moments`` is updated as
    ``running = momentum * running + (1 - momentum) * batch`` (biased variance).
    """
    if x.data.ndim not in (2, 4):
        raise ValueError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    count = x.data.size // c
    if train:
        if count < 2:
            raise ValueError(f"batchnorm: train mode needs at least 2 values per channel, input {x.shape}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = moments.momentum
        moments.mean[...] = m * moments.mean + (1.0 - m) * mean
        moments.var[...] = m * moments.var + (1.0 - m) * var
    else:
        mean, var = moments.mean, moments.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                gx = (
                    inv.reshape(bshape)
                    / count
                    * (
                        count * gxhat
                        - gxhat.sum(axis=axes).reshape(bshape)
                        - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                    )
                )
            else:
                gx = gxhat * inv.reshape(bshape)
            gx = gx.astype(x.dtype, copy=False)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ValueError(f"softmax: axis {axis} of {x.shape} is empty")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with ``x[R, I]``, ``w[I, O]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias {b.shape} does not match weights {w.shape}")
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# --------------------------------------------------------------------------
# plumbing ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _result(a.data * a.dtype.type(k), (a,), lambda g: (g * a.dtype.type(k),))


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index, axis: int) -> Tensor:
    """Select a single index along ``axis`` (dropping the axis)."""
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (a,), backward)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split ``a`` along axis 1 into consecutive blocks of the given sizes."""
    if sum(sizes) != a.shape[1]:
        raise ValueError(f"split_channels: sizes {tuple(sizes)} do not sum to {a.shape[1]}")
    outs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_result(a.data[:, lo:hi], (a,), backward))
        start = hi
    return outs


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(data, tuple(parts), backward)


def nll(probs: Tensor, onehot: np.ndarray, floor: float = 1e-12) -> Tensor:
    """``-sum(onehot * ln(max(probs, floor)))`` as a scalar."""
    if probs.shape != onehot.shape:
        raise ValueError(f"nll: probabilities {probs.shape} and targets {onehot.shape} differ")
    p = probs.data
    safe = np.maximum(p, floor)
    value = -(onehot * np.log(safe)).sum()

    def backward(g):
        return (np.where(p > floor, -g * onehot / safe, 0.0).astype(probs.dtype),)

    return _result(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def smooth_l1_sum(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of smooth-L1 over ``pred - target`` for rows where ``mask`` is true."""
    d = pred.data - target
    m = np.asarray(mask, dtype=pred.dtype).reshape(-1, *([1] * (d.ndim - 1)))
    ad = np.abs(d)
    value = (np.where(ad < 1.0, 0.5 * d * d, ad - 0.5) * m).sum()

    def backward(g):
        return ((g * np.clip(d, -1.0, 1.0) * m).astype(pred.dtype),)

    return _result(np.asarray(value, dtype=pred.dtype), (pred,), backward)


def gather_cells(fmap: Tensor, batch_index: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Nearest-neighbour reads from ``fmap[N,F,H,W]``.

    ``ys``/``xs`` are ``[R, P]`` integer cell indices and ``batch_index`` is
    ``[R]``; the result is ``[R, P*F]`` laid out point-major.
    """
    n, f, h, w = fmap.shape
    hwc = fmap.data.transpose(0, 2, 3, 1)
    b = batch_index[:, None]
    picked = hwc[b, ys, xs]
    r, p = ys.shape
    out = picked.reshape(r, p * f)

    def backward(g):
        acc = np.zeros((n, h, w, f), dtype=fmap.dtype)
        np.add.at(acc, (np.broadcast_to(b, ys.shape), ys, xs), g.reshape(r, p, f))
        return (acc.transpose(0, 3, 1, 2),)

    return _result(np.ascontiguousarray(out), (fmap,), backward)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride extents must be positive: {self}")
        if self.kind in ("conv", "deconv", "linear") and self.filters < 1:
            raise ValueError(f"{self.kind} layer needs a positive filter count")


@dataclass
class Param:
    value: Tensor
    is_weight: bool

    @property
    def grad(self) -> np.ndarray:
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g


@dataclass
class ParamStore:
    """Named trainable tensors plus non-trainable buffers (batchnorm moments)."""

    params: dict[str, Param] = field(default_factory=dict)
    moments: dict[str, RunningMoments] = field(default_factory=dict)

    def add(self, path: str, value: np.ndarray, is_weight: bool) -> Tensor:
        if path in self.params:
            raise KeyError(f"parameter {path!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self.params[path] = Param(t, is_weight)
        return t

    def add_moments(self, path: str, channels: int, dtype) -> RunningMoments:
        if path in self.moments:
            raise KeyError(f"moments {path!r} registered twice")
        m = RunningMoments(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))
        self.moments[path] = m
        return m

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path].value

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array, parameters first then moments, in registration order."""
        out = {k: p.value.data for k, p in self.params.items()}
        for k, m in self.moments.items():
            out[f"{k}.running_mean"] = m.mean
            out[f"{k}.running_var"] = m.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.named_arrays()
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, dst in expected.items():
            src = arrays[k]
            if src.shape != dst.shape:
                raise ValueError(f"parameter {k}: stored shape {src.shape} != model shape {dst.shape}")
            dst[...] = src


def he_sigma(filters: int, kh: int, kw: int) -> float:
    """Standard deviation of N(0, sigma) with sigma^2 = 2 / (filters * kh * kw)."""
    return math.sqrt(2.0 / (filters * kh * kw))


def init_conv(store: ParamStore, path: str, shape: tuple, filters: int, rng: np.random.Generator, dtype, bias: bool = True):
    kh, kw = shape[-2], shape[-1]
    w = store.add(f"{path}.w", (rng.standard_normal(shape) * he_sigma(filters, kh, kw)).astype(dtype), True)
    b = store.add(f"{path}.b", np.zeros(filters, dtype=dtype), False) if bias else None
    return w, b


def init_weights(store: ParamStore, path: str, spec: LayerSpec, in_channels: int, rng: np.random.Generator, dtype=np.float32):
    """Register the parameters a layer of ``spec`` needs and return them."""
    kh, kw = spec.kernel
    f = spec.filters
    if spec.kind == "conv":
        return init_conv(store, path, (f, in_channels, kh, kw), f, rng, dtype)
    if spec.kind == "deconv":
        return init_conv(store, path, (in_channels, f, kh, kw), f, rng, dtype)
    if spec.kind == "linear":
        w = store.add(f"{path}.w", (rng.standard_normal((in_channels, f)) * he_sigma(f, 1, 1)).astype(dtype), True)
        b = store.add(f"{path}.b", np.zeros(f, dtype=dtype), False)
        return w, b
    if spec.kind == "batchnorm":
        g = store.add(f"{path}.gamma", np.ones(in_channels, dtype=dtype), False)
        b = store.add(f"{path}.beta", np.zeros(in_channels, dtype=dtype), False)
        store.add_moments(path, in_channels, dtype)
        return g, b
    return ()


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; a fixed random projection reduces its
    output to a scalar. Inputs are promoted to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrs, record):
        nonlocal probe
        ts = [Tensor(a, requires_grad=record) for a in arrs]
        out = fn(*ts)
        if probe is None:
            probe = rng.uniform(-1.0, 1.0, size=out.shape)
        return total(_result(out.data * probe, (out,), lambda g: (g * probe,))), ts

    loss, ts = scalar(arrays, True)
    loss.backward()
    worst = 0.0
    for t, a in zip(ts, arrays):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        numeric = np.empty_like(a)
        flat = a.reshape(-1)
        num = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar(arrays, False)[0].item()
            flat[i] = orig - eps
            lo = scalar(arrays, False)[0].item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
