"""Minimal dense-tensor reverse-mode autodiff.

Covers exactly the operations the vessel losses and the small
encoder-decoder network need: elementwise arithmetic, sigmoid/log/exp/relu,
elementwise min with tie-split gradients, reductions, 2d convolution,
2x2 max-pooling, nearest-neighbor 2x upsampling, channel concat, column
gather/normalize and matmul for the contrastive head.

Tapes are define-by-run: every op links the output tensor to its parents
and stores a backward closure.  ``backward`` walks the graph once in
reverse topological order.  Checking mode (default on) validates finiteness
at construction and after every backward pass; the training fast path may
switch it off and use float32.
"""

from __future__ import annotations

import numpy as np

_CHECKING = True


def set_checking(enabled: bool) -> None:
    """Toggle checking mode (finiteness validation, domain errors)."""
    global _CHECKING
    _CHECKING = bool(enabled)


def checking() -> bool:
    return _CHECKING


class Tensor:
    """Dense n-d array with optional gradient tracking.

    Data is immutable by convention after construction; only ``grad`` is
    mutated (accumulated) during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _CHECKING and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are the only broadcast partner
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        out = _make(a.data + float(b), (a,), None)
        out._backward = lambda g: _accum(a, g)
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b)
    out = _make(a.data + b.data, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(scalar_mul(b, -1.0), float(a))
    _check_same_shape(a, b)
    out = _make(a.data - b.data, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return scalar_mul(a, float(b))
    if not isinstance(a, Tensor):
        return scalar_mul(b, float(a))
    _check_same_shape(a, b)
    out = _make(a.data * b.data, (a, b), None)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out._backward = bw
    return out


def scalar_mul(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(x.data * s, (x,), None)
    out._backward = lambda g: _accum(x, g * s)
    return out


def elementwise_min(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise minimum.  The gradient goes to the strictly smaller input;
    exact ties split it equally (symmetric under operand swap)."""
    _check_same_shape(a, b)
    out = _make(np.minimum(a.data, b.data), (a, b), None)

    def bw(g):
        lt = a.data < b.data
        gt = a.data > b.data
        tie = ~lt & ~gt
        _accum(a, g * (lt + 0.5 * tie))
        _accum(b, g * (gt + 0.5 * tie))

    out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), (x,), None)
    out._backward = lambda g: _accum(x, g * (x.data > 0))
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _make(y, (x,), None)
    out._backward = lambda g: _accum(x, g * y * (1.0 - y))
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    if _CHECKING and not np.all(np.isfinite(y)):
        raise FloatingPointError("overflow in exp")
    out = _make(y, (x,), None)
    out._backward = lambda g: _accum(x, g * y)
    return out


def log(x: Tensor) -> Tensor:
    if _CHECKING and np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    out = _make(np.log(x.data), (x,), None)
    out._backward = lambda g: _accum(x, g / x.data)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is passed through on the interior
    and zeroed where the clamp is active."""
    y = np.clip(x.data, lo, hi)
    out = _make(y, (x,), None)
    inside = (x.data > lo) & (x.data < hi)
    out._backward = lambda g: _accum(x, g * inside)
    return out


# ---------------------------------------------------------------------------
# reductions

def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    y = np.mean(x.data, axis=axis)
    out = _make(np.asarray(y), (x,), None)
    if axis is None:
        n = x.data.size

        def bw(g):
            _accum(x, np.full_like(x.data, float(g) / n))
    else:
        n = x.data.shape[axis]

        def bw(g):
            _accum(x, np.expand_dims(g, axis) / n * np.ones_like(x.data))

    out._backward = bw
    return out


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    y = np.sum(x.data, axis=axis)
    out = _make(np.asarray(y), (x,), None)
    if axis is None:
        def bw(g):
            _accum(x, np.full_like(x.data, float(g)))
    else:
        def bw(g):
            _accum(x, np.expand_dims(g, axis) * np.ones_like(x.data))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# network primitives

def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with k[F,C,kh,kw]."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.data.shape
    f, kc, kh, kw = k.data.shape
    if kc != c:
        raise ValueError(f"kernel channels {kc} != input channels {c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_data = np.zeros((n, f, oh, ow), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
            out_data += np.einsum("fc,nchw->nfhw", k.data[:, :, u, v], xs,
                                  optimize=True)
    if bias is not None:
        out_data += bias.data.reshape(1, f, 1, 1)
    parents = (x, k) if bias is None else (x, k, bias)
    out = _make(out_data, parents, None)

    def bw(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dk = np.zeros_like(k.data) if k.requires_grad else None
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
                if dk is not None:
                    dk[:, :, u, v] = np.einsum("nfhw,nchw->fc", g, xs,
                                               optimize=True)
                if dxp is not None:
                    dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                        np.einsum("fc,nfhw->nchw", k.data[:, :, u, v], g,
                                  optimize=True)
        if dk is not None:
            _accum(k, dk)
        if dxp is not None:
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    out._backward = bw
    return out


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on x[..., H, W]; H, W must be even.
    On ties within a window the gradient goes to the first max in scan order."""
    h, w = x.data.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError("maxpool2x needs even spatial dims")
    lead = x.data.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    # windows flattened in scan order (0,0),(0,1),(1,0),(1,1)
    flat = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = _make(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0],
                (x,), None)

    def bw(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dblocks = np.moveaxis(dflat.reshape(*lead, h // 2, w // 2, 2, 2), -2, -3)
        _accum(x, dblocks.reshape(x.data.shape))

    out._backward = bw
    return out


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of x[..., H, W]."""
    y = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    out = _make(y, (x,), None)
    h, w = x.data.shape[-2:]
    lead = x.data.shape[:-2]

    def bw(g):
        gb = g.reshape(*lead, h, 2, w, 2)
        _accum(x, gb.sum(axis=(-3, -1)))

    out._backward = bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis -3) of [..., C, H, W]."""
    if a.data.shape[:-3] != b.data.shape[:-3] or a.data.shape[-2:] != b.data.shape[-2:]:
        raise ValueError("concat_channels: incompatible shapes")
    ca = a.data.shape[-3]
    out = _make(np.concatenate([a.data, b.data], axis=-3), (a, b), None)

    def bw(g):
        _accum(a, g[..., :ca, :, :])
        _accum(b, g[..., ca:, :, :])

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# contrastive-head primitives

def gather_cols(x: Tensor, idx) -> Tensor:
    """Select columns of a 2-d tensor: out[:, j] = x[:, idx[j]]."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _make(x.data[:, idx], (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), idx), g)
        _accum(x, dx)

    out._backward = bw
    return out


def normalize_cols(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize each column of a 2-d tensor."""
    norms = np.sqrt(np.sum(x.data ** 2, axis=0) + eps)
    y = x.data / norms

    out = _make(y, (x,), None)

    def bw(g):
        dots = np.sum(g * y, axis=0)
        _accum(x, (g - y * dots) / norms)

    out._backward = bw
    return out


def select_channel(x: Tensor, c: int) -> Tensor:
    """Extract channel c of x[1, C, H, W] as an [H, W] tensor."""
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ValueError("select_channel expects [1, C, H, W]")
    out = _make(x.data[0, c], (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[0, c] = g
        _accum(x, dx)

    out._backward = bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _make(x.data.reshape(shape), (x,), None)
    out._backward = lambda g: _accum(x, g.reshape(x.data.shape))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data @ b.data, (a, b), None)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = bw
    return out


def transpose2d(x: Tensor) -> Tensor:
    out = _make(x.data.T, (x,), None)
    out._backward = lambda g: _accum(x, g.T)
    return out


# ---------------------------------------------------------------------------
# backward driver

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Each recorded op is visited exactly once, in
    reverse topological order.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if _CHECKING:
        for node in topo:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise FloatingPointError("non-finite gradient after backward")


def grad_check(f, xs, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare analytic gradients of scalar ``f(*xs)`` against central
    finite differences.  Runs in double precision; returns a report with the
    max relative error per input and overall."""
    xs = [Tensor(np.array(x.data if isinstance(x, Tensor) else x,
                          dtype=np.float64, copy=True), requires_grad=True)
          for x in xs]
    out = f(*xs)
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in xs]

    def eval_at():
        frozen = [Tensor(x.data.copy()) for x in xs]
        return float(f(*frozen).data)

    max_err = 0.0
    per_input = []
    for xi, x in enumerate(xs):
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = eval_at()
            flat[i] = orig - step
            fm = eval_at()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[xi]), np.abs(numeric)), 1e-3)
        err = float(np.max(np.abs(analytic[xi] - numeric) / denom)) if flat.size else 0.0
        per_input.append(err)
        max_err = max(max_err, err)
    return {"max_rel_err": max_err, "per_input": per_input, "passed": max_err < tol}
