"""Dense tensors with reverse-mode autodiff and the neural primitives.

Everything downstream (scan engine, blocks, the full network) runs on the
`Tensor` class defined here.  Storage is a contiguous numpy array, float32
by default; float64 end to end when a model is built in gradient-check
mode.  Reductions always accumulate in float64 regardless of storage dtype.

Tensors are immutable values once created: ops never write into their
inputs, and each op that participates in differentiation records a backward
closure on the output.  `backward()` on a scalar walks the tape in reverse
topological order.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class GeometryError(ValueError):
    """An operation would produce an empty or negative spatial extent."""


class AutodiffError(RuntimeError):
    """Misuse of the tape (backward on non-scalar, freed graph, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / target building)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, retain_graph: bool = False):
        """Propagate gradients from this scalar to every reachable tensor.

        The graph is released afterwards unless `retain_graph` is set; a
        second backward over a released graph raises.
        """
        if self.data.size != 1:
            raise AutodiffError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            if node._backward is not None:
                node.grad = None  # only leaves accumulate across calls
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not retain_graph and node is not self:
                node._parents = ()
                node._backward = None
        if not retain_graph:
            self._parents = ()
            self._backward = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, recording the tape only when it can matter."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _grad_enabled and any(
        p.requires_grad or p._backward is not None for p in parents
    )
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        data = a.data + s

        def bwd_s(g):
            a._accumulate(g)

        return _result(data, (a,), bwd_s)
    b = as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        data = a.data * s

        def bwd(g):
            a._accumulate(g * s)

        return _result(data, (a,), bwd)
    b = as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bwd)


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / a.data

    def bwd(g):
        a._accumulate(-g * data * data)

    return _result(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * data)

    return _result(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _result(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sig = _sigmoid_np(a.data)
    data = a.data * sig

    def bwd(g):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _result(data, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = _softplus_np(a.data)

    def bwd(g):
        a._accumulate(g * _sigmoid_np(a.data))

    return _result(data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    a = as_tensor(a)
    x = a.data
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
    data = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        a._accumulate(g * (cdf + x * pdf))

    return _result(data, (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data).reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _result(data, (a,), bwd)


def flip(a: Tensor, axis) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(np.flip(a.data, axis=axis))

    def bwd(g):
        a._accumulate(np.flip(g, axis=axis))

    return _result(data, (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; gradients scatter back into place."""
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(full[idx].shape)
        a._accumulate(full)

    return _result(data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _result(data, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _result(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulators regardless of storage dtype)
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    data = np.asarray(data, dtype=a.dtype)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g.reshape(()), a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _result(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a @ b` with numpy matmul semantics (supports stacked left operands)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _result(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({c},), got "
            f"{gamma.shape} / {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu.astype(x.dtype)
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        x._accumulate(inv * (dxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=red, dtype=np.float64).astype(gamma.dtype))
        beta._accumulate(g.sum(axis=red, dtype=np.float64).astype(beta.dtype))

    return _result(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, clamped borders)
# ---------------------------------------------------------------------------

_resize_cache: dict = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix realizing 1-D bilinear resampling."""
    key = (n_in, n_out, np.dtype(dtype).name)
    m = _resize_cache.get(key)
    if m is not None:
        return m
    out = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    out[np.arange(n_out), i0] += 1.0 - w1
    out[np.arange(n_out), i1] += w1
    m = out.astype(dtype)
    _resize_cache[key] = m
    return m


def bilinear_resize(x: Tensor, target) -> Tensor:
    """Resize an NCHW tensor to (H', W') spatial size.

    Separable form: Y = R_h X R_w^T, which makes the backward pass exact
    (transposed matrices) rather than a scatter.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got ndim {x.ndim}")
    ho, wo = int(target[0]), int(target[1])
    if ho < 1 or wo < 1:
        raise GeometryError(f"resize target must be positive, got {(ho, wo)}")
    n, c, h, w = x.shape
    if (ho, wo) == (h, w):
        # identity resize is exact by contract
        def bwd_id(g):
            x._accumulate(g)

        return _result(x.data.copy(), (x,), bwd_id)
    rh = _resize_matrix(h, ho, x.dtype)
    rw = _resize_matrix(w, wo, x.dtype)
    flat = x.data.reshape(n * c, h, w)
    data = np.matmul(np.matmul(rh, flat), rw.T).reshape(n, c, ho, wo)

    def bwd(g):
        gf = g.reshape(n * c, ho, wo)
        gx = np.matmul(np.matmul(rh.T, gf), rw).reshape(n, c, h, w)
        x._accumulate(gx)

    return _result(np.ascontiguousarray(data), (x,), bwd)


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation), grouped / strided / dilated
# ---------------------------------------------------------------------------


class ConvSpec:
    """Geometry bundle for conv2d: stride, padding, dilation, groups."""

    __slots__ = ("stride", "padding", "dilation", "groups")

    def __init__(self, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1):
        self.stride = (int(stride[0]), int(stride[1])) if not isinstance(stride, int) else (stride, stride)
        self.padding = (int(padding[0]), int(padding[1])) if not isinstance(padding, int) else (padding, padding)
        self.dilation = (int(dilation[0]), int(dilation[1])) if not isinstance(dilation, int) else (dilation, dilation)
        self.groups = int(groups)
        if min(self.stride) < 1 or min(self.dilation) < 1 or self.groups < 1:
            raise ShapeError(f"invalid ConvSpec: stride={self.stride} "
                             f"dilation={self.dilation} groups={self.groups}")
        if min(self.padding) < 0:
            raise ShapeError(f"negative padding {self.padding}")

    def __repr__(self):
        return (f"ConvSpec(stride={self.stride}, padding={self.padding}, "
                f"dilation={self.dilation}, groups={self.groups})")


def conv_output_size(h: int, w: int, kh: int, kw: int, spec: ConvSpec):
    sy, sx = spec.stride
    py, px = spec.padding
    dy, dx = spec.dilation
    ho = (h + 2 * py - dy * (kh - 1) - 1) // sy + 1
    wo = (w + 2 * px - dx * (kw - 1) - 1) // sx + 1
    return ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias=None, spec: ConvSpec | None = None) -> Tensor:
    """Cross-correlate NCHW input with an OIHW (per-group) kernel.

    The compute path works channels-last internally: the padded image is
    flattened row-major and each kernel tap becomes one GEMM over a
    contiguous offset slice, so no im2col buffer is ever materialized.
    """
    if spec is None:
        spec = ConvSpec()
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x and OIHW kernel, got "
                         f"{x.shape} / {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = kernel.shape
    g = spec.groups
    if cin % g != 0 or cout % g != 0:
        raise ShapeError(f"channels not divisible by groups: in={cin} out={cout} groups={g}")
    if cin_g != cin // g:
        raise ShapeError(f"kernel expects {cin_g} channels/group, input provides {cin // g}")
    ho, wo = conv_output_size(h, w, kh, kw, spec)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"conv2d output extent not positive: input {h}x{w}, kernel {kh}x{kw}, {spec}"
        )
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")

    py, px = spec.padding
    sy, sx = spec.stride
    dy, dx = spec.dilation
    hp, wp = h + 2 * py, w + 2 * px

    # channels-last padded buffer, flattened spatially
    xp = np.zeros((n, hp, wp, cin), dtype=x.dtype)
    xp[:, py:py + h, px:px + w, :] = np.moveaxis(x.data, 1, -1)
    xpf = xp.reshape(n, hp * wp, cin)

    kmat = kernel.data  # (cout, cin_g, kh, kw)

    if sy == 1 and sx == 1:
        m = (ho - 1) * wp + wo  # flat span covering all valid output rows
        ybig = np.zeros((n, m, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * dy * wp + j * dx
                sl = xpf[:, off:off + m, :]
                if g == 1:
                    ybig += np.matmul(sl, kmat[:, :, i, j].T)
                elif g == cin and cin_g == 1:
                    mult = cout // cin
                    tap = kmat[:, 0, i, j].reshape(cin, mult)
                    ybig += (sl[:, :, :, None] * tap[None, None]).reshape(n, m, cout)
                else:
                    slg = sl.reshape(n, m, g, cin_g)
                    tap = kmat[:, :, i, j].reshape(g, cout // g, cin_g)
                    ybig += np.einsum("nmgc,goc->nmgo", slg, tap).reshape(n, m, cout)
        # the flat span stops (wp - wo) short of the last padded row
        ypad = np.zeros((n, ho * wp, cout), dtype=x.dtype)
        ypad[:, :m] = ybig
        y = ypad.reshape(n, ho, wp, cout)[:, :, :wo, :]
    else:
        # strided path: gather windows per tap (rare in this model: patch stem)
        y = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                rows = xp[:, i * dy: i * dy + sy * ho: sy, j * dx: j * dx + sx * wo: sx, :]
                if g == 1:
                    y += np.matmul(rows, kmat[:, :, i, j].T)
                elif g == cin and cin_g == 1:
                    mult = cout // cin
                    tap = kmat[:, 0, i, j].reshape(cin, mult)
                    y += (rows[..., None] * tap[None, None, None]).reshape(n, ho, wo, cout)
                else:
                    rg = rows.reshape(n, ho, wo, g, cin_g)
                    tap = kmat[:, :, i, j].reshape(g, cout // g, cin_g)
                    y += np.einsum("nhwgc,goc->nhwgo", rg, tap).reshape(n, ho, wo, cout)

    if b is not None:
        y = y + b.data
    out_data = np.ascontiguousarray(np.moveaxis(y, -1, 1))

    parents = (x, kernel) if b is None else (x, kernel, b)

    def bwd(gout):
        gy = np.moveaxis(gout, 1, -1)  # (n, ho, wo, cout)
        gxp = np.zeros_like(xpf)
        gk = np.zeros_like(kmat)
        if sy == 1 and sx == 1:
            m = (ho - 1) * wp + wo
            gybig = np.zeros((n, ho * wp, cout), dtype=gy.dtype)
            gybig.reshape(n, ho, wp, cout)[:, :, :wo, :] = gy
            gybig = gybig[:, :m]
            for i in range(kh):
                for j in range(kw):
                    off = i * dy * wp + j * dx
                    sl = xpf[:, off:off + m, :]
                    if g == 1:
                        gk[:, :, i, j] += np.einsum("nmo,nmc->oc", gybig, sl,
                                                    optimize=True)
                        gxp[:, off:off + m, :] += np.matmul(gybig, kmat[:, :, i, j])
                    elif g == cin and cin_g == 1:
                        mult = cout // cin
                        gtap = np.einsum("nmcd,nmc->cd",
                                         gybig.reshape(n, m, cin, mult), sl,
                                         optimize=True)
                        gk[:, 0, i, j] += gtap.reshape(cout)
                        tap = kmat[:, 0, i, j].reshape(cin, mult)
                        gxp[:, off:off + m, :] += np.einsum(
                            "nmcd,cd->nmc", gybig.reshape(n, m, cin, mult), tap)
                    else:
                        slg = sl.reshape(n, m, g, cin_g)
                        gyg = gybig.reshape(n, m, g, cout // g)
                        gk[:, :, i, j] += np.einsum("nmgo,nmgc->goc", gyg, slg,
                                                    optimize=True).reshape(cout, cin_g)
                        tap = kmat[:, :, i, j].reshape(g, cout // g, cin_g)
                        gxp[:, off:off + m, :] += np.einsum(
                            "nmgo,goc->nmgc", gyg, tap).reshape(n, m, cin)
        else:
            gxp4 = gxp.reshape(n, hp, wp, cin)
            for i in range(kh):
                for j in range(kw):
                    rows = xp[:, i * dy: i * dy + sy * ho: sy, j * dx: j * dx + sx * wo: sx, :]
                    if g == 1:
                        gk[:, :, i, j] += np.einsum("nhwo,nhwc->oc", gy, rows,
                                                    optimize=True)
                        gxp4[:, i * dy: i * dy + sy * ho: sy,
                             j * dx: j * dx + sx * wo: sx, :] += np.matmul(gy, kmat[:, :, i, j])
                    elif g == cin and cin_g == 1:
                        mult = cout // cin
                        gyr = gy.reshape(n, ho, wo, cin, mult)
                        gk[:, 0, i, j] += np.einsum("nhwcd,nhwc->cd", gyr, rows,
                                                    optimize=True).reshape(cout)
                        tap = kmat[:, 0, i, j].reshape(cin, mult)
                        gxp4[:, i * dy: i * dy + sy * ho: sy,
                             j * dx: j * dx + sx * wo: sx, :] += np.einsum(
                                 "nhwcd,cd->nhwc", gyr, tap)
                    else:
                        rg = rows.reshape(n, ho, wo, g, cin_g)
                        gyg = gy.reshape(n, ho, wo, g, cout // g)
                        gk[:, :, i, j] += np.einsum("nhwgo,nhwgc->goc", gyg, rg,
                                                    optimize=True).reshape(cout, cin_g)
                        tap = kmat[:, :, i, j].reshape(g, cout // g, cin_g)
                        gxp4[:, i * dy: i * dy + sy * ho: sy,
                             j * dx: j * dx + sx * wo: sx, :] += np.einsum(
                                 "nhwgo,goc->nhwgc", gyg, tap).reshape(n, ho, wo, cin)
        gx = np.moveaxis(
            gxp.reshape(n, hp, wp, cin)[:, py:py + h, px:px + w, :], -1, 1)
        x._accumulate(np.ascontiguousarray(gx))
        kernel._accumulate(gk)
        if b is not None:
            b._accumulate(gy.sum(axis=(0, 1, 2), dtype=np.float64).astype(b.dtype))

    return _result(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# loss primitives
# ---------------------------------------------------------------------------


def bce_with_logits(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise binary cross entropy on logits, in the stable form
    max(x,0) - x*y + log(1 + exp(-|x|))."""
    x = as_tensor(x)
    y = as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"bce_with_logits shapes differ: {x.shape} vs {y.shape}")
    if np.any(y.data < 0) or np.any(y.data > 1):
        raise ValueError("bce_with_logits targets must lie in [0, 1]")
    xd = x.data
    data = np.maximum(xd, 0.0) - xd * y.data + np.log1p(np.exp(-np.abs(xd)))

    def bwd(g):
        x._accumulate(g * (_sigmoid_np(xd) - y.data))
        y._accumulate(g * (-xd))

    return _result(data, (x, y), bwd)


def smooth_l1(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise smooth-L1 with unit knee: 0.5 d^2 for |d|<1 else |d|-0.5."""
    x = as_tensor(x)
    y = as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {x.shape} vs {y.shape}")
    d = x.data - y.data
    ad = np.abs(d)
    data = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)

    def bwd(g):
        dd = g * np.clip(d, -1.0, 1.0)
        x._accumulate(dd)
        y._accumulate(-dd)

    return _result(data, (x, y), bwd)


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# finite differences (shared by the gradient-check suites)
# ---------------------------------------------------------------------------


def finite_difference(fn, tensors, eps: float = 1e-5):
    """Central finite-difference gradients of scalar `fn()` w.r.t. `tensors`.

    `fn` must recompute the forward pass from the tensors' current data on
    every call; data is perturbed in place and restored.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads
