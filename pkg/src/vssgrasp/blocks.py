"""Architecture building blocks: gated scan blocks, over-parameterized
convolutions with inference-time folding, and patch-level resolution changes.

Feature maps are logically channels-last (B, H, W, C) between blocks, where
layer norms act on the trailing channel axis; convolutions and the 2-D scan
run channels-first.  `to_nchw` / `to_nhwc` make every conversion explicit.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .scan import NumericHealthError, selective_scan_tensor
from .tensor import ConvSpec, Tensor, conv2d, kaiming_uniform, layer_norm


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: tracks parameters and child modules by attribute."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def to_nchw(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


def to_nhwc(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(kaiming_uniform(rng, (in_dim, out_dim), in_dim, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Plain convolution layer (NCHW in/out)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1, groups: int = 1, bias: bool = True,
                 dtype=np.float32):
        self.spec = ConvSpec(stride=(stride, stride), padding=(padding, padding),
                             dilation=(dilation, dilation), groups=groups)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(
            kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel),
                            fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


# ---------------------------------------------------------------------------
# depthwise over-parameterized convolution
# ---------------------------------------------------------------------------


def doconv_compose(x: Tensor, depth: Tensor, mix: Tensor, bias,
                   spec: ConvSpec) -> Tensor:
    """Two-stage form: per-channel patch features, then channel mixing.

    depth: (C_in, D_mul, kh*kw) maps each input channel's patch to D_mul
    values; mix: (C_out, C_in, D_mul) contracts them to outputs.
    """
    c_in, d_mul, patch = depth.shape
    c_out = mix.shape[0]
    kh = kw = int(math.isqrt(patch))
    if kh * kw != patch:
        raise T.ShapeError(f"depth patch size {patch} is not square")
    dw_kernel = depth.reshape((c_in * d_mul, 1, kh, kw))
    dw_spec = ConvSpec(stride=spec.stride, padding=spec.padding,
                       dilation=spec.dilation, groups=c_in)
    mid = conv2d(x, dw_kernel, None, dw_spec)          # (N, C_in*D_mul, H', W')
    n, _, ho, wo = mid.shape
    mid = mid.reshape((n, c_in * d_mul, ho * wo)).transpose((0, 2, 1))
    y = mid @ mix.reshape((c_out, c_in * d_mul)).transpose((1, 0))
    y = y.transpose((0, 2, 1)).reshape((n, c_out, ho, wo))
    if bias is not None:
        y = y + bias.reshape((1, c_out, 1, 1))
    return y


def doconv_fold(depth: np.ndarray, mix: np.ndarray) -> np.ndarray:
    """Collapse the two stages into one plain OIHW kernel:
    K[o, i, m, n] = sum_d mix[o, i, d] * depth[i, d, (m, n)]."""
    c_in, d_mul, patch = depth.shape
    c_out = mix.shape[0]
    kh = kw = int(math.isqrt(patch))
    k = np.einsum("oid,idp->oip", mix.astype(np.float64), depth.astype(np.float64))
    return np.ascontiguousarray(k.reshape(c_out, c_in, kh, kw).astype(depth.dtype))


class DOConv2d(Module):
    """Convolution trained in over-parameterized (depthwise o mixing) form and
    foldable to a plain kernel for inference.

    The depthwise tensor starts as stacked identity blocks so the folded
    kernel equals the mixing weights at initialization.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, d_mul: int | None = None,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True, dtype=np.float32):
        patch = kernel * kernel
        if d_mul is None:
            d_mul = patch
        if d_mul < 1:
            raise T.ShapeError(f"d_mul must be >= 1, got {d_mul}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.d_mul = d_mul
        self.spec = ConvSpec(stride=(stride, stride), padding=(padding, padding),
                             dilation=(dilation, dilation), groups=1)
        eye = np.zeros((d_mul, patch), dtype=dtype)
        for d in range(min(d_mul, patch)):
            eye[d, d] = 1.0
        self.depth = Parameter(np.tile(eye, (in_ch, 1, 1)))
        fan_in = in_ch * patch
        self.mix = Parameter(kaiming_uniform(rng, (out_ch, in_ch, d_mul),
                                             fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None
        self._folded: Tensor | None = None

    def fold(self) -> np.ndarray:
        return doconv_fold(self.depth.data, self.mix.data)

    def fold_(self):
        """Switch this layer to the folded single-kernel form."""
        self._folded = Tensor(self.fold())

    def unfold_(self):
        self._folded = None

    def forward(self, x: Tensor) -> Tensor:
        if self._folded is not None:
            return conv2d(x, self._folded, self.bias, self.spec)
        return doconv_compose(x, self.depth, self.mix, self.bias, self.spec)


# ---------------------------------------------------------------------------
# 2-D selective scan over feature maps
# ---------------------------------------------------------------------------


class SS2D(Module):
    """Four-direction scan: unfold, per-direction selective scan with
    independent parameters, inverse-permute and sum."""

    def __init__(self, dim: int, rng: np.random.Generator, d_state: int = 16,
                 dt_rank: int | None = None, dtype=np.float32,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        self.dim = dim
        self.d_state = d_state
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(dim / 16))
        r, n = self.dt_rank, d_state
        a = np.tile(np.arange(1, n + 1, dtype=np.float64), (4, dim, 1))
        self.a_log = Parameter(np.log(a), dtype=dtype)
        std = dim ** -0.5
        self.x_proj = Parameter(
            rng.uniform(-std, std, size=(4, dim, r + 2 * n)), dtype=dtype)
        dt_std = r ** -0.5
        self.dt_proj = Parameter(
            rng.uniform(-dt_std, dt_std, size=(4, r, dim)), dtype=dtype)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=(4, dim)))
        dt = np.maximum(dt, 1e-4)
        self.dt_bias = Parameter(dt + np.log(-np.expm1(-dt)), dtype=dtype)
        self.d_skip = Parameter(np.ones((4, dim), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, C, H, W) -> (B, C, H, W), same geometry."""
        b, c, h, w = x.shape
        if c != self.dim:
            raise T.ShapeError(f"SS2D built for {self.dim} channels, got {c}")
        length = h * w
        d1 = x.reshape((b, c, length))
        d3 = T.transpose(x, (0, 1, 3, 2)).reshape((b, c, length))
        seqs = T.stack([d1, T.flip(d1, 2), d3, T.flip(d3, 2)], axis=1)
        seqs = T.transpose(seqs, (0, 1, 3, 2))            # (B, 4, L, C)

        proj = seqs @ self.x_proj                          # (B, 4, L, R+2N)
        r, n = self.dt_rank, self.d_state
        draw = proj[:, :, :, :r] @ self.dt_proj            # (B, 4, L, C)
        bs = proj[:, :, :, r:r + n]
        cs = proj[:, :, :, r + n:]
        y = selective_scan_tensor(seqs, draw, self.a_log, bs, cs,
                                  self.d_skip, self.dt_bias)

        y = T.transpose(y, (0, 1, 3, 2))                   # (B, 4, C, L)
        fwd = y[:, 0] + T.flip(y[:, 1], 2)
        col = y[:, 2] + T.flip(y[:, 3], 2)
        out = fwd.reshape((b, c, h, w)) + \
            T.transpose(col.reshape((b, c, w, h)), (0, 1, 3, 2))
        return out


class VssBlock(Module):
    """Gated residual block around the 2-D selective scan.

    y = x + Linear_out( LN2(SS2D(SiLU(DWConv(Linear_main(LN1 x)))))
                        * SiLU(Linear_gate(LN1 x)) )

    Input and output are channels-last with equal channel counts.
    """

    def __init__(self, dim: int, rng: np.random.Generator, d_state: int = 16,
                 expand: int = 2, dtype=np.float32, check_finite: bool = True):
        inner = dim * expand
        self.dim = dim
        self.inner = inner
        self.check_finite = check_finite
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.in_main = Linear(dim, inner, rng, dtype=dtype)
        self.in_gate = Linear(dim, inner, rng, dtype=dtype)
        self.dwconv = Conv2d(inner, inner, 3, rng, padding=1, groups=inner,
                             dtype=dtype)
        self.ss2d = SS2D(inner, rng, d_state=d_state, dtype=dtype)
        self.norm2 = LayerNorm(inner, dtype=dtype)
        self.out = Linear(inner, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        xn = self.norm1(x)
        gate = T.silu(self.in_gate(xn))
        main = to_nchw(self.in_main(xn))
        main = T.silu(self.dwconv(main))
        main = self.norm2(to_nhwc(self.ss2d(main)))
        y = x + self.out(main * gate)
        if self.check_finite and not np.isfinite(y.data).all():
            raise NumericHealthError("non-finite activations leaving scan block")
        return y


# ---------------------------------------------------------------------------
# patch-level resolution changes (channels-last throughout)
# ---------------------------------------------------------------------------


class PatchEmbed(Module):
    """Non-overlapping patch projection: (B,C,H,W) -> (B,H/p,W/p,dim)."""

    def __init__(self, in_ch: int, dim: int, rng: np.random.Generator,
                 patch: int = 4, dtype=np.float32):
        self.patch = patch
        self.proj = Conv2d(in_ch, dim, patch, rng, stride=patch, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % self.patch or w % self.patch:
            raise T.GeometryError(
                f"spatial extents {h}x{w} not divisible by patch {self.patch}")
        return self.norm(to_nhwc(self.proj(x)))


def neighborhood_gather(x: Tensor) -> Tensor:
    """(B,H,W,C) -> (B,H/2,W/2,4C): channel block g = 2j+i holds source
    position (2h+i, 2w+j)."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise T.GeometryError(f"cannot merge odd extents {h}x{w}")
    parts = [x[:, i::2, j::2, :] for j in (0, 1) for i in (0, 1)]
    return T.concat(parts, axis=3)


def pixel_scatter(y: Tensor, factor: int, out_c: int) -> Tensor:
    """(B,H,W,f*f*C) -> (B,H*f,W*f,C): inverse of `neighborhood_gather`'s
    block layout when factor == 2."""
    b, h, w, _ = y.shape
    y = y.reshape((b, h, w, factor, factor, out_c))      # blocks ordered (j, i)
    y = T.transpose(y, (0, 1, 4, 2, 3, 5))               # (B, H, i, W, j, C)
    return y.reshape((b, h * factor, w * factor, out_c))


class PatchMerge(Module):
    """2x2 neighborhood concat (4C) + norm + linear to 2C; halves H and W."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.dim = dim
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, 2 * dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduce(self.norm(neighborhood_gather(x)))


class PatchExpand(Module):
    """Linear to out_dim*factor^2 then pixel rearrangement; exact geometric
    inverse of PatchMerge's 2x2 gather when factor == 2."""

    def __init__(self, dim: int, factor: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.factor = factor
        self.out_dim = out_dim
        self.expand = Linear(dim, out_dim * factor * factor, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return pixel_scatter(self.expand(x), self.factor, self.out_dim)
