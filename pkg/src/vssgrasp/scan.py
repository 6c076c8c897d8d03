"""Selective state-space scan over four directional unfoldings of a feature map.

Three layers live here:

* reference numpy implementations of the scan recurrence (`selective_scan_seq`)
  and the work-efficient parallel form (`selective_scan_par`), plus the
  four-direction unfold/merge (`cross_scan` / `cross_merge` on raw arrays);
* fused numba kernels that run the same recurrence in a single pass
  (forward and hand-derived backward), used by the network;
* `SelectiveScanOp`-style autodiff binding (`selective_scan_tensor`) exposing
  the fused kernels to the tape.

The recurrence, per channel d and state n:

    h_t = exp(delta_t[d] * A[d, n]) * h_{t-1} + delta_t[d] * B_t[n] * x_t[d]
    y_t[d] = sum_n C_t[n] * h_t[d, n] + D_skip[d] * x_t[d]

with delta_t = softplus(up @ (lo @ x_t) + bias) > 0 and A = -exp(a_log) < 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .tensor import Tensor, _result, _softplus_np


class NumericHealthError(FloatingPointError):
    """A block produced non-finite activations."""


# ---------------------------------------------------------------------------
# parameter bundle (reference / functional surface)
# ---------------------------------------------------------------------------


@dataclass
class ScanParams:
    """Input-dependent state-space parameterization for one scan direction.

    a_log stores log(-A) so the recurrence matrix A = -exp(a_log) is strictly
    negative (decaying dynamics).  delta_lo/delta_up factor the step-size
    projection through a low-rank bottleneck.
    """

    a_log: np.ndarray      # (D, N)
    delta_lo: np.ndarray   # (R, D)
    delta_up: np.ndarray   # (D, R)
    delta_bias: np.ndarray  # (D,)
    b_proj: np.ndarray     # (N, D)
    c_proj: np.ndarray     # (N, D)
    d_skip: np.ndarray     # (D,)

    @property
    def dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def state(self) -> int:
        return self.a_log.shape[1]


def init_scan_params(rng: np.random.Generator, dim: int, state: int = 16,
                     dt_rank: int | None = None, dtype=np.float32,
                     dt_min: float = 1e-3, dt_max: float = 0.1) -> ScanParams:
    """Standard initialization: structured A spectrum, step sizes spread
    log-uniformly in [dt_min, dt_max], unit skip."""
    if dt_rank is None:
        dt_rank = max(1, math.ceil(dim / 16))
    a = np.tile(np.arange(1, state + 1, dtype=np.float64), (dim, 1))
    a_log = np.log(a).astype(dtype)
    std = dt_rank ** -0.5
    delta_lo = rng.uniform(-std, std, size=(dt_rank, dim)).astype(dtype)
    delta_up = rng.uniform(-std, std, size=(dim, dt_rank)).astype(dtype)
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=dim))
    dt = np.maximum(dt, 1e-4)
    # inverse of softplus so softplus(bias) lands on dt
    delta_bias = (dt + np.log(-np.expm1(-dt))).astype(dtype)
    bound = dim ** -0.5
    b_proj = rng.uniform(-bound, bound, size=(state, dim)).astype(dtype)
    c_proj = rng.uniform(-bound, bound, size=(state, dim)).astype(dtype)
    d_skip = np.ones(dim, dtype=dtype)
    return ScanParams(a_log, delta_lo, delta_up, delta_bias, b_proj, c_proj, d_skip)


def _coeffs(x: np.ndarray, p: ScanParams):
    """delta (...,L,D), Bs (...,L,N), Cs (...,L,N) from the input sequence."""
    raw = (x @ p.delta_lo.T) @ p.delta_up.T + p.delta_bias
    delta = _softplus_np(raw)
    bs = x @ p.b_proj.T
    cs = x @ p.c_proj.T
    return delta, bs, cs


def _affine_parts(x: np.ndarray, p: ScanParams, coeffs=None):
    if coeffs is None:
        delta, bs, cs = _coeffs(x, p)
    else:
        delta, bs, cs = (np.broadcast_to(np.asarray(c, dtype=x.dtype), s).copy()
                         for c, s in zip(coeffs, (x.shape,
                                                  x.shape[:-1] + (p.state,),
                                                  x.shape[:-1] + (p.state,))))
    a = -np.exp(p.a_log.astype(np.float64)).astype(x.dtype)
    abar = np.exp(delta[..., :, :, None] * a)           # (...,L,D,N)
    bbar = (delta * x)[..., :, :, None] * bs[..., :, None, :]
    return abar, bbar, cs, delta


# ---------------------------------------------------------------------------
# reference kernels
# ---------------------------------------------------------------------------


def _scan_seq_states(abar: np.ndarray, bbar: np.ndarray) -> np.ndarray:
    """Step-by-step recurrence h_t = a_t h_{t-1} + b_t along axis -3."""
    out = np.empty_like(bbar)
    h = np.zeros(bbar.shape[:-3] + bbar.shape[-2:], dtype=bbar.dtype)
    length = bbar.shape[-3]
    for t in range(length):
        h = abar[..., t, :, :] * h + bbar[..., t, :, :]
        out[..., t, :, :] = h
    return out


def _scan_par_states(abar: np.ndarray, bbar: np.ndarray) -> np.ndarray:
    """Work-efficient tree scan over the affine maps h -> a*h + b.

    Composition of "apply (a1,b1) then (a2,b2)" is (a1*a2, a2*b1 + b2).
    Sequence length is virtually padded to a power of two with identity
    maps (a=1, b=0); the input data is never padded.
    """
    length = bbar.shape[-3]
    tail = bbar.shape[-2] * bbar.shape[-1]
    lead = int(np.prod(bbar.shape[:-3], dtype=np.int64))
    p = 1 << max(length - 1, 0).bit_length() if length > 1 else 1

    a = np.ones((p, lead * tail), dtype=bbar.dtype)
    b = np.zeros((p, lead * tail), dtype=bbar.dtype)
    a[:length] = np.moveaxis(abar.reshape(lead, length, tail), 1, 0).reshape(length, -1)
    b[:length] = np.moveaxis(bbar.reshape(lead, length, tail), 1, 0).reshape(length, -1)

    # up-sweep: fold left child into right child
    d = 1
    while d < p:
        left = slice(d - 1, p - d, 2 * d)
        right = slice(2 * d - 1, p, 2 * d)
        b[right] = a[right] * b[left] + b[right]
        a[right] = a[right] * a[left]
        d *= 2

    # down-sweep: propagate exclusive prefixes
    a[p - 1] = 1.0
    b[p - 1] = 0.0
    d = p // 2
    while d >= 1:
        left = slice(d - 1, p - d, 2 * d)
        right = slice(2 * d - 1, p, 2 * d)
        ta = a[left].copy()
        tb = b[left].copy()
        a[left] = a[right]
        b[left] = b[right]
        b[right] = ta * b[right] + tb
        a[right] = ta * a[right]
        d //= 2

    excl_b = np.moveaxis(b[:length].reshape(length, lead, tail), 0, 1)
    excl_b = excl_b.reshape(bbar.shape)
    # inclusive state: apply own map to the exclusive prefix (h0 = 0)
    return abar * excl_b + bbar


def _contract_output(h: np.ndarray, cs: np.ndarray, x: np.ndarray,
                     d_skip: np.ndarray) -> np.ndarray:
    y = np.einsum("...ldn,...ln->...ld", h, cs)
    return y + d_skip * x


def selective_scan_seq(x: np.ndarray, params: ScanParams, coeffs=None) -> np.ndarray:
    """Sequential reference scan of an (..., L, D) sequence.

    `coeffs`, when given, freezes (delta, B, C) to explicit per-timestep
    values instead of deriving them from the input.
    """
    x = np.asarray(x)
    if x.shape[-1] != params.dim:
        raise ValueError(f"sequence dim {x.shape[-1]} != params dim {params.dim}")
    abar, bbar, cs, _ = _affine_parts(x, params, coeffs)
    h = _scan_seq_states(abar, bbar)
    return _contract_output(h, cs, x, params.d_skip)


def selective_scan_par(x: np.ndarray, params: ScanParams, coeffs=None) -> np.ndarray:
    """Parallel (tree) scan; contract identical to `selective_scan_seq`."""
    x = np.asarray(x)
    if x.shape[-1] != params.dim:
        raise ValueError(f"sequence dim {x.shape[-1]} != params dim {params.dim}")
    abar, bbar, cs, _ = _affine_parts(x, params, coeffs)
    h = _scan_par_states(abar, bbar)
    return _contract_output(h, cs, x, params.d_skip)


# ---------------------------------------------------------------------------
# four-direction unfold / merge (numpy index form)
# ---------------------------------------------------------------------------


@dataclass
class DirectionalSequences:
    """Four L-step unfoldings of an (N, C, H, W) map plus its geometry."""

    seqs: np.ndarray  # (N, 4, L, C)
    height: int
    width: int


def direction_orders(h: int, w: int) -> np.ndarray:
    """(4, H*W) table: row k lists flat row-major cell indices in visit order."""
    idx = np.arange(h * w).reshape(h, w)
    d1 = idx.reshape(-1)
    d3 = idx.T.reshape(-1)
    return np.stack([d1, d1[::-1], d3, d3[::-1]])


def cross_scan(feature: np.ndarray) -> DirectionalSequences:
    """Unfold NCHW into four directional (L, C) sequences.

    Directions: row-major, reversed row-major, column-major, reversed
    column-major.
    """
    feature = np.asarray(feature)
    n, c, h, w = feature.shape
    flat = feature.reshape(n, c, h * w)
    d1 = flat
    d3 = feature.transpose(0, 1, 3, 2).reshape(n, c, h * w)
    seqs = np.stack([d1, d1[..., ::-1], d3, d3[..., ::-1]], axis=1)
    return DirectionalSequences(np.ascontiguousarray(seqs.transpose(0, 1, 3, 2)),
                                h, w)


def cross_merge(seqs: DirectionalSequences) -> np.ndarray:
    """Invert each direction's permutation and sum the four maps."""
    s = seqs.seqs
    n, k, length, c = s.shape
    h, w = seqs.height, seqs.width
    if k != 4 or length != h * w:
        raise ValueError(f"expected (N,4,{h * w},C) sequences, got {s.shape}")
    s = s.transpose(0, 1, 3, 2)  # (N, 4, C, L)
    fwd = s[:, 0] + s[:, 1, :, ::-1]
    col = s[:, 2] + s[:, 3, :, ::-1]
    out = fwd.reshape(n, c, h, w) + col.reshape(n, c, w, h).transpose(0, 1, 3, 2)
    return np.ascontiguousarray(out)


def ss2d_forward(feature: np.ndarray, params: list[ScanParams],
                 kernel: str = "par") -> np.ndarray:
    """Reference 2-D selective scan: unfold, scan each direction with its own
    parameters, merge back to the input geometry."""
    if len(params) != 4:
        raise ValueError("ss2d_forward takes one ScanParams per direction")
    scan = selective_scan_par if kernel == "par" else selective_scan_seq
    ds = cross_scan(feature)
    outs = [scan(ds.seqs[:, k], params[k]) for k in range(4)]
    merged = DirectionalSequences(np.stack(outs, axis=1), ds.height, ds.width)
    return cross_merge(merged)


# ---------------------------------------------------------------------------
# fused kernels (production path)
# ---------------------------------------------------------------------------


@njit(parallel=True, fastmath=True, cache=True)
def _fused_fwd(x, draw, dbias, a, bs, cs, dsk, pidx, y, delta, hist, store):
    g_n, l_n, d_n = x.shape
    n_n = a.shape[2]
    for gd in prange(g_n * d_n):
        g = gd // d_n
        d = gd % d_n
        kk = pidx[g]
        hloc = np.zeros(n_n, dtype=x.dtype)
        for t in range(l_n):
            u = draw[g, t, d] + dbias[kk, d]
            if u > 20.0:
                dt = u
            else:
                dt = math.log1p(math.exp(u))
            delta[g, t, d] = dt
            xv = x[g, t, d]
            dbx = dt * xv
            acc = 0.0
            for n in range(n_n):
                hv = math.exp(dt * a[kk, d, n]) * hloc[n] + dbx * bs[g, t, n]
                hloc[n] = hv
                acc += cs[g, t, n] * hv
                if store:
                    hist[g, t, d, n] = hv
            y[g, t, d] = acc + dsk[kk, d] * xv


@njit(parallel=True, fastmath=True, cache=True)
def _fused_bwd(gy, x, delta, a, bs, cs, dsk, pidx, hist,
               dx, ddraw, dbias_p, da_p, dbs, dcs, ddsk_p):
    g_n, l_n, d_n = x.shape
    n_n = a.shape[2]
    for g in prange(g_n):
        kk = pidx[g]
        lam = np.zeros((d_n, n_n), dtype=x.dtype)
        anext = np.zeros((d_n, n_n), dtype=x.dtype)
        for t in range(l_n - 1, -1, -1):
            for d in range(d_n):
                dt = delta[g, t, d]
                xv = x[g, t, d]
                gyv = gy[g, t, d]
                ddsk_p[g, d] += gyv * xv
                dxv = gyv * dsk[kk, d]
                ddt = 0.0
                for n in range(n_n):
                    ab = math.exp(dt * a[kk, d, n])
                    lv = gyv * cs[g, t, n] + anext[d, n] * lam[d, n]
                    hprev = hist[g, t - 1, d, n] if t > 0 else 0.0
                    dcs[g, t, n] += gyv * hist[g, t, d, n]
                    da = lv * hprev
                    da_p[g, d, n] += da * ab * dt
                    ddt += da * ab * a[kk, d, n] + lv * bs[g, t, n] * xv
                    dbs[g, t, n] += lv * dt * xv
                    dxv += lv * dt * bs[g, t, n]
                    anext[d, n] = ab
                    lam[d, n] = lv
                du = ddt * (1.0 - math.exp(-dt))
                ddraw[g, t, d] = du
                dbias_p[g, d] += du
                dx[g, t, d] = dxv


def selective_scan_tensor(x: Tensor, draw: Tensor, a_log: Tensor, bs: Tensor,
                          cs: Tensor, d_skip: Tensor, delta_bias: Tensor) -> Tensor:
    """Autodiff-visible scan over (B, K, L, D) direction batches.

    `draw` holds the pre-softplus step-size projection; bias addition,
    softplus, the recurrence and the output contraction all happen inside
    one fused kernel.  Per-direction parameter tensors carry a leading K
    axis.  The backward pass replays the recurrence in reverse using the
    stored state history.
    """
    b_n, k_n, l_n, d_n = x.shape
    n_n = a_log.shape[2]
    dt = x.dtype
    g_n = b_n * k_n

    xg = x.data.reshape(g_n, l_n, d_n)
    rawg = draw.data.reshape(g_n, l_n, d_n)
    bsg = bs.data.reshape(g_n, l_n, n_n)
    csg = cs.data.reshape(g_n, l_n, n_n)
    a = (-np.exp(a_log.data.astype(np.float64))).astype(dt)
    pidx = np.tile(np.arange(k_n, dtype=np.int64), b_n)

    from .tensor import grad_enabled
    store = grad_enabled() and any(
        t.requires_grad or t._backward is not None
        for t in (x, draw, a_log, bs, cs, d_skip, delta_bias))

    y = np.empty_like(xg)
    delta = np.empty_like(xg)
    hist = (np.empty((g_n, l_n, d_n, n_n), dtype=dt) if store
            else np.empty((1, 1, 1, 1), dtype=dt))
    _fused_fwd(xg, rawg, delta_bias.data, a, bsg, csg, d_skip.data,
               pidx, y, delta, hist, store)

    def bwd(g):
        gyg = np.ascontiguousarray(g.reshape(g_n, l_n, d_n))
        dx = np.empty_like(xg)
        ddraw = np.empty_like(xg)
        dbias_p = np.zeros((g_n, d_n), dtype=dt)
        da_p = np.zeros((g_n, d_n, n_n), dtype=dt)
        dbs = np.zeros_like(bsg)
        dcs = np.zeros_like(csg)
        ddsk_p = np.zeros((g_n, d_n), dtype=dt)
        _fused_bwd(gyg, xg, delta, a, bsg, csg, d_skip.data, pidx, hist,
                   dx, ddraw, dbias_p, da_p, dbs, dcs, ddsk_p)
        x._accumulate(dx.reshape(x.shape))
        draw._accumulate(ddraw.reshape(draw.shape))
        bs._accumulate(dbs.reshape(bs.shape))
        cs._accumulate(dcs.reshape(cs.shape))
        delta_bias._accumulate(dbias_p.reshape(b_n, k_n, d_n).sum(axis=0))
        d_skip._accumulate(ddsk_p.reshape(b_n, k_n, d_n).sum(axis=0))
        da = da_p.reshape(b_n, k_n, d_n, n_n).sum(axis=0)
        a_log._accumulate(da * a.reshape(k_n, d_n, n_n))

    out = _result(y.reshape(x.shape), (x, draw, a_log, bs, cs, d_skip, delta_bias), bwd)
    return out
