"""Grouped fusion of a low-level and a high-level feature map.

The high-level input is channel-aligned (1x1 over-parameterized conv) and
bilinearly resized onto the low-level geometry; both maps are chunked into
four equal channel groups, paired index-to-index, and each concatenated pair
goes through LayerNorm and a dilated conv (dilations 1..4 give the groups
different receptive fields).  The four results are concatenated back to the
low-level width and mixed by a final 1x1 conv, so the output always matches
the low-level input's shape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DOConv2d, LayerNorm, Module, to_nchw, to_nhwc
from .scan import NumericHealthError
from .tensor import Tensor, bilinear_resize


class FusionBridge(Module):
    def __init__(self, c_low: int, c_high: int, rng: np.random.Generator,
                 dilations=(1, 2, 3, 4), dtype=np.float32,
                 check_finite: bool = True):
        if c_low % 4 != 0:
            raise T.ShapeError(f"low-level channels must divide by 4, got {c_low}")
        self.c_low = c_low
        self.c_high = c_high
        self.check_finite = check_finite
        quarter = c_low // 4
        self.align = DOConv2d(c_high, c_low, 1, rng, dtype=dtype)
        self.group_norms = [LayerNorm(2 * quarter, dtype=dtype) for _ in range(4)]
        self.group_convs = [
            DOConv2d(2 * quarter, quarter, 3, rng, dilation=d, padding=d,
                     dtype=dtype)
            for d in dilations
        ]
        self.out_norm = LayerNorm(c_low, dtype=dtype)
        self.out_conv = DOConv2d(c_low, c_low, 1, rng, dtype=dtype)

    def _premix(self, f_low: Tensor, f_high: Tensor) -> Tensor:
        """Concatenated per-group features, before the final norm + 1x1 mix."""
        n, c_l, h_l, w_l = f_low.shape
        if c_l != self.c_low:
            raise T.ShapeError(f"low-level input has {c_l} channels, expected {self.c_low}")
        if f_high.shape[1] != self.c_high:
            raise T.ShapeError(
                f"high-level input has {f_high.shape[1]} channels, expected {self.c_high}")
        fh = bilinear_resize(self.align(f_high), (h_l, w_l))
        quarter = c_l // 4
        outs = []
        for g in range(4):
            lo, hi = g * quarter, (g + 1) * quarter
            pair = T.concat([fh[:, lo:hi], f_low[:, lo:hi]], axis=1)
            pair = to_nchw(self.group_norms[g](to_nhwc(pair)))
            outs.append(self.group_convs[g](pair))
        return T.concat(outs, axis=1)

    def forward(self, f_low: Tensor, f_high: Tensor) -> Tensor:
        mixed = self._premix(f_low, f_high)
        out = self.out_conv(to_nchw(self.out_norm(to_nhwc(mixed))))
        if self.check_finite and not np.isfinite(out.data).all():
            raise NumericHealthError("non-finite activations leaving fusion bridge")
        return out
