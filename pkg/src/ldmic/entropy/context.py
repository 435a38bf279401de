"""Intra-view context models and the entropy-parameter network.

Both context models are single masked 5x5 convolutions from the M latent
channels to 2M context channels. They differ in the mask and in how decoding
is scheduled:

* raster (auto-regressive): every position sees only strictly earlier ones;
  decoding is one position at a time.
* checkerboard: positions with even ``row + col`` are anchors and get no
  context; the rest see only anchors. Decoding takes two parallel passes.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..layers import LEAKY_SLOPE, MaskedConv2d, conv1x1
from .models import SIGMA_FLOOR

KERNEL = 5


def anchor_mask(h: int, w: int, device=None) -> torch.Tensor:
    """1 at anchor positions (even row + col), 0 elsewhere; shape (1, 1, h, w)."""
    r = torch.arange(h, device=device)[:, None]
    c = torch.arange(w, device=device)[None, :]
    return ((r + c) % 2 == 0).float()[None, None]


class ContextModel(nn.Module):
    def __init__(self, latent_channels: int, kind: str = "raster"):
        super().__init__()
        if kind not in ("raster", "checkerboard"):
            raise ValueError(f"unknown context model {kind!r}")
        self.kind = kind
        self.conv = MaskedConv2d(latent_channels, 2 * latent_channels, KERNEL, mask=kind)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Context features for all positions at once (training / parallel oracle)."""
        if self.kind == "raster":
            return self.conv(y_hat)
        anchors = anchor_mask(*y_hat.shape[-2:], device=y_hat.device)
        return self.conv(y_hat * anchors) * (1 - anchors)

    def causal_offsets(self) -> list[tuple[int, int]]:
        """Kernel taps admitted by the mask, as (dy, dx) relative to the centre."""
        m = self.conv.mask[0, 0]
        c = KERNEL // 2
        return [(i - c, j - c) for i in range(KERNEL) for j in range(KERNEL) if m[i, j] != 0]


class EntropyParameters(nn.Module):
    """Three 1x1 convolutions mapping [hyper, context] (4M channels) to (mu, sigma)."""

    def __init__(self, latent_channels: int):
        super().__init__()
        m = latent_channels
        self.layers = nn.ModuleList([
            conv1x1(4 * m, 10 * m // 3),
            conv1x1(10 * m // 3, 8 * m // 3),
            conv1x1(8 * m // 3, 2 * m),
        ])

    def forward(self, hyper: torch.Tensor, context: torch.Tensor):
        if hyper.shape[-2:] != context.shape[-2:]:
            raise ValueError(f"hyper {tuple(hyper.shape)} and context {tuple(context.shape)} differ spatially")
        x = torch.cat([hyper, context], dim=1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, LEAKY_SLOPE)
        return split_params(x)

    def as_linear(self):
        """(weight, bias) pairs for evaluating the network on single positions."""
        return [(l.weight[:, :, 0, 0], l.bias) for l in self.layers]


def split_params(raw: torch.Tensor):
    mu, s = raw.chunk(2, dim=1)
    return mu, positive_scale(s)


class _LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient still flows when it would raise x."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through, None


def positive_scale(s: torch.Tensor) -> torch.Tensor:
    return _LowerBound.apply(s, SIGMA_FLOOR)
