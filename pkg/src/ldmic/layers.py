"""Building blocks shared by the transforms: GDN, strided (de)convolutions,
masked convolutions and residual blocks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.01


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Generalized divisive normalization on an NCHW tensor.

    ``out_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`` (multiplied instead
    of divided when ``inverse``). ``beta`` and ``gamma`` are the effective,
    already reparameterized values.
    """
    if torch.any(beta <= 0):
        raise ValueError("GDN beta must be strictly positive")
    c = x.shape[1]
    norm = F.conv2d(x * x, gamma.reshape(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


class NonNegative(nn.Module):
    """``max(p, bound)^2 - pedestal`` reparameterization used for GDN."""

    pedestal = 2.0 ** -36

    def __init__(self, minimum: float = 0.0):
        super().__init__()
        self.bound = (minimum + self.pedestal) ** 0.5

    def init(self, value: torch.Tensor) -> torch.Tensor:
        return torch.sqrt(torch.clamp(value + self.pedestal, min=self.pedestal))

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return torch.clamp(p, min=self.bound) ** 2 - self.pedestal


class GDN(nn.Module):
    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_reparam = NonNegative(beta_min)
        self.gamma_reparam = NonNegative()
        self.beta = nn.Parameter(self.beta_reparam.init(torch.ones(channels)))
        self.gamma = nn.Parameter(self.gamma_reparam.init(gamma_init * torch.eye(channels)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gdn(x, self.beta_reparam(self.beta), self.gamma_reparam(self.gamma), self.inverse)


def conv(cin: int, cout: int, kernel: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)


def deconv(cin: int, cout: int, kernel: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, kernel, stride=stride,
                              padding=kernel // 2, output_padding=stride - 1)


def conv1x1(cin: int, cout: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, bias=bias)


def raster_mask(kernel: int) -> torch.Tensor:
    """Causal mask admitting only positions strictly before the centre in raster order."""
    mask = torch.zeros(kernel, kernel)
    c = kernel // 2
    mask[:c, :] = 1
    mask[c, :c] = 1
    return mask


def checkerboard_mask(kernel: int) -> torch.Tensor:
    """Mask admitting neighbours at odd Manhattan offset (anchors seen from a non-anchor)."""
    idx = torch.arange(kernel) - kernel // 2
    return ((idx[:, None] + idx[None, :]) % 2 != 0).float()


class MaskedConv2d(nn.Conv2d):
    """Convolution whose kernel is multiplied by a fixed spatial mask."""

    def __init__(self, cin: int, cout: int, kernel: int = 5, mask: str = "raster"):
        super().__init__(cin, cout, kernel, padding=kernel // 2)
        if mask == "raster":
            m = raster_mask(kernel)
        elif mask == "checkerboard":
            m = checkerboard_mask(kernel)
        else:
            raise ValueError(f"unknown mask type {mask!r}")
        self.mask_type = mask
        self.register_buffer("mask", m[None, None].expand(cout, cin, kernel, kernel).clone())
        self.self_test()

    def self_test(self) -> None:
        m = self.mask[0, 0]
        c = m.shape[0] // 2
        if m[c, c] != 0:
            raise RuntimeError("context mask admits the current position")
        if self.mask_type == "raster":
            if m[c, c + 1:].any() or m[c + 1:].any():
                raise RuntimeError("raster mask admits future positions")
        else:
            idx = torch.arange(m.shape[0]) - c
            same_parity = (idx[:, None] + idx[None, :]) % 2 == 0
            if m[same_parity].any():
                raise RuntimeError("checkerboard mask admits non-anchor neighbours")

    def masked_weight(self) -> torch.Tensor:
        return self.weight * self.mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.masked_weight(), self.bias, padding=self.padding)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with Leaky ReLU and an identity (or 1x1) skip."""

    def __init__(self, cin: int, cout: int | None = None):
        super().__init__()
        cout = cout or cin
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = conv1x1(cin, cout) if cin != cout else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        out = F.leaky_relu(self.conv2(out), LEAKY_SLOPE)
        identity = x if self.skip is None else self.skip(x)
        return out + identity
