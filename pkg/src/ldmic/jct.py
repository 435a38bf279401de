"""Joint context transfer across views.

Every view runs the same three steps with shared weights: residual feature
extraction, average pooling of the *other* views, efficient multi-head
cross-attention between the view and the pooled context, and a residual
refinement of the original feature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import ResidualBlock, conv1x1

# Called with (name, tensor) for every attention intermediate; tests hook in
# here to check that nothing of size n*n is ever allocated.
attention_probes: list = []


def _probe(name: str, t: torch.Tensor) -> torch.Tensor:
    for fn in attention_probes:
        fn(name, t)
    return t


@dataclass(frozen=True)
class JCTConfig:
    channels: int = 192
    heads: int = 2
    key_channels: int | None = None
    value_channels: int | None = None
    fusion: str = "attention"

    def __post_init__(self):
        if self.key_channels is None:
            object.__setattr__(self, "key_channels", max(self.channels // 4, self.heads))
        if self.value_channels is None:
            object.__setattr__(self, "value_channels", max(self.channels // 8, self.heads))
        if self.key_channels % self.heads or self.value_channels % self.heads:
            raise ValueError(
                f"key ({self.key_channels}) and value ({self.value_channels}) channels "
                f"must be divisible by heads ({self.heads})"
            )
        if self.fusion not in ("attention", "concat"):
            raise ValueError(f"unknown fusion operation {self.fusion!r}")


def fuse_views(features: torch.Tensor) -> torch.Tensor:
    """Average of the other views for every view.

    ``features`` is (B, K, C, H, W); the result has the same shape and entry
    ``k`` is the mean over views ``i != k``.
    """
    k = features.shape[1]
    if k < 2:
        raise ValueError("view fusion needs at least two views")
    others = torch.tensor([[i for i in range(k) if i != j] for j in range(k)],
                          device=features.device)
    return features[:, others].mean(dim=2)


def efficient_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax_row(q) @ (softmax_col(k)^T @ v)`` on (..., n, d) tensors.

    The query is normalized over its channels, the key over the n positions.
    Cost is O(n * d1 * d2); no n x n affinity is formed.
    """
    q = _probe("q", q.softmax(dim=-1))
    k = _probe("k", k.softmax(dim=-2))
    context = _probe("kv", k.transpose(-2, -1) @ v)
    return _probe("out", q @ context)


class CrossAttention(nn.Module):
    def __init__(self, cfg: JCTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.channels
        self.query = conv1x1(d, cfg.key_channels, bias=False)
        self.key = conv1x1(d, cfg.key_channels, bias=False)
        self.value = conv1x1(d, cfg.value_channels, bias=False)
        self.proj = conv1x1(cfg.value_channels, d, bias=False)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, c, h, w = t.shape
        return t.reshape(b, self.cfg.heads, c // self.cfg.heads, h * w).transpose(-2, -1)

    def forward(self, own: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        b, _, h, w = own.shape
        q = self._heads(self.query(own))
        k = self._heads(self.key(pooled))
        v = self._heads(self.value(pooled))
        a = efficient_attention(q, k, v)  # (B, heads, n, d2)
        a = a.transpose(-2, -1).reshape(b, self.cfg.value_channels, h, w)
        return self.proj(a)


class ConcatFusion(nn.Module):
    """Ablation stand-in for the attention: concatenate and mix with a 1x1 conv."""

    def __init__(self, cfg: JCTConfig):
        super().__init__()
        self.mix = conv1x1(2 * cfg.channels, cfg.channels)

    def forward(self, own: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        return self.mix(torch.cat([own, pooled], dim=1))


class JCT(nn.Module):
    def __init__(self, cfg: JCTConfig | int):
        super().__init__()
        if isinstance(cfg, int):
            cfg = JCTConfig(channels=cfg)
        self.cfg = cfg
        d = cfg.channels
        self.extract = nn.Sequential(ResidualBlock(d), ResidualBlock(d))
        self.attend = CrossAttention(cfg) if cfg.fusion == "attention" else ConcatFusion(cfg)
        self.refine = nn.Sequential(ResidualBlock(2 * d, d), ResidualBlock(d))
        # shrink every path of the refinement so the block starts close to an
        # identity map and the views are not mixed blindly
        with torch.no_grad():
            for layer in (self.refine[0].conv2, self.refine[0].skip, self.refine[1].conv2):
                layer.weight.mul_(0.1)
                if layer.bias is not None:
                    layer.bias.zero_()

    def extract_features(self, f: torch.Tensor) -> torch.Tensor:
        return self.extract(f)

    def refine_feature(self, f: torch.Tensor, context: torch.Tensor, extracted: torch.Tensor) -> torch.Tensor:
        return f + self.refine(torch.cat([context, extracted], dim=1))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """(B, K, C, H, W) -> refined features of the same shape."""
        b, k, c, h, w = f.shape
        if k == 1:
            warnings.warn("joint context transfer bypassed for a single view", stacklevel=2)
            return f
        flat = f.reshape(b * k, c, h, w)
        extracted = self.extract(flat)
        pooled = fuse_views(extracted.reshape(b, k, c, h, w)).reshape(b * k, c, h, w)
        context = self.attend(extracted, pooled)
        out = self.refine_feature(flat, context, extracted)
        return out.reshape(b, k, c, h, w)
