"""Per-view analysis, hyperprior transforms, mixed quantization and the joint
synthesis decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy.context import ContextModel, EntropyParameters, anchor_mask
from .entropy.models import FactorizedPrior, gaussian_likelihood
from .jct import JCT, JCTConfig
from .layers import GDN, LEAKY_SLOPE, conv, deconv

VARIANTS = ("ldmic", "ldmic_fast", "sep_enc_dec", "joint_enc_dec", "frozen_encoder", "concat_fusion")
# variants whose latent for view k is a function of view k only
DISTRIBUTED = frozenset({"ldmic", "ldmic_fast", "sep_enc_dec", "frozen_encoder", "concat_fusion"})
STRIDE = 64


class VariantError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    M: int = 192
    N: int = 128
    variant: str = "ldmic"
    heads: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def context(self) -> str:
        return "checkerboard" if self.variant == "ldmic_fast" else "raster"

    @property
    def decoder_fusion(self) -> str | None:
        if self.variant == "sep_enc_dec":
            return None
        return "concat" if self.variant == "concat_fusion" else "attention"

    def to_dict(self) -> dict:
        return asdict(self)


def ste_round(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def quantize_mixed(y: torch.Tensor, mu: torch.Tensor | None, mode: str,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """``rate``: y + U(-0.5, 0.5) noise. ``decode``: round(y - mu) + mu with an identity gradient."""
    if mode == "rate":
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    if mode == "decode":
        if mu is None:
            return ste_round(y)
        return ste_round(y - mu) + mu
    raise ValueError(f"unknown quantization mode {mode!r}")


def check_input_shape(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"input {h}x{w} is not a multiple of {STRIDE}; pad first")


class LDMIC(nn.Module):
    """Distributed multi-view codec.

    Tensors are laid out (B, K, C, H, W). The encoder side (analysis, hyper
    analysis/synthesis, context and parameter networks, factorized prior) is
    shared by every view and never looks at other views, except in the
    ``joint_enc_dec`` ablation. The synthesis side mixes views through JCT
    blocks placed in front of the first and third transposed convolutions.
    """

    def __init__(self, config: ModelConfig | None = None, **kwargs):
        super().__init__()
        config = config or ModelConfig(**kwargs)
        self.config = config
        M, N = config.M, config.N

        self.g_a = nn.ModuleList([
            conv(3, M), GDN(M), conv(M, M), GDN(M), conv(M, M), GDN(M), conv(M, M),
        ])
        self.h_a = nn.Sequential(
            conv(M, N, 3, 1), nn.LeakyReLU(LEAKY_SLOPE),
            conv(N, N), nn.LeakyReLU(LEAKY_SLOPE),
            conv(N, N),
        )
        self.h_s = nn.Sequential(
            deconv(N, M), nn.LeakyReLU(LEAKY_SLOPE),
            deconv(M, 3 * M // 2), nn.LeakyReLU(LEAKY_SLOPE),
            conv(3 * M // 2, 2 * M, 3, 1),
        )
        self.context = ContextModel(M, config.context)
        self.entropy_parameters = EntropyParameters(M)
        self.prior = FactorizedPrior(N)
        self.g_s = nn.ModuleList([
            deconv(M, M), GDN(M, inverse=True), deconv(M, M), GDN(M, inverse=True),
            deconv(M, M), GDN(M, inverse=True), deconv(M, 3),
        ])

        # JCT blocks are created last so that the shared layers above get the
        # same initial values in every variant built from the same seed
        fusion = config.decoder_fusion
        if fusion is not None:
            cfg = JCTConfig(channels=M, heads=config.heads, fusion=fusion)
            self.jct_dec = nn.ModuleList([JCT(cfg), JCT(cfg)])
        else:
            self.jct_dec = None
        if config.variant == "joint_enc_dec":
            cfg = JCTConfig(channels=M, heads=config.heads)
            self.jct_enc = nn.ModuleList([JCT(cfg), JCT(cfg)])
        else:
            self.jct_enc = None

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def distributed(self) -> bool:
        return self.variant in DISTRIBUTED

    def encoder_modules(self) -> list[nn.Module]:
        """Everything the per-view encoder owns (analysis plus the entropy model)."""
        mods = [self.g_a, self.h_a, self.h_s, self.context, self.entropy_parameters, self.prior]
        if self.jct_enc is not None:
            mods.append(self.jct_enc)
        return mods

    def decoder_modules(self) -> list[nn.Module]:
        mods = [self.g_s]
        if self.jct_dec is not None:
            mods.append(self.jct_dec)
        return mods

    # transforms ------------------------------------------------------------

    def analysis_transform(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) view images -> (B, M, H/16, W/16) latents."""
        check_input_shape(x)
        for layer in self.g_a:
            x = layer(x)
        return x

    def joint_analysis(self, x: torch.Tensor) -> torch.Tensor:
        """(B, K, 3, H, W) -> (B, K, M, h, w) with cross-view fusion after conv 2 and conv 4."""
        if self.jct_enc is None:
            raise VariantError(f"joint analysis is only defined for joint_enc_dec, not {self.variant}")
        check_input_shape(x)
        b, k = x.shape[:2]
        f = x.flatten(0, 1)
        for i, layer in enumerate(self.g_a):
            f = layer(f)
            if i in (2, 6):
                f = self.jct_enc[i // 4](f.unflatten(0, (b, k))).flatten(0, 1)
        return f.unflatten(0, (b, k))

    def encode_latents(self, x: torch.Tensor) -> torch.Tensor:
        if self.jct_enc is not None:
            return self.joint_analysis(x)
        b, k = x.shape[:2]
        return self.analysis_transform(x.flatten(0, 1)).unflatten(0, (b, k))

    def hyper_analysis(self, y: torch.Tensor) -> torch.Tensor:
        return self.h_a(y)

    def hyper_synthesis(self, z_hat: torch.Tensor) -> torch.Tensor:
        return self.h_s(z_hat)

    def joint_synthesis(self, y_hat: torch.Tensor) -> torch.Tensor:
        """(B, K, M, h, w) quantized latents -> (B, K, 3, 16h, 16w) reconstructions."""
        if y_hat.dim() != 5:
            raise ShapeError(f"expected (B, K, M, h, w) latents, got {tuple(y_hat.shape)}")
        b, k = y_hat.shape[:2]
        f = y_hat
        for i, layer in enumerate(self.g_s):
            if self.jct_dec is not None and i in (0, 4):
                f = self.jct_dec[i // 4](f.reshape(b, k, *f.shape[-3:]))
            f = layer(f.flatten(0, 1) if f.dim() == 5 else f)
        return f.unflatten(0, (b, k))

    # training forward --------------------------------------------------------

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> dict:
        """Training pass with mixed quantization.

        The rate is estimated on noisy latents; the synthesis sees
        mean-shifted rounded latents with straight-through gradients.
        """
        b, k = x.shape[:2]
        y = self.encode_latents(x).flatten(0, 1)
        z = self.hyper_analysis(y)
        z_noisy = quantize_mixed(z, None, "rate", generator)
        z_likelihoods = self.prior(z_noisy)
        hyper = self.hyper_synthesis(ste_round(z))

        y_noisy = quantize_mixed(y, None, "rate", generator)
        ctx = self.context(y_noisy)
        mu, sigma = self.entropy_parameters(hyper, ctx)
        y_likelihoods = gaussian_likelihood(y_noisy, mu, sigma)
        y_hat = quantize_mixed(y, mu, "decode")
        x_hat = self.joint_synthesis(y_hat.unflatten(0, (b, k)))
        return {
            "x_hat": x_hat,
            "likelihoods": {"y": y_likelihoods, "z": z_likelihoods},
            "y": y.unflatten(0, (b, k)),
            "mu": mu.unflatten(0, (b, k)),
            "sigma": sigma.unflatten(0, (b, k)),
        }

    def parallel_params(self, y_hat: torch.Tensor, hyper: torch.Tensor):
        """(mu, sigma) for every position given fully known quantized latents."""
        return self.entropy_parameters(hyper, self.context(y_hat))

    def anchor_params(self, hyper: torch.Tensor):
        return self.entropy_parameters(hyper, torch.zeros_like(hyper))

    def non_anchor_params(self, y_anchor: torch.Tensor, hyper: torch.Tensor):
        ctx = self.context.conv(y_anchor * anchor_mask(*y_anchor.shape[-2:], device=y_anchor.device))
        return self.entropy_parameters(hyper, ctx)


def pad_to_multiple(x: torch.Tensor, multiple: int = STRIDE) -> torch.Tensor:
    """Reflect-pad the last two dims up to a multiple (replicate when too small to reflect)."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:])
    mode = "reflect" if ph < h and pw < w else "replicate"
    out = F.pad(flat, (0, pw, 0, ph), mode=mode)
    return out.reshape(*lead, *out.shape[-3:])
