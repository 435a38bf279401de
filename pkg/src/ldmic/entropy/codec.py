"""Per-view entropy coding of latents and whole-group compress/decompress.

Encoding never looks across views: every view runs analysis, hyper coding
and context-model coding on its own (batch of one). Decoding entropy-decodes
each view independently and only then runs the joint synthesis.

The same latent-coding routine is used for the encoder, the decoder and the
reference decode-mode forward pass (:func:`infer`), so the quantized latents
agree bit for bit on all three paths.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..layers import LEAKY_SLOPE
from ..model import LDMIC, VARIANTS, VariantError, pad_to_multiple
from . import rangecoder as rc
from .bitstream import BitstreamContainer, ContainerError
from .context import KERNEL, anchor_mask, positive_scale
from .models import default_gaussian_tables, estimate_rate, gaussian_likelihood, scale_index


class IncompatibleError(ValueError):
    """Bitstream and model parameters do not belong together."""


@dataclass
class ViewCode:
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    y_symbols: np.ndarray
    y_indexes: np.ndarray
    z_symbols: np.ndarray
    y_bits: float
    z_bits: float
    z_bytes: bytes = b""
    y_bytes: bytes = b""
    stats: dict = field(default_factory=dict)

    @property
    def estimated_bits(self) -> float:
        return self.y_bits + self.z_bits


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LDMIC_THREADS", "1")))
    except ValueError:
        return 1


# symbol sources / sinks ---------------------------------------------------------


class _Encoder:
    """Chooses symbols from the known latent and optionally range-codes them."""

    def __init__(self, y: torch.Tensor, coder: rc.RangeEncoder | None):
        self.y = y
        self.coder = coder
        self.tables = default_gaussian_tables()

    def symbols(self, y_part: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        v = torch.round(y_part - mu)
        if self.coder is not None:
            self.coder.encode(v.numpy().astype(np.int64), scale_index(sigma), self.tables)
        return v


class _Decoder:
    def __init__(self, coder: rc.RangeDecoder):
        self.coder = coder
        self.tables = default_gaussian_tables()

    def symbols(self, y_part, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        v = self.coder.decode(scale_index(sigma), self.tables)
        return torch.from_numpy(v.astype(np.float32)).to(mu.dtype).reshape(mu.shape)


# raster (auto-regressive) schedule ------------------------------------------------


class _RasterStepper:
    """Evaluates context + entropy parameters one latent position at a time."""

    def __init__(self, model: LDMIC):
        ctx = model.context
        taps = ctx.causal_offsets()
        c = KERNEL // 2
        self.tap_index = torch.tensor([(dy + c) * KERNEL + (dx + c) for dy, dx in taps])
        w = ctx.conv.masked_weight()  # (2M, M, 5, 5)
        self.w_ctx = w.flatten(2)[:, :, self.tap_index].flatten(1)
        self.b_ctx = ctx.conv.bias
        self.layers = model.entropy_parameters.as_linear()
        self.M = w.shape[1]

    def params(self, padded: torch.Tensor, hyper_col: torch.Tensor, i: int, j: int):
        patch = padded[:, i: i + KERNEL, j: j + KERNEL].reshape(self.M, KERNEL * KERNEL)
        ctx = torch.addmv(self.b_ctx, self.w_ctx, patch[:, self.tap_index].reshape(-1))
        x = torch.cat([hyper_col, ctx])
        for n, (w, b) in enumerate(self.layers):
            x = torch.addmv(b, w, x)
            if n < len(self.layers) - 1:
                x = F.leaky_relu(x, LEAKY_SLOPE)
        mu, s = x.chunk(2)
        return mu, positive_scale(s)


def _code_raster(model: LDMIC, hyper: torch.Tensor, y: torch.Tensor | None, io):
    _, m, h, w = hyper.shape[0], hyper.shape[1] // 2, hyper.shape[2], hyper.shape[3]
    stepper = _RasterStepper(model)
    pad = KERNEL // 2
    padded = torch.zeros(m, h + 2 * pad, w + 2 * pad, dtype=hyper.dtype)
    mus = torch.zeros(m, h, w, dtype=hyper.dtype)
    sigmas = torch.zeros(m, h, w, dtype=hyper.dtype)
    values = torch.zeros(m, h, w, dtype=hyper.dtype)
    hyper0 = hyper[0]
    for i in range(h):
        for j in range(w):
            mu, sigma = stepper.params(padded, hyper0[:, i, j], i, j)
            v = io.symbols(None if y is None else y[0, :, i, j], mu, sigma)
            padded[:, i + pad, j + pad] = v + mu
            mus[:, i, j], sigmas[:, i, j], values[:, i, j] = mu, sigma, v
    y_hat = padded[:, pad: pad + h, pad: pad + w].clone()[None]
    return y_hat, values, mus, sigmas


def _code_checkerboard(model: LDMIC, hyper: torch.Tensor, y: torch.Tensor | None, io):
    _, _, h, w = hyper.shape
    anchors = anchor_mask(h, w)[0, 0].bool()
    y_hat = None
    outputs = []
    for sel in (anchors, ~anchors):
        if y_hat is None:
            mu_all, sigma_all = model.anchor_params(hyper)
            y_hat = torch.zeros_like(mu_all)
        else:
            # second pass sees only the decoded anchors
            mu_all, sigma_all = model.non_anchor_params(y_hat, hyper)
        mu, sigma = mu_all[0][:, sel], sigma_all[0][:, sel]
        v = io.symbols(None if y is None else y[0][:, sel], mu, sigma)
        y_hat[0][:, sel] = v + mu
        outputs.append((sel, v, mu, sigma))
    values, mus, sigmas = (torch.zeros_like(y_hat[0]) for _ in range(3))
    for sel, v, mu, sigma in outputs:
        values[:, sel], mus[:, sel], sigmas[:, sel] = v, mu, sigma
    return y_hat, values, mus, sigmas


def _code_latent(model: LDMIC, hyper: torch.Tensor, y: torch.Tensor | None, io):
    if model.config.context == "checkerboard":
        return _code_checkerboard(model, hyper, y, io)
    return _code_raster(model, hyper, y, io)


# per-view encode / decode -----------------------------------------------------------


@torch.no_grad()
def code_view(model: LDMIC, y: torch.Tensor, entropy_code: bool = True) -> ViewCode:
    """Quantize and (optionally) range-code one view's latent ``y`` of shape (1, M, h, w)."""
    z = model.hyper_analysis(y)
    z_hat = torch.round(z)
    z_symbols = z_hat[0].numpy().astype(np.int64)
    z_tables = model.prior.tables()
    z_index = np.broadcast_to(np.arange(z_symbols.shape[0])[:, None, None], z_symbols.shape)
    z_bytes = rc.encode(z_symbols, z_index, z_tables) if entropy_code else b""
    z_bits = float(estimate_rate(model.prior(z_hat)))

    hyper = model.hyper_synthesis(z_hat)
    coder = rc.RangeEncoder(capacity=y.numel() * 2 + 64) if entropy_code else None
    io = _Encoder(y, coder)
    y_hat, values, mus, sigmas = _code_latent(model, hyper, y, io)
    y_bits = float(estimate_rate(gaussian_likelihood(values, torch.zeros_like(values), sigmas)))
    code = ViewCode(
        y_hat=y_hat, z_hat=z_hat,
        y_symbols=values.numpy().astype(np.int64), y_indexes=scale_index(sigmas),
        z_symbols=z_symbols, y_bits=y_bits, z_bits=z_bits, z_bytes=z_bytes,
    )
    if coder is not None:
        code.y_bytes = coder.finish()
        code.stats = {"escapes": coder.escapes, "symbols": coder.count}
    return code


@torch.no_grad()
def decode_view(model: LDMIC, z_bytes: bytes, y_bytes: bytes, latent_hw: tuple[int, int]) -> torch.Tensor:
    """Entropy-decode one view's quantized latent (1, M, h, w) from its two substreams."""
    h, w = latent_hw
    n_hyper = model.config.N
    zh, zw = h // 4, w // 4
    z_index = np.repeat(np.arange(n_hyper), zh * zw)
    z_symbols = rc.decode(z_bytes, z_index, model.prior.tables())
    z_hat = torch.from_numpy(z_symbols.astype(np.float32)).reshape(1, n_hyper, zh, zw)
    hyper = model.hyper_synthesis(z_hat)
    dec = rc.RangeDecoder(y_bytes)
    y_hat, *_ = _code_latent(model, hyper, None, _Decoder(dec))
    dec.finish()
    return y_hat


def _to_tensor(views) -> torch.Tensor:
    """List of HxWx3 arrays or a (K, 3, H, W) tensor -> float32 (K, 3, H, W)."""
    if isinstance(views, torch.Tensor):
        return views.float()
    return torch.stack([torch.from_numpy(np.ascontiguousarray(v, dtype=np.float32)).permute(2, 0, 1)
                        for v in views])


def _to_views(x_hat: torch.Tensor, h: int, w: int) -> list[np.ndarray]:
    x_hat = x_hat[..., :h, :w].clamp(0, 1)
    return [v.permute(1, 2, 0).numpy() for v in x_hat]


@dataclass
class GroupResult:
    views: list[np.ndarray]
    x_hat: torch.Tensor
    codes: list[ViewCode] | None = None

    @property
    def estimated_bits(self) -> float:
        return sum(c.estimated_bits for c in self.codes or [])


def _encode_views(model: LDMIC, x: torch.Tensor, entropy_code: bool) -> list[ViewCode]:
    """Run each view's encoder independently (optionally in worker threads)."""
    xp = pad_to_multiple(x)
    if not model.distributed:
        y_all = model.encode_latents(xp[None])[0]
        return [code_view(model, y_all[k: k + 1], entropy_code) for k in range(xp.shape[0])]

    def one(k):
        with torch.no_grad():
            y = model.analysis_transform(xp[k: k + 1])
        return code_view(model, y, entropy_code)

    workers = min(worker_count(), xp.shape[0])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(xp.shape[0])))
    return [one(k) for k in range(xp.shape[0])]


@torch.no_grad()
def infer(model: LDMIC, views) -> GroupResult:
    """Decode-mode forward pass without producing a bitstream.

    Rates come from the decode-mode likelihoods of the actually coded symbols.
    """
    was_training = model.training
    model.eval()
    try:
        x = _to_tensor(views)
        h, w = x.shape[-2:]
        codes = _encode_views(model, x, entropy_code=False)
        x_hat = model.joint_synthesis(torch.cat([c.y_hat for c in codes])[None])[0]
    finally:
        model.train(was_training)
    return GroupResult(_to_views(x_hat, h, w), x_hat[..., :h, :w].clamp(0, 1), codes)


@torch.no_grad()
def compress_group(model: LDMIC, views) -> tuple[BitstreamContainer, list[ViewCode]]:
    if not model.distributed:
        raise VariantError(f"variant {model.variant} has a joint encoder and cannot be coded per view")
    model.eval()
    x = _to_tensor(views)
    h, w = x.shape[-2:]
    codes = _encode_views(model, x, entropy_code=True)
    container = BitstreamContainer(
        variant=VARIANTS.index(model.variant), height=h, width=w,
        M=model.config.M, N=model.config.N,
        views=[(c.z_bytes, c.y_bytes) for c in codes],
    )
    return container, codes


def check_compatible(container: BitstreamContainer, model: LDMIC) -> None:
    variant = VARIANTS[container.variant] if container.variant < len(VARIANTS) else None
    problems = []
    if variant != model.variant:
        problems.append(f"variant {variant} != {model.variant}")
    if container.M != model.config.M:
        problems.append(f"M {container.M} != {model.config.M}")
    if container.N != model.config.N:
        problems.append(f"N {container.N} != {model.config.N}")
    if problems:
        raise IncompatibleError("bitstream does not match model: " + "; ".join(problems))


def latent_shape(height: int, width: int) -> tuple[int, int]:
    return (-(-height // 64)) * 4, (-(-width // 64)) * 4


@torch.no_grad()
def decompress_group(container: BitstreamContainer, model: LDMIC) -> GroupResult:
    check_compatible(container, model)
    if not container.complete:
        raise ContainerError(f"bitstream holds {container.K} of {container.declared_k} views")
    model.eval()
    hw = latent_shape(container.height, container.width)

    def one(k):
        z_bytes, y_bytes = container.views[k]
        return decode_view(model, z_bytes, y_bytes, hw)

    workers = min(worker_count(), container.K)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            latents = list(pool.map(one, range(container.K)))
    else:
        latents = [one(k) for k in range(container.K)]
    x_hat = model.joint_synthesis(torch.cat(latents)[None])[0]
    h, w = container.height, container.width
    return GroupResult(_to_views(x_hat, h, w), x_hat[..., :h, :w].clamp(0, 1))
