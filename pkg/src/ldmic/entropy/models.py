"""Likelihood models and the quantized tables the range coder consumes.

* :class:`FactorizedPrior` - per-channel learned monotone CDF for the hyper-latent.
* Gaussian conditional - zero-mean Gaussian over integer residuals ``round(y - mu)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rangecoder as rc

SIGMA_FLOOR = 0.11
SIGMA_CEIL = 256.0
SCALE_LEVELS = 64
LIKELIHOOD_FLOOR = 2.0 ** -16
MAX_SYMBOL = 127
# mass left outside a table's explicit support; the rest goes to the escape symbol
TAIL_MASS = 2.0 ** -22


class MonotoneCDFError(ValueError):
    pass


def estimate_rate(probabilities: torch.Tensor) -> torch.Tensor:
    """Total information content in bits, ``-sum(log2 p)``."""
    return -torch.log2(probabilities).sum()


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


def gaussian_likelihood(values: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                        floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """Mass of the unit-width bin centred on ``values`` under N(mu, sigma^2).

    ``sigma`` is clamped to :data:`SIGMA_FLOOR`. Evaluated on the lower tail
    (``|v - mu|``) for accuracy far from the mean.
    """
    sigma = sigma.clamp_min(SIGMA_FLOOR)
    v = (values - mu).abs()
    upper = _std_normal_cdf((0.5 - v) / sigma)
    lower = _std_normal_cdf((-0.5 - v) / sigma)
    return (upper - lower).clamp_min(floor)


def factorized_likelihood(values: torch.Tensor, cdf, floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """``cdf(v + 0.5) - cdf(v - 0.5)`` floored; ``cdf`` is any monotone callable."""
    return (cdf(values + 0.5) - cdf(values - 0.5)).clamp_min(floor)


class FactorizedPrior(nn.Module):
    """Per-channel univariate density built from a stack of monotone scalar maps.

    Each channel's CDF is ``sigmoid(g(x))`` with ``g`` a composition of
    positive-weight affine maps and ``x + a * tanh(x)`` nonlinearities with
    ``a >= -1``, which keeps ``g`` non-decreasing.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, n) -> cumulative logits of the same shape."""
        dt = x.dtype
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m.to(dt)), x) + b.to(dt)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].to(dt)) * torch.tanh(x)
        return x

    def _per_channel(self, values: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (C, 1, B*H*W)
        return values.transpose(0, 1).reshape(self.channels, 1, -1)

    def _restore(self, flat: torch.Tensor, shape) -> torch.Tensor:
        b, c, h, w = shape
        return flat.reshape(c, b, h, w).transpose(0, 1)

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        return self._restore(torch.sigmoid(self.logits(self._per_channel(values))), values.shape)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """Likelihood of each element of a (B, C, H, W) tensor of (noisy or rounded) values."""
        x = self._per_channel(values)
        lower = self.logits(x - 0.5)
        upper = self.logits(x + 0.5)
        # evaluate on whichever side of the median keeps the sigmoid out of saturation
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return self._restore(p, values.shape).clamp_min(LIKELIHOOD_FLOOR)

    @torch.no_grad()
    def tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grid = torch.arange(-MAX_SYMBOL, MAX_SYMBOL + 2, dtype=torch.float64) - 0.5
        x = grid.reshape(1, 1, -1).expand(self.channels, 1, -1)
        c = torch.sigmoid(self.logits(x))[:, 0].numpy()
        return tables_from_cdf_values(c, -MAX_SYMBOL)


def tables_from_cdf_values(cdf_values: np.ndarray, first: int):
    """Build range-coder tables from CDF samples at half-integers.

    ``cdf_values[c, j]`` is the CDF of channel ``c`` at ``first + j - 0.5``.
    Support is trimmed to where the in-bin mass is non-negligible; mass outside
    is assigned to the escape symbol.
    """
    cdf_values = np.asarray(cdf_values, dtype=np.float64)
    if np.any(np.diff(cdf_values, axis=-1) < -1e-12):
        raise MonotoneCDFError("CDF samples are not non-decreasing")
    cdfs, offsets = [], []
    for row in np.atleast_2d(cdf_values):
        pmf = np.diff(row)
        keep = np.nonzero((row[1:] > TAIL_MASS) & (row[:-1] < 1.0 - TAIL_MASS))[0]
        if keep.size == 0:
            keep = np.array([int(np.argmax(pmf))])
        a, b = int(keep[0]), int(keep[-1])
        body = pmf[a: b + 1]
        escape = max(row[0] + (1.0 - row[-1]) + pmf[:a].sum() + pmf[b + 1:].sum(), 0.0)
        cdfs.append(rc.quantize_pmf(np.append(body, escape)))
        offsets.append(first + a)
    return rc.pack_tables(cdfs, offsets)


def scale_table(levels: int = SCALE_LEVELS, lo: float = SIGMA_FLOOR, hi: float = SIGMA_CEIL) -> np.ndarray:
    return np.exp(np.linspace(math.log(lo), math.log(hi), levels))


def gaussian_tables(scales: np.ndarray | None = None):
    """One table per scale bucket over residuals ``[-L, L]``, ``L <= 127``."""
    scales = scale_table() if scales is None else scales
    cdfs, offsets = [], []
    for s in scales:
        half = int(min(MAX_SYMBOL, max(1, math.ceil(5.5 * s - 0.5))))
        edges = (np.arange(-half, half + 2) - 0.5) / s
        cdf = np.array([0.5 * math.erfc(-e / math.sqrt(2)) for e in edges])
        body = np.diff(cdf)
        escape = max(1.0 - body.sum(), 0.0)
        cdfs.append(rc.quantize_pmf(np.append(body, escape)))
        offsets.append(-half)
    return rc.pack_tables(cdfs, offsets)


def scale_index(sigma: np.ndarray | torch.Tensor, scales: np.ndarray | None = None) -> np.ndarray:
    """Nearest (in log domain) scale bucket for every element of ``sigma``."""
    scales = scale_table() if scales is None else scales
    if isinstance(sigma, torch.Tensor):
        sigma = sigma.detach().cpu().numpy()
    logs = np.log(np.clip(np.asarray(sigma, dtype=np.float64), scales[0], scales[-1]))
    step = (math.log(scales[-1]) - math.log(scales[0])) / (len(scales) - 1)
    return np.clip(np.rint((logs - math.log(scales[0])) / step), 0, len(scales) - 1).astype(np.int64)


_GAUSSIAN_TABLES = None


def default_gaussian_tables():
    global _GAUSSIAN_TABLES
    if _GAUSSIAN_TABLES is None:
        _GAUSSIAN_TABLES = gaussian_tables()
    return _GAUSSIAN_TABLES
