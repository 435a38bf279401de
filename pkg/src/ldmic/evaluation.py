"""Quality and rate metrics, BD-rate and RD-curve files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
MIN_MS_SSIM_SIZE = (WINDOW - 1) * 2 ** (len(MS_SSIM_WEIGHTS) - 1)


class MetricError(ValueError):
    pass


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; 100 dB when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def _gauss_1d(dtype) -> torch.Tensor:
    x = torch.arange(WINDOW, dtype=dtype) - WINDOW // 2
    g = torch.exp(-(x ** 2) / (2 * WINDOW_SIGMA ** 2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    if x.shape[-2] >= WINDOW:
        x = F.conv2d(x, g.reshape(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    if x.shape[-1] >= WINDOW:
        x = F.conv2d(x, g.reshape(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return x


def _ssim_cs(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    ssim = (2 * mx * my + c1) / (mx * mx + my * my + c1) * cs
    return ssim.flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable 5-scale MS-SSIM of (B, C, H, W) batches in [0, 1]; returns (B,)."""
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < MIN_MS_SSIM_SIZE:
        raise MetricError(
            f"MS-SSIM over {len(MS_SSIM_WEIGHTS)} scales needs at least "
            f"{MIN_MS_SSIM_SIZE}px per side, got {tuple(x.shape[-2:])}"
        )
    g = _gauss_1d(x.dtype)
    weights = torch.tensor(MS_SSIM_WEIGHTS, dtype=x.dtype)
    vals = []
    for i in range(len(MS_SSIM_WEIGHTS)):
        ssim, cs = _ssim_cs(x, y, g)
        if i < len(MS_SSIM_WEIGHTS) - 1:
            vals.append(F.relu(cs))
            x = F.avg_pool2d(x, 2, ceil_mode=False)
            y = F.avg_pool2d(y, 2, ceil_mode=False)
        else:
            vals.append(F.relu(ssim))
    stacked = torch.stack(vals, dim=0)
    return torch.prod(stacked ** weights[:, None], dim=0)


def ms_ssim(a, b) -> float:
    """MS-SSIM of two HxWx3 (or HxW) arrays in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    ta = torch.from_numpy(a).permute(2, 0, 1)[None]
    tb = torch.from_numpy(b).permute(2, 0, 1)[None]
    return float(ms_ssim_torch(ta, tb)[0])


def bpp(container) -> float:
    """Bits per pixel of a serialized group, headers and length fields included."""
    return 8.0 * len(container) / (container.K * container.height * container.width)


# RD curves -------------------------------------------------------------------------------


@dataclass
class RDPoint:
    bpp: float
    quality: float


@dataclass
class RDCurve:
    label: str
    metric: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)

    def validate(self, min_points: int = 4) -> None:
        if len(self.points) < min_points:
            raise MetricError(f"curve {self.label!r} has {len(self.points)} points, need {min_points}")
        r = self.rates
        if np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise MetricError(f"curve {self.label!r}: rates must be positive and strictly increasing")


def bd_log_offset(anchor: RDCurve, test: RDCurve) -> float:
    """Mean log10-rate difference (test - anchor) over the shared quality interval."""
    anchor.validate()
    test.validate()
    qa, qt = anchor.qualities, test.qualities
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise MetricError("quality ranges of the two curves do not overlap")
    pa = np.polyint(np.polyfit(qa, np.log10(anchor.rates), 3))
    pt = np.polyint(np.polyfit(qt, np.log10(test.rates), 3))
    area_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    area_t = np.polyval(pt, hi) - np.polyval(pt, lo)
    return float((area_t - area_a) / (hi - lo))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate change of ``test`` against ``anchor`` in percent (negative = savings)."""
    return 100.0 * (10.0 ** bd_log_offset(anchor, test) - 1.0)


RD_FIELDS = ["label", "metric", "bpp", "quality"]


def emit_rd(curves: list[RDCurve], path, plot: bool = True) -> Path | None:
    """Write curves as CSV; also render ``<path>.png`` when ``plot`` (best effort)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RD_FIELDS)
        for c in curves:
            for p in c.points:
                w.writerow([c.label, c.metric, repr(float(p.bpp)), repr(float(p.quality))])
    if not plot:
        return None
    try:
        from .plotting import plot_rd
        return plot_rd(curves, path.with_suffix(".png"))
    except Exception:  # the CSV is the contract; a failed figure is not fatal
        return None


def read_rd(path) -> list[RDCurve]:
    curves: dict[tuple[str, str], RDCurve] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(RD_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise MetricError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            key = (row["label"], row["metric"])
            curve = curves.setdefault(key, RDCurve(*key))
            curve.points.append(RDPoint(float(row["bpp"]), float(row["quality"])))
    for c in curves.values():
        c.points.sort(key=lambda p: p.bpp)
    return list(curves.values())


# group evaluation ----------------------------------------------------------------------


@dataclass
class GroupScore:
    group_id: str
    bpp: float
    psnr: float
    mse: float
    ms_ssim: float | None = None
    actual_bpp: float | None = None

    def loss(self, lam: float) -> float:
        return lam * self.mse + self.bpp


def evaluate_group(model, group, with_msssim: bool = False) -> GroupScore:
    """Decode-mode evaluation with estimated rate; PSNR averaged over views."""
    from .entropy.codec import infer

    res = infer(model, group.views)
    h, w = group.shape
    pixels = group.K * h * w
    mses = [float(np.mean((np.asarray(a, np.float64) - b) ** 2)) for a, b in zip(group.views, res.views)]
    score = GroupScore(
        group_id=group.group_id,
        bpp=res.estimated_bits / pixels,
        psnr=float(np.mean([psnr(a, b) for a, b in zip(group.views, res.views)])),
        mse=float(np.mean(mses)),
    )
    if with_msssim and min(h, w) >= MIN_MS_SSIM_SIZE:
        score.ms_ssim = float(np.mean([ms_ssim(a, b) for a, b in zip(group.views, res.views)]))
    return score


def mean_loss(model, groups, lam: float) -> float:
    """Average decode-mode ``lambda * MSE + bpp`` over groups."""
    return float(np.mean([evaluate_group(model, g).loss(lam) for g in groups]))
