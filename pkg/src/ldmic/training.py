"""Rate-distortion training and construction of the ablation variants."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data_io import DatasetIndex, ModelParameters, MultiViewGroup, augment, load_group, save_checkpoint
from .evaluation import ms_ssim_torch
from .model import LDMIC, VARIANTS, ModelConfig

log = logging.getLogger(__name__)

LAMBDAS_MSE = (256, 512, 1024, 2048, 4096)
LAMBDAS_MSSSIM = (8, 16, 32, 64, 128)
METRICS_FIELDS = ["epoch", "step", "lambda", "variant", "loss", "distortion_mse", "rate_bpp", "lr"]


class TrainingDiverged(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class RunConfig:
    lam: float = 2048.0
    epochs: int = 400
    batch_size: int = 8
    crop_size: int = 256
    variant: str = "ldmic"
    seed: int = 0
    learning_rate: float = 1e-4
    decay_every: int = 100
    metric: str = "mse"
    M: int = 192
    N: int = 128
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("lambda and learning rate must be positive")
        if min(self.epochs, self.batch_size, self.crop_size) <= 0:
            raise ConfigurationError("epochs, batch size and crop size must be positive")
        if self.crop_size % 64:
            raise ConfigurationError(f"crop size {self.crop_size} is not a multiple of 64")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.metric not in ("mse", "msssim"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    distortion: torch.Tensor
    rate: torch.Tensor
    lam: float
    mse: torch.Tensor | None = None

    def floats(self) -> dict:
        return {"loss": float(self.total.detach()), "distortion": float(self.distortion.detach()),
                "rate_bpp": float(self.rate.detach()), "lambda": self.lam,
                "distortion_mse": float((self.mse if self.mse is not None else self.distortion).detach())}


def rd_loss(x: torch.Tensor, x_hat: torch.Tensor, rate_bits, lam: float, pixels: int,
            metric: str = "mse") -> LossBreakdown:
    """``lambda * D + R`` with D per pixel (over all views) and R in bits per pixel."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    rate_bits = torch.as_tensor(rate_bits, dtype=x_hat.dtype)
    for name, t in (("input", x), ("reconstruction", x_hat), ("rate", rate_bits)):
        if not torch.isfinite(t).all():
            raise TrainingDiverged(f"non-finite values in {name} (nan={int(torch.isnan(t).sum())})")
    mse = torch.mean((x - x_hat) ** 2)
    if metric == "mse":
        d = mse
    else:
        d = 1 - ms_ssim_torch(x.flatten(0, -4), x_hat.flatten(0, -4)).mean()
    r = rate_bits / pixels
    return LossBreakdown(lam * d + r, d, r, lam, mse)


def lr_schedule(epoch: int, base: float = 1e-4, every: int = 100, halvings: int = 3) -> float:
    """Halve ``base`` every ``every`` epochs, at most ``halvings`` times."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base * 0.5 ** min(epoch // every, halvings)


# variants -------------------------------------------------------------------------


def build_variant(name: str, M: int = 192, N: int = 128, seed: int = 0,
                  source: ModelParameters | None = None, lam: float = 0.0) -> ModelParameters:
    """Freshly initialized model for an ablation variant.

    ``frozen_encoder`` copies every shared weight from a ``sep_enc_dec``
    checkpoint and freezes the encoder and entropy model; only the joint
    decoder stays trainable. With any other variant, ``source`` (if given)
    just initializes the shared weights.
    """
    if name == "frozen_encoder" and source is None:
        raise ConfigurationError("frozen_encoder needs a pretrained sep_enc_dec source checkpoint")
    if name == "frozen_encoder" and source.variant != "sep_enc_dec":
        raise ConfigurationError(f"frozen_encoder source must be sep_enc_dec, got {source.variant}")
    if source is not None:
        M, N = source.model.config.M, source.model.config.N
    torch.manual_seed(seed)
    model = LDMIC(ModelConfig(M=M, N=N, variant=name))
    if source is not None:
        own = model.state_dict()
        shared = {k: v for k, v in source.model.state_dict().items()
                  if k in own and own[k].shape == v.shape}
        model.load_state_dict(shared, strict=False)
    if name == "frozen_encoder":
        for mod in model.encoder_modules():
            mod.requires_grad_(False)
    meta = {"init": "pytorch default fan-in uniform", "seed": seed}
    if source is not None:
        meta["source_variant"] = source.variant
    return ModelParameters(model=model, lam=lam, meta=meta)


# training loop -----------------------------------------------------------------------


def _groups(dataset) -> list[MultiViewGroup]:
    if isinstance(dataset, DatasetIndex):
        return [load_group(dataset, gid) for gid in dataset.ids()]
    return list(dataset)


def _batches(groups: list[MultiViewGroup], batch_size: int, rng: np.random.Generator):
    """Shuffled minibatches, each holding groups with the same view count."""
    order = rng.permutation(len(groups))
    by_k: dict[int, list[int]] = {}
    for i in order:
        by_k.setdefault(groups[i].K, []).append(int(i))
    batches = []
    for idx in by_k.values():
        batches += [idx[s: s + batch_size] for s in range(0, len(idx), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_tensor(groups: list[MultiViewGroup], crop: int, seeds) -> torch.Tensor:
    out = []
    for g, s in zip(groups, seeds):
        if min(g.shape) > crop:
            g = augment(g, crop, int(s))
        elif g.shape != (crop, crop):
            raise ValueError(f"group {g.group_id} is {g.shape}, smaller than crop {crop}")
        out.append(g.tensor())
    return torch.stack(out)


def train_step(model: LDMIC, x: torch.Tensor, lam: float, generator=None, metric: str = "mse"):
    out = model(x, generator)
    bits = sum(-torch.log2(l).sum() for l in out["likelihoods"].values()) / x.shape[0]
    pixels = x.shape[1] * x.shape[-2] * x.shape[-1]
    x_rec = out["x_hat"]
    # distortion per group averaged over the batch; rate already per group
    return rd_loss(x, x_rec, bits, lam, pixels, metric)


@dataclass
class TrainResult:
    params: ModelParameters
    history: list[dict] = field(default_factory=list)


def train(config: RunConfig, dataset, params: ModelParameters | None = None,
          metrics_path=None, checkpoint_path=None, progress=None) -> TrainResult:
    """Minibatch Adam on the rate-distortion loss; deterministic given ``config.seed``."""
    groups = _groups(dataset)
    if not groups:
        raise ConfigurationError("training set is empty")
    torch.manual_seed(config.seed)
    if params is None:
        params = build_variant(config.variant, config.M, config.N, seed=config.seed, lam=config.lam)
    params.lam = config.lam
    model = params.model
    model.train()
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    last_good = copy.deepcopy(model.state_dict())
    history = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        if fh.tell() == 0:
            writer.writeheader()
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config.learning_rate, config.decay_every)
            for g in opt.param_groups:
                g["lr"] = lr
            sums = {"loss": 0.0, "distortion_mse": 0.0, "rate_bpp": 0.0}
            seen = 0
            for idx in _batches(groups, config.batch_size, rng):
                seeds = rng.integers(0, 2 ** 31, size=len(idx))
                x = batch_tensor([groups[i] for i in idx], config.crop_size, seeds)
                try:
                    lb = train_step(model, x, config.lam, gen, config.metric)
                    if not torch.isfinite(lb.total):
                        raise TrainingDiverged(f"loss became {float(lb.total)} at step {step}")
                except TrainingDiverged:
                    model.load_state_dict(last_good)
                    raise
                opt.zero_grad(set_to_none=True)
                lb.total.backward()
                torch.nn.utils.clip_grad_norm_(trainable, config.clip_norm)
                opt.step()
                step += 1
                vals = lb.floats()
                for k in sums:
                    sums[k] += vals[k] * len(idx)
                seen += len(idx)
            record = {"epoch": epoch, "step": step, "lambda": config.lam, "variant": config.variant,
                      "lr": lr, **{k: v / seen for k, v in sums.items()}}
            history.append(record)
            if writer is not None:
                writer.writerow(record)
                fh.flush()
            last_good = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_checkpoint(params, checkpoint_path)
            if progress is not None:
                progress(record)
            log.info("epoch %d loss %.4f mse %.5f bpp %.4f", epoch, record["loss"],
                     record["distortion_mse"], record["rate_bpp"])
    finally:
        if fh is not None:
            fh.close()
    params.meta = {**params.meta, "run": asdict(config), "epochs_done": len(history)}
    return TrainResult(params, history)


def gradient_norms(model: LDMIC) -> dict[str, float]:
    """Per-parameter gradient norms (0 for frozen or untouched parameters)."""
    return {n: (0.0 if p.grad is None else float(p.grad.norm())) for n, p in model.named_parameters()}
