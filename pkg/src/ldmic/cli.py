"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 incompatibility.
Errors are reported on stderr as a single ``error: <kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INCOMPATIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads():
    from .entropy.codec import worker_count

    torch.set_num_threads(worker_count())


# commands ---------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .data_io import load_checkpoint, load_manifest, save_checkpoint
    from .plotting import plot_training
    from .synthetic import make_dataset
    from .training import RunConfig, build_variant, train

    if args.manifest is None and args.synthetic is None:
        raise UsageError("train needs --manifest or --synthetic")
    cfg = RunConfig(lam=args.lam, epochs=args.epochs, batch_size=args.batch_size, crop_size=args.crop,
                    variant=args.variant, seed=args.seed, learning_rate=args.lr,
                    decay_every=args.decay_every,
                    metric="mse" if args.metric == "psnr" else "msssim", M=args.M, N=args.N)
    if args.manifest is not None:
        dataset = load_manifest(args.manifest)
    else:
        dataset = make_dataset(args.synthetic, seed=args.seed, size=max(cfg.crop_size, 64), views=args.views)
    source = load_checkpoint(args.source) if args.source else None
    params = build_variant(cfg.variant, cfg.M, cfg.N, seed=cfg.seed, source=source, lam=cfg.lam)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    if metrics.exists():
        metrics.unlink()
    result = train(cfg, dataset, params=params, metrics_path=metrics)
    save_checkpoint(result.params, out)
    plot_training(result.history, metrics.with_suffix(".png"))
    last = result.history[-1]
    print(f"trained {cfg.variant} lambda={cfg.lam:g}: loss={last['loss']:.4f} "
          f"mse={last['distortion_mse']:.6f} bpp={last['rate_bpp']:.4f} -> {out}")
    return EXIT_OK


def _model(args):
    from .data_io import load_checkpoint

    params = load_checkpoint(args.checkpoint, expect_variant=getattr(args, "variant", None))
    params.model.eval()
    return params


def cmd_compress(args) -> int:
    from .data_io import load_group, load_manifest
    from .entropy.codec import compress_group

    params = _model(args)
    index = load_manifest(args.manifest)
    ids = [args.group] if args.group else index.ids()
    out = Path(args.out)
    if len(ids) > 1 or out.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{gid}.ldmb" for gid in ids]
    else:
        targets = [out]
    for gid, target in zip(ids, targets):
        group = load_group(index, gid)
        container, _ = compress_group(params.model, group.views)
        target.write_bytes(container.to_bytes())
        h, w = group.shape
        print(f"{gid}: {len(container)} bytes, {8 * len(container) / (group.K * h * w):.4f} bpp -> {target}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .data_io import write_image
    from .entropy.bitstream import BitstreamContainer
    from .entropy.codec import decompress_group

    params = _model(args)
    src = Path(args.input)
    container = BitstreamContainer.from_bytes(src.read_bytes())
    result = decompress_group(container, params.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, view in enumerate(result.views):
        write_image(out / f"{src.stem}_v{k}.png", view)
    print(f"{src}: {container.K} views {container.width}x{container.height} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data_io import load_group, load_manifest
    from .entropy.codec import compress_group, decompress_group
    from .evaluation import RDCurve, RDPoint, bpp, emit_rd, ms_ssim, psnr, read_rd

    params = _model(args)
    index = load_manifest(args.manifest)
    ids = [args.group] if args.group else index.ids()
    rates, quality = [], []
    for gid in ids:
        group = load_group(index, gid)
        container, _ = compress_group(params.model, group.views)
        rec = decompress_group(container, params.model)
        rates.append(bpp(container))
        if args.metric == "psnr":
            quality.append(np.mean([psnr(a, b) for a, b in zip(group.views, rec.views)]))
        else:
            quality.append(np.mean([ms_ssim(a, b) for a, b in zip(group.views, rec.views)]))
    point = RDPoint(float(np.mean(rates)), float(np.mean(quality)))
    label = args.label or f"{params.variant}"
    out = Path(args.out)
    curves = read_rd(out) if out.exists() else []
    curve = next((c for c in curves if c.label == label and c.metric == args.metric), None)
    if curve is None:
        curve = RDCurve(label, args.metric)
        curves.append(curve)
    if not any(p.bpp == point.bpp and p.quality == point.quality for p in curve.points):
        curve.points.append(point)
        curve.points.sort(key=lambda p: p.bpp)
    emit_rd(curves, out)
    print(f"{label}: {len(ids)} groups, {point.bpp:.4f} bpp, {args.metric}={point.quality:.4f} -> {out}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    from .evaluation import bd_rate, read_rd

    def pick(path):
        curves = [c for c in read_rd(path) if args.metric is None or c.metric == args.metric]
        if len(curves) != 1:
            raise UsageError(f"{path}: expected exactly one curve, found {len(curves)} (use --metric)")
        return curves[0]

    value = bd_rate(pick(args.anchor), pick(args.test))
    print(f"BD-rate: {value:.2f}%")
    return EXIT_OK


def cmd_rate_region(args) -> int:
    from .dsc import JointPMF, marginal_entropies, sw_admissible, sw_corner

    pmf = JointPMF.load(args.pmf)
    c1, c2, joint = sw_corner(pmf)
    h1, h2 = marginal_entropies(pmf)
    print(f"H(X1|X2)={c1:.5f} H(X2|X1)={c2:.5f} H(X1,X2)={joint:.5f} H(X1)={h1:.5f} H(X2)={h2:.5f}")
    points = [("corner_a", h1, c2), ("corner_b", c1, h2)]
    if args.rates:
        for item in args.rates:
            try:
                r1, r2 = (float(v) for v in item.split(","))
            except ValueError as exc:
                raise UsageError(f"--rates expects R1,R2 pairs, got {item!r}") from exc
            points.append((item, r1, r2))
    for name, r1, r2 in points:
        verdict = "admissible" if sw_admissible(r1, r2, pmf) else "inadmissible"
        print(f"{name}: R1={r1:.5f} R2={r2:.5f} {verdict}")
    return EXIT_OK


def cmd_dump_latents(args) -> int:
    from PIL import Image

    from .data_io import load_group, load_manifest
    from .entropy.codec import infer

    params = _model(args)
    index = load_manifest(args.manifest)
    group = load_group(index, args.group)
    res = infer(params.model, group.views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, code in enumerate(res.codes):
        mag = np.abs(code.y_symbols).astype(np.float64)  # (M, h, w)
        m, h, w = mag.shape
        cols = math.ceil(math.sqrt(m))
        rows = math.ceil(m / cols)
        tile = np.zeros((rows * (h + 1), cols * (w + 1)))
        for c in range(m):
            r, q = divmod(c, cols)
            tile[r * (h + 1): r * (h + 1) + h, q * (w + 1): q * (w + 1) + w] = mag[c]
        scale = tile.max() or 1.0
        Image.fromarray(np.rint(255 * tile / scale).astype(np.uint8)).save(
            out / f"{group.group_id}_v{k}_latent.png")
        print(f"view {k}: {int((mag == 0).sum())}/{mag.size} zero symbols, max |v|={int(mag.max())}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_dataset, write_dataset

    groups = make_dataset(args.groups, seed=args.seed, size=args.size, views=args.views)
    path = write_dataset(groups, args.out)
    print(f"{len(groups)} groups of {args.views} views -> {path}")
    return EXIT_OK


# parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .model import VARIANTS

    p = _Parser(prog="ldmic", description="Distributed multi-view image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a manifest or synthetic data")
    t.add_argument("--manifest")
    t.add_argument("--synthetic", type=int, metavar="GROUPS")
    t.add_argument("--views", type=int, default=2)
    t.add_argument("--lambda", dest="lam", type=float, default=2048.0)
    t.add_argument("--variant", choices=VARIANTS, default="ldmic")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=400)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--crop", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--decay-every", type=int, default=100)
    t.add_argument("--metric", choices=("psnr", "msssim"), default="psnr",
                   help="distortion to optimize (psnr trains on MSE)")
    t.add_argument("--M", type=int, default=192)
    t.add_argument("--N", type=int, default=128)
    t.add_argument("--source", help="sep_enc_dec checkpoint (required for frozen_encoder)")
    t.add_argument("--metrics", help="metrics CSV (default: next to the checkpoint)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress manifest groups to .ldmb files")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--group")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a .ldmb file to PNG views")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="measure bpp and quality, add a point to an RD CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--group")
    e.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    e.add_argument("--label")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate of a test RD curve against an anchor")
    b.add_argument("--anchor", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--metric", choices=("psnr", "msssim"))
    b.set_defaults(func=cmd_bdrate)

    r = sub.add_parser("rate-region", help="Slepian-Wolf region of a joint PMF")
    r.add_argument("--pmf", required=True)
    r.add_argument("--rates", nargs="*", metavar="R1,R2")
    r.set_defaults(func=cmd_rate_region)

    l = sub.add_parser("dump-latents", help="write per-view |round(y - mu)| maps")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--manifest", required=True)
    l.add_argument("--group", required=True)
    l.add_argument("--out", required=True)
    l.set_defaults(func=cmd_dump_latents)

    s = sub.add_parser("synth", help="write a synthetic correlated multi-view dataset")
    s.add_argument("--groups", type=int, default=16)
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def _classify(exc: BaseException) -> tuple[int, str]:
    from .data_io import CheckpointIncompatible
    from .entropy.codec import IncompatibleError
    from .model import VariantError
    from .training import ConfigurationError

    if isinstance(exc, (UsageError, ConfigurationError)):
        return EXIT_USAGE, "usage"
    if isinstance(exc, (CheckpointIncompatible, IncompatibleError, VariantError)):
        return EXIT_INCOMPATIBLE, "incompatible"
    return EXIT_DATA, "data"


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, OSError, RuntimeError) as exc:
        code, kind = _classify(exc)
        msg = str(exc).replace("\n", " ").strip("'\"")
        print(f"error: {kind}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
