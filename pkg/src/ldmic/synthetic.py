"""Synthetic correlated multi-view groups.

A group is K crops of one shared scene taken at different horizontal
offsets (a crude stand-in for cameras with overlapping fields of view), each
with its own exposure gain and sensor noise. Scenes are made of a handful of
flat-coloured shapes over a smooth background, so the views share a small
colour palette and most of their content.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data_io import MultiViewGroup, write_image, write_manifest


def _scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.empty((h, w, 3), dtype=np.float32)
    base = rng.uniform(0.15, 0.85, size=3)
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = base[c] + 0.12 * np.sin(fx * xx + fy * yy + phase)
    palette = rng.uniform(0.0, 1.0, size=(int(rng.integers(3, 6)), 3))
    for _ in range(int(rng.integers(6, 12))):
        colour = palette[int(rng.integers(len(palette)))]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.05, 0.25) * h, rng.uniform(0.05, 0.25) * w
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = colour
    return img


def make_group(rng: np.random.Generator, size: int | tuple[int, int] = 64, views: int = 2,
               max_shift: float = 0.25, noise: float = 0.01, group_id: str = "") -> MultiViewGroup:
    """K correlated views of one random scene."""
    h, w = (size, size) if isinstance(size, int) else size
    span = int(round(max_shift * w))
    scene = _scene(rng, h, w + span)
    offsets = rng.integers(0, span + 1, size=views) if span else np.zeros(views, dtype=int)
    out = []
    for off in offsets:
        v = scene[:, off: off + w] * rng.uniform(0.9, 1.1) + rng.normal(0, noise, size=(h, w, 3))
        # round-trip through 8 bits so in-memory groups match their PNG files
        out.append((np.clip(np.rint(v * 255), 0, 255) / 255).astype(np.float32))
    return MultiViewGroup(out, group_id)


def make_dataset(n_groups: int, seed: int = 0, **kwargs) -> list[MultiViewGroup]:
    rng = np.random.default_rng(seed)
    return [make_group(rng, group_id=f"g{i:04d}", **kwargs) for i in range(n_groups)]


def write_dataset(groups: list[MultiViewGroup], root, manifest_name: str = "manifest.json") -> Path:
    """Write groups as PNG files plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for g in groups:
        names = []
        for k, v in enumerate(g.views):
            name = f"{g.group_id}_v{k}.png"
            write_image(root / name, v)
            names.append(name)
        entries[g.group_id] = names
    path = root / manifest_name
    write_manifest(path, ".", entries, variable_k=len({g.K for g in groups}) > 1)
    return path
