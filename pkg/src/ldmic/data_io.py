"""Manifests, image groups, augmentation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .model import LDMIC, VARIANTS, ModelConfig


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or truncated."""


class CheckpointIncompatible(ValueError):
    """Checkpoint is well formed but does not fit the requested use."""


@dataclass
class GroupRecord:
    id: str
    views: list[Path]


@dataclass
class DatasetIndex:
    root: Path
    groups: list[GroupRecord]
    variable_k: bool = False

    @property
    def K(self) -> int | None:
        ks = {len(g.views) for g in self.groups}
        return ks.pop() if len(ks) == 1 else None

    def ids(self) -> list[str]:
        return [g.id for g in self.groups]

    def __len__(self) -> int:
        return len(self.groups)


@dataclass
class MultiViewGroup:
    views: list[np.ndarray]
    group_id: str = ""

    def __post_init__(self):
        shapes = {v.shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError(f"group {self.group_id!r}: views differ in shape {sorted(shapes)}")

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def shape(self) -> tuple[int, int]:
        return self.views[0].shape[:2]

    def tensor(self) -> torch.Tensor:
        """(K, 3, H, W) float32."""
        return torch.from_numpy(np.stack(self.views).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def load_manifest(path) -> DatasetIndex:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("groups"), list):
        raise ManifestError(f"{path}: expected an object with a 'groups' list")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    groups = []
    for n, entry in enumerate(doc["groups"]):
        try:
            gid, views = str(entry["id"]), entry["views"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: group #{n} needs 'id' and 'views'") from exc
        if not isinstance(views, list) or len(views) < 2:
            raise ManifestError(f"{path}: group {gid!r} lists {len(views) if isinstance(views, list) else 0} views, need >= 2")
        paths = [root / v for v in views]
        for p in paths:
            if not p.is_file():
                raise FileNotFoundError(f"group {gid!r}: image not found: {p}")
        groups.append(GroupRecord(gid, paths))
    variable_k = bool(doc.get("variable_k", False))
    if not variable_k and len({len(g.views) for g in groups}) > 1:
        raise ManifestError(f"{path}: groups have different view counts; set variable_k")
    if len({g.id for g in groups}) != len(groups):
        raise ManifestError(f"{path}: duplicate group ids")
    return DatasetIndex(root=root, groups=groups, variable_k=variable_k)


def write_manifest(path, root, groups: dict[str, list[str]], variable_k: bool = False) -> None:
    doc = {"root": str(root), "groups": [{"id": k, "views": list(v)} for k, v in groups.items()]}
    if variable_k:
        doc["variable_k"] = True
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM (RGB or grayscale) -> HxWx3 float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("LA", "P", "RGBA"):
                im = im.convert("L" if im.mode == "LA" else "RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: expected 8-bit samples, got {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.astype(np.float32) / 255.0


def write_image(path, view: np.ndarray) -> None:
    Image.fromarray(to_uint8(view)).save(path)


def to_uint8(view: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(view) * 255.0), 0, 255).astype(np.uint8)


def load_group(index: DatasetIndex, group_id: str) -> MultiViewGroup:
    for g in index.groups:
        if g.id == group_id:
            views = [read_image(p) for p in g.views]
            shapes = {v.shape for v in views}
            if len(shapes) != 1:
                raise ValueError(f"group {group_id!r}: view shapes differ: {sorted(shapes)}")
            return MultiViewGroup(views, group_id)
    raise KeyError(f"group {group_id!r} not in manifest")


def augment(group: MultiViewGroup, crop_size: int, seed: int) -> MultiViewGroup:
    """Random crop and horizontal flip shared by all views of the group."""
    h, w = group.shape
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than views {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    flip = bool(rng.integers(0, 2))
    views = []
    for v in group.views:
        c = v[top: top + crop_size, left: left + crop_size]
        views.append(np.ascontiguousarray(c[:, ::-1] if flip else c))
    return MultiViewGroup(views, group.group_id)


# checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"LDMC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct(">4sBBdI")


@dataclass
class ModelParameters:
    model: LDMIC
    lam: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.model.variant

    def checksum(self, modules=None) -> str:
        """SHA-256 over parameter values, optionally restricted to some submodules."""
        keep = None if modules is None else {id(p) for m in modules for p in m.parameters()}
        h = hashlib.sha256()
        for name, p in self.model.named_parameters():
            if keep is None or id(p) in keep:
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def save_checkpoint(params: ModelParameters, path) -> None:
    state = params.model.state_dict()
    names = sorted(state)
    tensors = {n: state[n].detach().cpu().contiguous() for n in names}
    meta = {
        "config": params.model.config.to_dict(),
        "meta": params.meta,
        "tensors": [[n, list(tensors[n].shape), str(tensors[n].dtype).replace("torch.", "")] for n in names],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, VARIANTS.index(params.variant),
                                float(params.lam), len(blob)))
        f.write(blob)
        for n in names:
            f.write(tensors[n].numpy().tobytes())


def load_checkpoint(path, expect_variant: str | None = None) -> ModelParameters:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, variant_id, lam, meta_len = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointIncompatible(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    if variant_id >= len(VARIANTS):
        raise CheckpointError(f"{path}: unknown variant id {variant_id}")
    variant = VARIANTS[variant_id]
    if expect_variant is not None and variant != expect_variant:
        raise CheckpointIncompatible(f"{path}: checkpoint variant {variant}, expected {expect_variant}")
    pos = _CKPT_HEAD.size
    if pos + meta_len > len(data):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[pos: pos + meta_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    pos += meta_len
    config = ModelConfig(**meta["config"])
    if config.variant != variant:
        raise CheckpointError(f"{path}: header variant {variant} disagrees with metadata {config.variant}")
    model = LDMIC(config)
    state = {}
    for name, shape, dtype in meta["tensors"]:
        dt = getattr(torch, dtype)
        n = int(np.prod(shape, dtype=np.int64)) * torch.empty((), dtype=dt).element_size()
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated weights at {name}")
        arr = np.frombuffer(data, dtype=torch.empty((), dtype=dt).numpy().dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos)
        state[name] = torch.from_numpy(arr.copy()).reshape(shape)
        pos += n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} unexpected trailing bytes")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointIncompatible(f"{path}: weights do not fit the model ({exc})") from exc
    return ModelParameters(model=model, lam=lam, meta=meta.get("meta", {}))

