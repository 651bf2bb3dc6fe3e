"""Synthetic cue-conflict dataset generator and desk-scale image ingestion.

Every sample is one filled shape rendered with a texture pattern on a plain
dark background. Shape and texture vocabularies are disjoint and of equal
size, with the canonical pairing texture i <-> shape class i; cue-conflict
evaluation renders shape i with texture j != i. Geometry is kept with each
sample so a different texture can be re-rendered onto identical geometry.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pnm
from .util import derive_seed

__all__ = [
    "SHAPES",
    "TEXTURES",
    "DatagenError",
    "GeomSpec",
    "Dataset",
    "DatasetManifest",
    "render_sample",
    "generate_cue_conflict",
    "cue_conflict_eval_set",
    "compute_norm_stats",
    "save_dataset",
    "load_image_dir",
]

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "cross", "ring", "diamond")
TEXTURES = ("hstripes", "vstripes", "checker", "dots", "diag", "noise")

# Two-tone palette per texture; colors deliberately far apart so texture is
# an easy local cue while shape identity needs global silhouette.
_PALETTE = {
    "hstripes": ((0.90, 0.15, 0.15), (0.95, 0.85, 0.20)),
    "vstripes": ((0.20, 0.30, 0.90), (0.30, 0.90, 0.90)),
    "checker": ((0.20, 0.80, 0.25), (0.95, 0.95, 0.95)),
    "dots": ((0.15, 0.10, 0.40), (0.90, 0.25, 0.85)),
    "diag": ((0.95, 0.55, 0.10), (0.45, 0.25, 0.10)),
    "noise": ((0.60, 0.20, 0.90), (0.70, 0.95, 0.20)),
}


class DatagenError(ValueError):
    """Generator precondition violated or rendering impossible."""


@dataclass(frozen=True)
class GeomSpec:
    """Geometry of one rendered sample; re-rendering with any texture is pure."""
    shape: int
    cx: float
    cy: float
    scale: float          # half-extent in pixels
    angle: float          # radians
    bg: float             # background gray level
    noise_seed: int       # drives the 'noise' texture pattern


@dataclass
class Dataset:
    """In-memory image dataset with per-sample shape/texture labels and masks."""
    images: np.ndarray                 # (n, 3, H, W) float32 in [0, 1]
    shape_labels: np.ndarray           # (n,) int64
    texture_labels: np.ndarray         # (n,) int64; -1 when unknown
    masks: Optional[np.ndarray]        # (n, H, W) bool, foreground = True
    geoms: Optional[list]              # GeomSpec per sample when generated
    shapes: tuple
    textures: tuple
    norm_mean: Optional[np.ndarray] = None   # (3,) train-split statistics
    norm_std: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            images=self.images[idx],
            shape_labels=self.shape_labels[idx],
            texture_labels=self.texture_labels[idx],
            masks=self.masks[idx] if self.masks is not None else None,
            geoms=[self.geoms[i] for i in idx] if self.geoms is not None else None,
            shapes=self.shapes,
            textures=self.textures,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
        )


def _shape_inclusion(name: str, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """Analytic inside-test in unit local coordinates."""
    if name == "square":
        return np.maximum(np.abs(ux), np.abs(uy)) <= 1.0
    if name == "circle":
        return ux * ux + uy * uy <= 1.0
    if name == "triangle":
        # equilateral, apex up, inscribed in the unit circle
        e0 = (uy - 1.0) * (-np.sqrt(3) / 2 - 0.0) - (ux - 0.0) * (-0.5 - 1.0)
        e1 = (uy + 0.5) * (np.sqrt(3) / 2 + np.sqrt(3) / 2) - (ux + np.sqrt(3) / 2) * 0.0
        e2 = (uy + 0.5) * (0.0 - np.sqrt(3) / 2) - (ux - np.sqrt(3) / 2) * (1.0 + 0.5)
        return (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
    if name == "cross":
        arm = 0.35
        return ((np.abs(ux) <= arm) & (np.abs(uy) <= 1.0)) | \
               ((np.abs(uy) <= arm) & (np.abs(ux) <= 1.0))
    if name == "ring":
        r2 = ux * ux + uy * uy
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if name == "diamond":
        return np.abs(ux) + np.abs(uy) <= 1.0
    raise DatagenError(f"unknown shape '{name}'")


def _texture_pattern(name: str, xx: np.ndarray, yy: np.ndarray, noise_seed: int) -> np.ndarray:
    """Binary pattern selecting between the texture's two palette colors."""
    xi = xx.astype(np.int64)
    yi = yy.astype(np.int64)
    if name == "hstripes":
        return (yi // 2) % 2 == 0
    if name == "vstripes":
        return (xi // 2) % 2 == 0
    if name == "checker":
        return ((xi // 2) + (yi // 2)) % 2 == 0
    if name == "dots":
        return ((xi % 4 == 1) | (xi % 4 == 2)) & ((yi % 4 == 1) | (yi % 4 == 2))
    if name == "diag":
        return ((xi + yi) // 3) % 2 == 0
    if name == "noise":
        rng = np.random.default_rng(noise_seed)
        return rng.random(xi.shape) < 0.5
    raise DatagenError(f"unknown texture '{name}'")


def render_sample(geom: GeomSpec, texture: int, resolution: int,
                  shapes: Sequence[str] = SHAPES,
                  textures: Sequence[str] = TEXTURES) -> tuple[np.ndarray, np.ndarray]:
    """Render one sample; returns (image (3, H, W) float32, mask (H, W) bool)."""
    h = w = resolution
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx + 0.5 - geom.cx
    py = yy + 0.5 - geom.cy
    cos_a, sin_a = np.cos(-geom.angle), np.sin(-geom.angle)
    ux = (cos_a * px - sin_a * py) / geom.scale
    uy = (sin_a * px + cos_a * py) / geom.scale
    mask = _shape_inclusion(shapes[geom.shape], ux, uy)

    tex_name = textures[texture]
    pattern = _texture_pattern(tex_name, xx, yy, geom.noise_seed)
    c0, c1 = _PALETTE[tex_name]
    img = np.full((3, h, w), geom.bg, dtype=np.float32)
    for ch in range(3):
        plane = np.where(pattern, c0[ch], c1[ch]).astype(np.float32)
        img[ch] = np.where(mask, plane, img[ch])
    return img, mask


def _sample_geometry(rng: np.random.Generator, shape: int, resolution: int,
                     noise_seed: int, shapes: Sequence[str]) -> GeomSpec:
    """Draw position/scale/rotation; shrink on misfit, error after 100 tries."""
    cx = rng.uniform(0.25, 0.75) * resolution
    cy = rng.uniform(0.25, 0.75) * resolution
    scale = rng.uniform(0.22, 0.34) * resolution
    angle = rng.uniform(-0.35, 0.35)  # limited so square/diamond stay distinct
    bg = rng.uniform(0.06, 0.18)
    for _ in range(100):
        geom = GeomSpec(shape, cx, cy, scale, angle, bg, noise_seed)
        _, mask = render_sample(geom, 0, resolution, shapes=shapes)
        touches_border = mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
        if mask.any() and not touches_border:
            return geom
        scale *= 0.9
    raise DatagenError(f"shape {shapes[shape]} cannot fit canvas at {resolution}px")


def generate_cue_conflict(n_per_cell: int, shapes: Sequence[str], textures: Sequence[str],
                          seed: int, resolution: int) -> Dataset:
    """Full factorial shape x texture grid, n_per_cell samples per cell."""
    shapes = tuple(shapes)
    textures = tuple(textures)
    if len(shapes) < 4 or len(textures) < 4:
        raise DatagenError("need at least 4 shapes and 4 textures")
    for t in textures:
        if t not in _PALETTE:
            raise DatagenError(f"unknown texture '{t}'")
    n = len(shapes) * len(textures) * n_per_cell
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    masks = np.empty((n, resolution, resolution), dtype=bool)
    shape_labels = np.empty(n, dtype=np.int64)
    texture_labels = np.empty(n, dtype=np.int64)
    geoms: list[GeomSpec] = []
    index = 0
    for s in range(len(shapes)):
        for t in range(len(textures)):
            for _ in range(n_per_cell):
                rng = np.random.default_rng(derive_seed(seed, "sample", index))
                geom = _sample_geometry(rng, s, resolution,
                                        derive_seed(seed, "noise", index), shapes)
                img, mask = render_sample(geom, t, resolution, shapes, textures)
                images[index] = img
                masks[index] = mask
                shape_labels[index] = s
                texture_labels[index] = t
                geoms.append(geom)
                index += 1
    return Dataset(images, shape_labels, texture_labels, masks, geoms, shapes, textures)


def cue_conflict_eval_set(dataset: Dataset) -> Dataset:
    """Off-diagonal samples only (shape label != texture label)."""
    keep = np.nonzero(dataset.shape_labels != dataset.texture_labels)[0]
    return dataset.subset(keep)


def compute_norm_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all pixels; call on the train split only."""
    flat = dataset.images.astype(np.float64).transpose(1, 0, 2, 3).reshape(3, -1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


@dataclass
class DatasetManifest:
    """Everything needed to regenerate the dataset bit-identically."""
    seed: int
    resolution: int
    split_sizes: dict          # split name -> n_per_cell
    shapes: tuple = SHAPES
    textures: tuple = TEXTURES
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def generate(self, split: str) -> Dataset:
        if split not in self.split_sizes:
            raise DatagenError(f"manifest has no split '{split}'")
        ds = generate_cue_conflict(self.split_sizes[split], self.shapes, self.textures,
                                   derive_seed(self.seed, "split", split), self.resolution)
        ds.norm_mean = self.norm_mean
        ds.norm_std = self.norm_std
        return ds

    def with_norm_stats(self) -> "DatasetManifest":
        """Compute train-split statistics and return a manifest carrying them."""
        mean, std = compute_norm_stats(self.generate("train"))
        return replace(self, norm_mean=mean, norm_std=std)

    def save(self, path) -> None:
        cfg = configparser.ConfigParser()
        cfg["generator"] = {
            "seed": str(self.seed),
            "resolution": str(self.resolution),
            "shapes": ",".join(self.shapes),
            "textures": ",".join(self.textures),
        }
        cfg["splits"] = {k: str(v) for k, v in sorted(self.split_sizes.items())}
        if self.norm_mean is not None:
            cfg["normalization"] = {
                "mean": ",".join(f"{v:.8f}" for v in self.norm_mean),
                "std": ",".join(f"{v:.8f}" for v in self.norm_std),
            }
        with open(path, "w") as f:
            cfg.write(f)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        cfg = configparser.ConfigParser()
        if not cfg.read(path):
            raise DatagenError(f"manifest not found: {path}")
        gen = cfg["generator"]
        norm_mean = norm_std = None
        if cfg.has_section("normalization"):
            norm_mean = np.array([float(v) for v in cfg["normalization"]["mean"].split(",")],
                                 dtype=np.float32)
            norm_std = np.array([float(v) for v in cfg["normalization"]["std"].split(",")],
                                dtype=np.float32)
        return cls(
            seed=int(gen["seed"]),
            resolution=int(gen["resolution"]),
            split_sizes={k: int(v) for k, v in cfg["splits"].items()},
            shapes=tuple(gen["shapes"].split(",")),
            textures=tuple(gen["textures"].split(",")),
            norm_mean=norm_mean,
            norm_std=norm_std,
        )


def save_dataset(dataset: Dataset, root, split: str) -> None:
    """Write split as root/split/class_name/sample_%06d.ppm (+ .mask.pgm)."""
    root = Path(root)
    for i in range(len(dataset)):
        cls_name = dataset.shapes[dataset.shape_labels[i]]
        d = root / split / cls_name
        d.mkdir(parents=True, exist_ok=True)
        pnm.write_ppm(d / f"sample_{i:06d}.ppm", dataset.images[i])
        if dataset.masks is not None:
            pnm.write_pgm(d / f"sample_{i:06d}.mask.pgm", dataset.masks[i])


def _resize_nearest(img: np.ndarray, resolution: int) -> np.ndarray:
    src = img.shape[-1]
    if src == resolution:
        return img
    idx = (np.arange(resolution) * (src / resolution)).astype(np.int64)
    return img[..., idx[:, None], idx[None, :]]


def load_image_dir(path, resolution: int, shapes: Optional[Sequence[str]] = None) -> Dataset:
    """Load a split directory of plain PPMs (class subdirectories) at model resolution."""
    path = Path(path)
    class_dirs = sorted(d for d in path.iterdir() if d.is_dir()) if path.is_dir() else []
    if shapes is None:
        shapes = tuple(d.name for d in class_dirs)
    images, labels, masks = [], [], []
    any_mask = False
    for d in class_dirs:
        files = sorted(d.glob("*.ppm"))
        if not files:
            log.warning("empty class directory: %s", d)
        for f in files:
            img = _resize_nearest(pnm.read_ppm(f), resolution)
            images.append(img)
            labels.append(shapes.index(d.name) if d.name in shapes else -1)
            mask_path = f.with_suffix("").with_suffix(".mask.pgm") \
                if f.name.endswith(".ppm") else None
            mask_path = d / (f.stem + ".mask.pgm")
            if mask_path.exists():
                masks.append(_resize_nearest(pnm.read_pgm(mask_path), resolution) > 0.5)
                any_mask = True
            else:
                masks.append(np.zeros((resolution, resolution), dtype=bool))
    n = len(images)
    return Dataset(
        images=np.stack(images) if n else np.zeros((0, 3, resolution, resolution), np.float32),
        shape_labels=np.array(labels, dtype=np.int64),
        texture_labels=np.full(n, -1, dtype=np.int64),
        masks=np.stack(masks) if (n and any_mask) else None,
        geoms=None,
        shapes=tuple(shapes),
        textures=(),
    )
