"""Two-stage augmentation: offline dataset expansion and online per-epoch
transforms.

Offline expansion writes N augmented PNG copies per training image, so the
training split grows by exactly (N+1)x. Each copy gets its own RNG derived
by hashing (master_seed, source_index, copy_index); outputs are therefore
byte-identical across reruns and independent of processing order. Online
augmentation is a light random jitter applied to an in-memory batch, keyed
the same way by (epoch_seed, sample_index).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import imgops
from .dataset import ImageSample, Manifest
from .errors import InvalidParameterError

OP_KINDS = ("affine", "clahe", "all_channel_clahe", "gamma_contrast",
            "edge_detect", "directed_edge_detect", "canny", "channel_shuffle",
            "grayscale", "hue_saturation", "color_quantize", "contrast_brightness")


def load_image(path) -> np.ndarray:
    """Read an image file as uint8, HxWx3 for color modes, HxW for gray."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(img).save(path, format="PNG")


def derive_rng(master_seed: int, sample_index: int, copy_index: int) -> np.random.Generator:
    """Per-(sample, copy) generator from a hash, so results do not depend on
    the order pairs are processed in."""
    digest = hashlib.sha256(
        struct.pack("<qqq", master_seed, sample_index, copy_index)).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if not lo < hi:
        raise InvalidParameterError(f"{name} range must satisfy low < high, got {rng_pair}")
    return float(lo), float(hi)


@dataclass(frozen=True)
class AugOp:
    """One augmentation kind plus its numeric parameter ranges.

    Range-valued params are (low, high) pairs sampled per application;
    scalar params pass through unchanged.
    """
    kind: str
    params: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise InvalidParameterError(f"unknown augmentation kind {self.kind!r}")
        for key, val in self.params.items():
            if isinstance(val, tuple) and len(val) == 2:
                _check_range(f"{self.kind}.{key}", val)

    def _draw(self, key, default, rng):
        val = self.params.get(key, default)
        if isinstance(val, tuple) and len(val) == 2:
            return rng.uniform(*val)
        return val

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        k = self.kind
        if k == "affine":
            h, w = img.shape[:2]
            return imgops.affine(
                img,
                rot_deg=self._draw("rot_deg", (-25.0, 25.0), rng),
                scale=self._draw("scale", (0.8, 1.2), rng),
                tx=self._draw("translate_frac", (-0.1, 0.1), rng) * w,
                ty=self._draw("translate_frac", (-0.1, 0.1), rng) * h,
                shear_deg=self._draw("shear_deg", (-16.0, 16.0), rng),
                flip_h=bool(self.params.get("flips", True)) and rng.random() < 0.5,
                flip_v=bool(self.params.get("flips", True)) and rng.random() < 0.5,
            )
        if k == "clahe":
            return imgops.clahe(img, self.params.get("tile_grid", (8, 8)),
                                self.params.get("clip_limit", 2.0))
        if k == "all_channel_clahe":
            return imgops.all_channel_clahe(img, self.params.get("tile_grid", (8, 8)),
                                            self.params.get("clip_limit", 2.0))
        if k == "gamma_contrast":
            return imgops.gamma_contrast(img, self._draw("gamma", (0.6, 1.6), rng))
        if k == "edge_detect":
            return imgops.edge_detect(img, self._draw("alpha", (0.3, 0.7), rng))
        if k == "directed_edge_detect":
            return imgops.directed_edge_detect(img, self._draw("alpha", (0.3, 0.7), rng),
                                               self._draw("angle_deg", (0.0, 180.0), rng))
        if k == "canny":
            return imgops.canny(img, self.params.get("low_thr", 50.0),
                                self.params.get("high_thr", 150.0))
        if k == "channel_shuffle":
            return imgops.channel_shuffle(img, tuple(rng.permutation(3)))
        if k == "grayscale":
            return imgops.to_grayscale(img)
        if k == "hue_saturation":
            return imgops.hue_saturation(img, self._draw("hue_shift_deg", (-20.0, 20.0), rng),
                                         self._draw("sat_shift", (-0.2, 0.2), rng))
        if k == "color_quantize":
            return imgops.color_quantize(img, self.params.get("n_colors", 16))
        if k == "contrast_brightness":
            return imgops.contrast_brightness(img, self._draw("contrast", (0.8, 1.3), rng),
                                              self._draw("brightness", (-25.0, 25.0), rng))
        raise AssertionError(k)


@dataclass(frozen=True)
class AugGroup:
    """A family of interchangeable ops applied with some probability; when a
    group fires, exactly one of its ops is chosen uniformly."""
    name: str
    probability: float
    ops: tuple

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidParameterError(
                f"group {self.name}: probability must be in [0, 1]")
        if not self.ops:
            raise InvalidParameterError(f"group {self.name}: no ops")


def default_groups() -> tuple:
    """Default composition: warp and adaptive-equalization groups always
    fire, the remaining families each fire with probability 0.3."""
    return (
        AugGroup("warp", 1.0, (AugOp("affine"),)),
        AugGroup("equalize", 1.0, (AugOp("clahe"), AugOp("all_channel_clahe"))),
        AugGroup("edges", 0.3, (AugOp("edge_detect"), AugOp("directed_edge_detect"))),
        AugGroup("binary_edges", 0.3, (AugOp("canny"),)),
        AugGroup("photometric", 0.3, (AugOp("channel_shuffle"), AugOp("grayscale"),
                                      AugOp("hue_saturation"), AugOp("color_quantize"))),
        AugGroup("contrast", 0.3, (AugOp("gamma_contrast"), AugOp("contrast_brightness"))),
    )


@dataclass(frozen=True)
class AugPipeline:
    groups: tuple
    copies_per_image: int
    master_seed: int

    def __post_init__(self):
        # 0 is allowed and disables expansion entirely
        if self.copies_per_image < 0:
            raise InvalidParameterError("copies_per_image must be >= 0")

    def apply_copy(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One augmented variant. The gate draw happens for every group so
        the rng stream has a fixed layout regardless of which groups fire."""
        for group in self.groups:
            gate = rng.random()
            pick = int(rng.integers(len(group.ops)))
            if gate < group.probability:
                img = group.ops[pick].apply(img, rng)
        return img


def default_pipeline(copies_per_image: int, master_seed: int) -> AugPipeline:
    return AugPipeline(default_groups(), copies_per_image, master_seed)


def augmented_name(source_path: str, copy_index: int) -> str:
    return f"{Path(source_path).stem}__aug{copy_index}.png"


def generate_offline(manifest: Manifest, pipeline: AugPipeline, out_dir) -> Manifest:
    """Expand the training split by exactly copies_per_image extra PNGs per
    image, leaving validation and test rows untouched.

    Augmented files land in out_dir/<raw_label>/. The returned manifest keeps
    each original row followed by its copies; reruns with the same pipeline
    overwrite byte-identical files.
    """
    out_root = Path(out_dir)
    n = pipeline.copies_per_image
    if n == 0:
        return Manifest(list(manifest.rows), scheme=manifest.scheme, seed=manifest.seed)
    new_rows = []
    for row in manifest.rows:
        new_rows.append(row)
        if row.split != "train":
            continue
        img = load_image(row.path)
        class_dir = out_root / row.raw_label
        class_dir.mkdir(parents=True, exist_ok=True)
        for k in range(1, n + 1):
            rng = derive_rng(pipeline.master_seed, row.source_index, k)
            aug = pipeline.apply_copy(img, rng)
            dest = class_dir / augmented_name(row.path, k)
            save_png(dest, aug)
            new_rows.append(replace(row, path=str(dest), origin="augmented"))
    return Manifest(new_rows, scheme=manifest.scheme, seed=manifest.seed)


@dataclass(frozen=True)
class OnlineAugConfig:
    """Per-epoch jitter settings. brightness_range=None disables brightness;
    rotation_deg=0 disables rotation. Only nearest-edge fill is supported,
    and feature-wise centering stays off (inputs are standardized later,
    per feature column, from training statistics)."""
    rotation_deg: float = 5.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    brightness_range: tuple | None = (0.5, 1.3)
    channel_shift: bool = True
    channel_shift_intensity: float = 20.0
    fill_mode: str = "nearest"
    featurewise_center: bool = False

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise InvalidParameterError("rotation_deg must be >= 0")
        if self.brightness_range is not None:
            _check_range("brightness", self.brightness_range)
        if self.fill_mode != "nearest":
            raise InvalidParameterError("only nearest fill is supported")
        if self.featurewise_center:
            raise InvalidParameterError("featurewise centering is not supported")

    @property
    def is_identity(self) -> bool:
        return (self.rotation_deg == 0 and not self.horizontal_flip
                and not self.vertical_flip and self.brightness_range is None
                and not self.channel_shift)


def online_augment(batch: np.ndarray, cfg: OnlineAugConfig, epoch_seed: int,
                   sample_indices=None) -> np.ndarray:
    """Independently jitter each image in a [B x H x W x C] uint8 batch.

    Deterministic per (epoch_seed, sample_index): the same image index gets
    the same transform in two runs with the same seed.
    """
    if batch.ndim not in (3, 4):
        raise InvalidParameterError(f"expected a batch of images, got shape {batch.shape}")
    squeeze = batch.ndim == 3
    if squeeze:
        batch = batch[None]
    if sample_indices is None:
        sample_indices = np.arange(batch.shape[0])
    if len(sample_indices) != batch.shape[0]:
        raise InvalidParameterError("one sample index per batch row required")
    if cfg.is_identity:
        return batch[0].copy() if squeeze else batch.copy()

    out = np.empty_like(batch)
    for i, idx in enumerate(sample_indices):
        rng = derive_rng(epoch_seed, int(idx), 0)
        img = batch[i]
        rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg > 0 else 0.0
        flip_h = cfg.horizontal_flip and rng.random() < 0.5
        flip_v = cfg.vertical_flip and rng.random() < 0.5
        if rot != 0.0 or flip_h or flip_v:
            img = imgops.affine(img, rot_deg=rot, flip_h=flip_h, flip_v=flip_v)
        if cfg.brightness_range is not None:
            img = imgops.brightness_multiply(img, rng.uniform(*cfg.brightness_range))
        if cfg.channel_shift and img.ndim == 3:
            s = cfg.channel_shift_intensity
            img = imgops.channel_shift(img, rng.uniform(-s, s, size=3))
        out[i] = img
    return out[0] if squeeze else out
