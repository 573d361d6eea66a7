"""Frozen feature trunks.

Two trunk flavors share one interface: a built-in toy residual CNN for
desk-scale runs, and external convolutional graphs loaded from an ONNX file
with a JSON sidecar manifest describing preprocessing. Trunk weights are
never trained here; downstream heads learn on top of pooled features.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import onnx_rt
from .errors import (
    DimensionError,
    InferenceError,
    InvalidParameterError,
    TrunkLoadError,
)
from .imgops import resize_bilinear
from .nn import require_finite

TRUNK_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["input_name", "output_name", "input_size", "channel_order",
                 "scale", "mean", "std", "output_dim"],
    "properties": {
        "input_name": {"type": "string", "minLength": 1},
        "output_name": {"type": "string", "minLength": 1},
        "input_size": {"type": "array", "minItems": 2, "maxItems": 2,
                       "items": {"type": "integer", "minimum": 1}},
        "channel_order": {"enum": ["rgb", "bgr"]},
        "scale": {"type": "number"},
        "mean": {"type": "array", "minItems": 3, "maxItems": 3,
                 "items": {"type": "number"}},
        "std": {"type": "array", "minItems": 3, "maxItems": 3,
                "items": {"type": "number", "exclusiveMinimum": 0}},
        "output_dim": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": True,
}


@dataclass(frozen=True)
class PreprocessSpec:
    input_size: tuple
    channel_order: str = "rgb"
    scale: float = 1.0
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.channel_order not in ("rgb", "bgr"):
            raise InvalidParameterError(f"bad channel order {self.channel_order!r}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise InvalidParameterError(f"bad input size {self.input_size}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise InvalidParameterError("mean and std must have 3 entries")
        if min(self.std) <= 0:
            raise InvalidParameterError("std must be positive elementwise")


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    source: str
    input_size: tuple
    preprocess: PreprocessSpec
    output_dim: int

    def __post_init__(self):
        if self.output_dim < 1:
            raise InvalidParameterError("output_dim must be positive")
        if self.input_size != self.preprocess.input_size:
            raise InvalidParameterError(
                "backbone input size disagrees with its preprocess spec")


def preprocess(img: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """uint8 image -> float32 [H x W x 3] tensor ready for the trunk.

    Resize (bilinear), channel reorder, then x*scale - mean over std. A
    float32 input of the target shape is treated as already preprocessed and
    returned as-is, which makes the op idempotent.
    """
    h, w = spec.input_size
    if isinstance(img, np.ndarray) and img.dtype == np.float32:
        if img.shape != (h, w, 3):
            raise DimensionError(
                f"preprocessed tensor must be {(h, w, 3)}, got {img.shape}")
        return img
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    resized = resize_bilinear(img, h, w)
    x = resized.astype(np.float32)
    if spec.channel_order == "bgr":
        x = x[..., ::-1]
    x = x * np.float32(spec.scale)
    x = (x - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(spec.std,
                                                                   dtype=np.float32)
    return np.ascontiguousarray(x)


def global_max_pool(fmap: np.ndarray) -> np.ndarray:
    """Per-channel spatial max: [H x W x C] -> [C], [B x C x H x W] -> [B x C]."""
    if fmap.ndim == 3:
        if fmap.shape[0] < 1 or fmap.shape[1] < 1:
            raise DimensionError("feature map needs H, W >= 1")
        return fmap.max(axis=(0, 1))
    if fmap.ndim == 4:
        return fmap.max(axis=(2, 3))
    raise DimensionError(f"expected 3D or 4D feature map, got shape {fmap.shape}")


def residual_block(x: np.ndarray, weights: dict) -> np.ndarray:
    """H(x) = x + F(x) with F = conv3x3 -> relu -> conv3x3, same-padded.

    The residual branch must preserve the input shape; a channel mismatch in
    the weights is a dimension error.
    """
    w1, b1, w2, b2 = weights["w1"], weights["b1"], weights["w2"], weights["b2"]
    c = x.shape[1]
    if w1.shape[1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[1]:
        raise DimensionError(
            f"residual weights {w1.shape}/{w2.shape} do not map {c} channels to {c}")
    f = onnx_rt.conv2d(x, w1, b1, pads=(1, 1, 1, 1))
    f = np.maximum(f, 0)
    f = onnx_rt.conv2d(f, w2, b2, pads=(1, 1, 1, 1))
    return x + f


def _he_filters(rng, c_out, c_in, k=3):
    std = math.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)


class ToyTrunk:
    """Small frozen CNN: three stride-2 conv stages (8/16/32 channels) and a
    residual block on the last stage. Filters are fixed by the seed and never
    trained; the pooled output has 32 features."""

    output_dim = 32

    def __init__(self, seed: int = 0, input_size=(64, 64)):
        self.seed = seed
        self.id = f"toy-{seed}"
        rng = np.random.default_rng(seed)
        self._params = {
            "stage1.w": _he_filters(rng, 8, 3), "stage1.b": np.zeros(8, np.float32),
            "stage2.w": _he_filters(rng, 16, 8), "stage2.b": np.zeros(16, np.float32),
            "stage3.w": _he_filters(rng, 32, 16), "stage3.b": np.zeros(32, np.float32),
            "res.w1": _he_filters(rng, 32, 32), "res.b1": np.zeros(32, np.float32),
            "res.w2": _he_filters(rng, 32, 32), "res.b2": np.zeros(32, np.float32),
        }
        pp = PreprocessSpec(tuple(input_size), "rgb", 1.0 / 255.0,
                            (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        self.preprocess_spec = pp
        self.spec = BackboneSpec(self.id, f"toy:{seed}", tuple(input_size), pp,
                                 self.output_dim)

    def params(self) -> dict:
        return dict(self._params)

    def stage_maps(self, x: np.ndarray) -> dict:
        p = self._params
        maps = {}
        h = np.maximum(onnx_rt.conv2d(x, p["stage1.w"], p["stage1.b"],
                                      strides=(2, 2), pads=(1, 1, 1, 1)), 0)
        maps[1] = h
        h = np.maximum(onnx_rt.conv2d(h, p["stage2.w"], p["stage2.b"],
                                      strides=(2, 2), pads=(1, 1, 1, 1)), 0)
        maps[2] = h
        h = np.maximum(onnx_rt.conv2d(h, p["stage3.w"], p["stage3.b"],
                                      strides=(2, 2), pads=(1, 1, 1, 1)), 0)
        maps[3] = h
        maps[4] = residual_block(h, {"w1": p["res.w1"], "b1": p["res.b1"],
                                     "w2": p["res.w2"], "b2": p["res.b2"]})
        return maps

    def stages(self) -> list:
        return [1, 2, 3, 4]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.stage_maps(x)[4]


class OnnxTrunk:
    """Convolutional graph from an interchange file, with preprocessing read
    from the sidecar `<model>.manifest.json`."""

    def __init__(self, path):
        path = Path(path)
        manifest_path = path.with_suffix(".manifest.json")
        if not path.is_file():
            raise TrunkLoadError(f"model file {path} does not exist")
        if not manifest_path.is_file():
            raise TrunkLoadError(f"manifest sidecar {manifest_path} does not exist")
        manifest = load_trunk_manifest(manifest_path)
        self.manifest = manifest
        self.id = path.stem
        self.graph = onnx_rt.load_onnx(path)
        self.runner = onnx_rt.GraphRunner(self.graph)
        self.input_name = manifest["input_name"]
        self.output_name = manifest["output_name"]
        if self.input_name not in self.graph.input_names:
            raise TrunkLoadError(
                f"{path}: graph has no input {self.input_name!r} "
                f"(inputs: {self.graph.input_names})")
        produced = {o for n in self.graph.nodes for o in n.outputs}
        if self.output_name not in produced:
            raise TrunkLoadError(f"{path}: graph produces no value {self.output_name!r}")
        self.output_dim = int(manifest["output_dim"])
        pp = PreprocessSpec(tuple(manifest["input_size"]), manifest["channel_order"],
                            float(manifest["scale"]), tuple(manifest["mean"]),
                            tuple(manifest["std"]))
        self.preprocess_spec = pp
        self.spec = BackboneSpec(self.id, str(path), pp.input_size, pp, self.output_dim)

    def params(self) -> dict:
        return dict(self.graph.initializers)

    def stages(self) -> list:
        return [o for n in self.graph.nodes for o in n.outputs]

    def stage_maps(self, x: np.ndarray) -> dict:
        out = {}
        for name in self.stages():
            out[name] = self.runner.run({self.input_name: x}, output_name=name)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.runner.run({self.input_name: x}, output_name=self.output_name)


def load_trunk_manifest(path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise TrunkLoadError(f"cannot read trunk manifest {path}: {e}") from None
    try:
        jsonschema.validate(manifest, TRUNK_MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise TrunkLoadError(f"invalid trunk manifest {path}: {e.message}") from None
    return manifest


def load_trunk(source: str, input_size=None):
    """Build a trunk from a source string: "toy", "toy:SEED", or a path to
    an interchange model file."""
    if source == "toy" or source.startswith("toy:"):
        seed = int(source.split(":", 1)[1]) if ":" in source else 0
        return ToyTrunk(seed, input_size=input_size or (64, 64))
    if source.endswith(".onnx"):
        return OnnxTrunk(source)
    raise TrunkLoadError(f"unrecognized trunk source {source!r}")


def _to_nchw(images, spec: PreprocessSpec) -> np.ndarray:
    if isinstance(images, np.ndarray) and images.ndim == 4:
        images = list(images)
    planes = [preprocess(im, spec) for im in images]
    return np.ascontiguousarray(np.stack(planes).transpose(0, 3, 1, 2))


def trunk_forward(trunk, images) -> np.ndarray:
    """Pooled features, [B x output_dim] float32, in input order."""
    x = _to_nchw(images, trunk.preprocess_spec)
    fmap = trunk.forward(x)
    if fmap.ndim != 4:
        raise InferenceError(f"trunk output must be 4D NCHW, got shape {fmap.shape}")
    feats = global_max_pool(fmap).astype(np.float32)
    if feats.shape[1] != trunk.output_dim:
        raise InferenceError(
            f"trunk {trunk.id} produced {feats.shape[1]} features, "
            f"manifest declares {trunk.output_dim}")
    return require_finite(feats, f"features from trunk {trunk.id}")


def trunk_checksum(trunk) -> str:
    """Stable digest of every trunk parameter, for frozenness checks."""
    digest = hashlib.sha256()
    for name in sorted(trunk.params()):
        digest.update(name.encode("utf-8"))
        arr = trunk.params()[name]
        digest.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return digest.hexdigest()


def _channel_grid(fmap: np.ndarray) -> np.ndarray:
    """[C x h x w] activations -> one uint8 grid image, each channel
    min-max normalized (constant channels render black)."""
    c, h, w = fmap.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        chan = fmap[i]
        lo, hi = float(chan.min()), float(chan.max())
        if hi > lo:
            tile = np.clip(np.rint(255.0 * (chan - lo) / (hi - lo)), 0, 255)
        else:
            tile = np.zeros_like(chan)
        r, col = divmod(i, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = tile.astype(np.uint8)
    return grid


def dump_feature_maps(trunk, img: np.ndarray, stage_ids, out_dir) -> list:
    """Write one normalized grayscale channel-grid PNG per requested stage.
    Returns the written paths in stage order."""
    from PIL import Image

    valid = trunk.stages()
    for sid in stage_ids:
        if sid not in valid:
            raise InvalidParameterError(
                f"unknown stage {sid!r}; valid stages: {valid}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = _to_nchw([img], trunk.preprocess_spec)
    maps = trunk.stage_maps(x)
    paths = []
    for sid in stage_ids:
        grid = _channel_grid(maps[sid][0])
        dest = out_dir / f"{trunk.id}_stage_{sid}.png"
        Image.fromarray(grid).save(dest, format="PNG")
        paths.append(dest)
    return paths
