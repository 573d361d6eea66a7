"""Cross-check an exported file against its source model.

The exported bytes are decoded and executed by runner.py while the source
model is rebuilt from the (model, seed) recorded in the manifest and run
with the reference operators. Both see the same inputs; the report carries
the largest absolute activation difference at the truncation point.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import models, runner
from .errors import DecodeError, VerificationError
from .export import MANIFEST_SCHEMA

TOLERANCE = 1e-3


@dataclass(frozen=True)
class VerifyReport:
    model: str
    n_inputs: int
    max_abs_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tolerance


def _load_manifest(model_path: Path) -> dict:
    manifest_path = model_path.with_suffix(".manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DecodeError(f"cannot read manifest {manifest_path}: {e}") from None
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DecodeError(f"invalid manifest {manifest_path}: {e.message}") from None
    return manifest


def gray_image_feed(manifest: dict, size=(64, 64), level: int = 128,
                    batch: int = 1) -> np.ndarray:
    """NCHW tensor for a constant gray image, preprocessed per the manifest
    constants (resize is a no-op on a constant image)."""
    h, w = size
    g = np.float32(level) * np.float32(manifest["scale"])
    # mean/std are stored in the model's channel order, so a constant image
    # needs no reordering of its own
    chans = (g - np.asarray(manifest["mean"], dtype=np.float32)) \
        / np.asarray(manifest["std"], dtype=np.float32)
    x = np.ones((batch, 3, h, w), dtype=np.float32) * chans.reshape(1, 3, 1, 1)
    return np.ascontiguousarray(x)


def verify(model_path, inputs: np.ndarray | None = None, n_inputs: int = 10,
           size=(64, 64), seed: int = 0,
           tolerance: float = TOLERANCE) -> VerifyReport:
    """Compare exported-graph activations with the source model.

    `inputs` may be a prebuilt [B x 3 x H x W] float32 batch; otherwise
    n_inputs random tensors are drawn. Raises VerificationError when the
    max abs difference reaches the tolerance; the exception carries the
    report.
    """
    model_path = Path(model_path)
    manifest = _load_manifest(model_path)
    decoded = runner.load(model_path)
    if decoded["input_name"] != manifest["input_name"] or \
            decoded["output_name"] != manifest["output_name"]:
        raise DecodeError(
            f"{model_path}: graph input/output names disagree with the manifest")
    if inputs is None:
        rng = np.random.default_rng(seed)
        h, w = size
        inputs = rng.uniform(-2.0, 2.0, (n_inputs, 3, h, w)).astype(np.float32)
    inputs = np.asarray(inputs, dtype=np.float32)

    source = models.build(manifest["model"], int(manifest["seed"]))
    want = models.reference_forward(source, inputs)
    got = runner.run(decoded, inputs)
    if got.shape != want.shape:
        raise VerificationError(
            f"{manifest['model']}: exported graph output shape {got.shape} "
            f"!= source {want.shape}")
    if got.shape[1] != manifest["output_dim"]:
        raise VerificationError(
            f"{manifest['model']}: produced {got.shape[1]} channels, "
            f"manifest declares {manifest['output_dim']}")
    diff = float(np.max(np.abs(got - want)))
    report = VerifyReport(model=manifest["model"], n_inputs=int(inputs.shape[0]),
                          max_abs_diff=diff, tolerance=tolerance)
    if not report.passed:
        raise VerificationError(
            f"{manifest['model']}: max abs activation difference {diff:.3e} "
            f"exceeds {tolerance:.0e}", report=report)
    return report
