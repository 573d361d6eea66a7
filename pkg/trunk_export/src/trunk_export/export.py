"""Export entry point: build a named trunk and write the interchange pair.

Output is `<model>.onnx` plus `<model>.manifest.json` beside it. The
manifest carries everything the consumer needs to preprocess inputs
(canonical 224x224 size, channel order, scale/mean/std) and to check the
trunk's declared feature width; the graph itself stays purely
convolutional. The model name and weight seed are recorded too so a
verification run can rebuild the exact source model from the files alone.
"""

import json
from pathlib import Path

import jsonschema
import numpy as np

from . import models
from .errors import ExportError
from .graphdef import to_onnx_bytes

# Sidecar contract published by the consuming toolkit. Kept verbatim; the
# integration tests prove the real consumer accepts what we emit.
MANIFEST_SCHEMA = {
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

SUPPORTED_MODELS = tuple(sorted(models.CATALOG))


def build_manifest(model_name: str, graph, seed: int,
                   input_size=(224, 224)) -> dict:
    _builder, output_dim, pp = models.CATALOG[model_name]
    manifest = {
        "model": model_name,
        "seed": int(seed),
        "input_name": graph.input_name,
        "output_name": graph.output_name,
        "input_size": [int(input_size[0]), int(input_size[1])],
        "channel_order": pp["channel_order"],
        "scale": pp["scale"],
        "mean": pp["mean"],
        "std": pp["std"],
        "output_dim": output_dim,
    }
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    return manifest


def export(model_name: str, out_dir, seed: int = 0,
           input_size=(224, 224)) -> tuple:
    """Write `<model>.onnx` + `<model>.manifest.json` under out_dir.

    Returns (model_path, manifest_path). The same (model, seed) request
    produces byte-identical files.
    """
    if model_name not in models.CATALOG:
        raise ExportError(
            f"unknown model {model_name!r}; supported: "
            f"{', '.join(SUPPORTED_MODELS)}")
    if len(input_size) != 2 or min(int(s) for s in input_size) < 32:
        raise ExportError(f"input size {input_size} must be two values >= 32")
    graph = models.build(model_name, seed)
    _check_output_width(graph, models.CATALOG[model_name][1])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / f"{model_name}.onnx"
    manifest_path = out_dir / f"{model_name}.manifest.json"
    model_path.write_bytes(to_onnx_bytes(graph))
    manifest = build_manifest(model_name, graph, seed, input_size)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                             encoding="utf-8")
    return model_path, manifest_path


def _check_output_width(graph, expected: int) -> None:
    """The declared feature width must match the channel count actually
    produced at the truncation point."""
    producers = {n.output: n for n in graph.nodes}
    name = graph.output_name
    while name in producers:
        node = producers[name]
        if node.op == "Conv":
            width = graph.weights[node.inputs[1]].shape[0]
            if width != expected:
                raise ExportError(
                    f"{graph.name}: truncation point yields {width} channels, "
                    f"catalog declares {expected}")
            return
        name = node.inputs[0]
    raise ExportError(f"{graph.name}: no convolution feeds the output")
