"""Export products: file pair on disk, manifest contents, byte determinism,
and the activation cross-check. The cross-check is the load-bearing test:
every exported graph, decoded and executed independently, must reproduce the
source model within 1e-3 on random inputs."""

import json

import jsonschema
import numpy as np
import pytest

from trunk_export.errors import ExportError
from trunk_export.export import MANIFEST_SCHEMA, SUPPORTED_MODELS, export
from trunk_export.verify import TOLERANCE, gray_image_feed, verify

EXPECTED = {
    "vgg16": {"output_dim": 512, "channel_order": "bgr"},
    "vgg19": {"output_dim": 512, "channel_order": "bgr"},
    "resnet50": {"output_dim": 2048, "channel_order": "bgr"},
    "xception": {"output_dim": 2048, "channel_order": "rgb"},
}


def _manifest(exported_dir, name) -> dict:
    return json.loads(
        (exported_dir / f"{name}.manifest.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("name", SUPPORTED_MODELS)
def test_file_pair_on_disk(exported_dir, name):
    model_path = exported_dir / f"{name}.onnx"
    assert model_path.is_file()
    assert model_path.with_suffix(".manifest.json").is_file()
    assert model_path.stat().st_size > 1_000_000  # real weights, not a stub


@pytest.mark.parametrize("name", SUPPORTED_MODELS)
def test_manifest_schema_and_contents(exported_dir, name):
    manifest = _manifest(exported_dir, name)
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    assert manifest["model"] == name
    assert manifest["seed"] == 0
    assert manifest["input_size"] == [224, 224]
    assert manifest["output_dim"] == EXPECTED[name]["output_dim"]
    assert manifest["channel_order"] == EXPECTED[name]["channel_order"]
    assert len(manifest["mean"]) == 3 and len(manifest["std"]) == 3
    assert all(s > 0 for s in manifest["std"])
    if name == "xception":
        assert manifest["scale"] == pytest.approx(1 / 127.5)
    else:
        assert manifest["scale"] == 1.0


@pytest.mark.parametrize("name", SUPPORTED_MODELS)
def test_exported_activations_match_source(exported_dir, name):
    report = verify(exported_dir / f"{name}.onnx",
                    n_inputs=10, size=(64, 64), seed=11)
    assert report.passed
    assert report.n_inputs == 10
    assert report.max_abs_diff < TOLERANCE
    print(f"VERIFY {name}: max abs diff {report.max_abs_diff:.3e} "
          f"< {TOLERANCE:.0e} over {report.n_inputs} inputs")


@pytest.mark.parametrize("name", SUPPORTED_MODELS)
def test_gray_image_activations_match(exported_dir, name):
    manifest = _manifest(exported_dir, name)
    feed = gray_image_feed(manifest, size=(64, 64), batch=2)
    report = verify(exported_dir / f"{name}.onnx", inputs=feed)
    assert report.passed
    assert report.n_inputs == 2


def test_export_is_byte_deterministic(tmp_path):
    mp_a, man_a = export("vgg16", tmp_path / "a", seed=0)
    mp_b, man_b = export("vgg16", tmp_path / "b", seed=0)
    assert mp_a.read_bytes() == mp_b.read_bytes()
    assert man_a.read_bytes() == man_b.read_bytes()


def test_seed_changes_weights_only(tmp_path, exported_dir):
    mp, man = export("vgg16", tmp_path, seed=3)
    assert mp.read_bytes() != (exported_dir / "vgg16.onnx").read_bytes()
    a = json.loads(man.read_text(encoding="utf-8"))
    b = _manifest(exported_dir, "vgg16")
    assert a.pop("seed") == 3 and b.pop("seed") == 0
    assert a == b
    report = verify(mp, n_inputs=4, size=(48, 48))
    assert report.passed


def test_custom_input_size_recorded(tmp_path):
    _mp, man = export("vgg16", tmp_path, seed=0, input_size=(64, 96))
    manifest = json.loads(man.read_text(encoding="utf-8"))
    assert manifest["input_size"] == [64, 96]


def test_unknown_model_lists_supported():
    with pytest.raises(ExportError) as err:
        export("alexnet", "/tmp/unused")
    for name in SUPPORTED_MODELS:
        assert name in str(err.value)


@pytest.mark.parametrize("size", [(16, 16), (224,), (224, 224, 3)])
def test_bad_input_size_rejected(size, tmp_path):
    with pytest.raises(ExportError, match="input size"):
        export("vgg16", tmp_path, input_size=size)


def test_random_inputs_exercise_nonlinearity(exported_dir):
    # the verification inputs must not all land in a dead linear region:
    # two different batches should produce visibly different activations
    from trunk_export import runner

    dec = runner.load(exported_dir / "vgg16.onnx")
    rng = np.random.default_rng(0)
    a = runner.run(dec, rng.uniform(-2, 2, (1, 3, 48, 48)).astype(np.float32))
    b = runner.run(dec, rng.uniform(-2, 2, (1, 3, 48, 48)).astype(np.float32))
    assert not np.allclose(a, b)
    assert np.isfinite(a).all() and np.isfinite(b).all()
