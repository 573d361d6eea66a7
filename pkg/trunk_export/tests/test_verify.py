"""Failure modes of the activation cross-check: tampered weights, stale or
broken manifests, and tolerance behavior all have to be caught, not
silently passed."""

import json
import shutil

import numpy as np
import pytest

from trunk_export import runner
from trunk_export.errors import DecodeError, VerificationError
from trunk_export.verify import VerifyReport, verify


@pytest.fixture()
def vgg16_copy(exported_dir, tmp_path):
    """Private copy of the exported vgg16 pair, safe to mutilate."""
    for suffix in (".onnx", ".manifest.json"):
        shutil.copy(exported_dir / f"vgg16{suffix}", tmp_path)
    return tmp_path / "vgg16.onnx"


def _edit_manifest(model_path, **changes):
    man = model_path.with_suffix(".manifest.json")
    doc = json.loads(man.read_text(encoding="utf-8"))
    doc.update(changes)
    man.write_text(json.dumps(doc), encoding="utf-8")


def test_report_passed_is_strict():
    common = dict(model="m", n_inputs=3, tolerance=1e-3)
    assert VerifyReport(max_abs_diff=9e-4, **common).passed
    assert not VerifyReport(max_abs_diff=1e-3, **common).passed
    assert not VerifyReport(max_abs_diff=2e-3, **common).passed


def test_wrong_seed_in_manifest_fails(vgg16_copy):
    # source rebuilt from the manifest no longer matches the file
    _edit_manifest(vgg16_copy, seed=1)
    with pytest.raises(VerificationError) as err:
        verify(vgg16_copy, n_inputs=2)
    report = err.value.report
    assert report is not None
    assert report.max_abs_diff >= report.tolerance


def test_tampered_weights_fail(vgg16_copy):
    # nudge one weight tensor in place, keeping the protobuf framing intact
    data = bytearray(vgg16_copy.read_bytes())
    weights = runner.decode(bytes(data))["weights"]
    name = sorted(weights)[0]
    arr = np.ascontiguousarray(weights[name])
    bumped = arr.copy()
    bumped.flat[0] += 1.0
    start = bytes(data).index(arr.tobytes())
    data[start:start + arr.nbytes] = bumped.tobytes()
    vgg16_copy.write_bytes(bytes(data))

    with pytest.raises(VerificationError) as err:
        verify(vgg16_copy, n_inputs=2)
    assert err.value.report.max_abs_diff >= err.value.report.tolerance


def test_manifest_graph_name_mismatch(vgg16_copy):
    _edit_manifest(vgg16_copy, output_name="not_a_real_value")
    with pytest.raises(DecodeError, match="disagree"):
        verify(vgg16_copy, n_inputs=1)


def test_wrong_output_dim_in_manifest(vgg16_copy):
    _edit_manifest(vgg16_copy, output_dim=100)
    with pytest.raises(VerificationError, match="declares"):
        verify(vgg16_copy, n_inputs=1)


def test_missing_manifest(vgg16_copy):
    vgg16_copy.with_suffix(".manifest.json").unlink()
    with pytest.raises(DecodeError, match="manifest"):
        verify(vgg16_copy)


def test_schema_violation_rejected(vgg16_copy):
    _edit_manifest(vgg16_copy, std=[0.0, 1.0, 1.0])
    with pytest.raises(DecodeError, match="invalid manifest"):
        verify(vgg16_copy)


def test_unreachable_tolerance_raises_with_report(vgg16_copy):
    with pytest.raises(VerificationError) as err:
        verify(vgg16_copy, n_inputs=2, tolerance=1e-12)
    report = err.value.report
    assert report is not None
    assert not report.passed
    assert report.tolerance == 1e-12
