"""Config parsing: defaults, field-path error messages, and hash behavior."""

import pytest

from cervifuse.config import load_config
from cervifuse.errors import ConfigError


def _write(tmp_path, body, name="exp.toml"):
    (tmp_path / "data").mkdir(exist_ok=True)
    (tmp_path / "data" / "classa").mkdir(exist_ok=True)
    path = tmp_path / name
    path.write_text(body)
    return path


BASE = """
[experiment]
seed = 7
output_dir = "run"

[dataset]
root = "data"
scheme = "auto"

[[backbone]]
id = "toy-a"
source = "toy:0"

[[backbone]]
id = "toy-b"
source = "toy:1"
"""


def test_minimal_config_and_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, BASE))
    assert cfg.seed == 7
    assert cfg.output_dir == (tmp_path / "run").resolve()
    assert cfg.dataset_root == (tmp_path / "data").resolve()
    assert cfg.offline_copies == 0 and cfg.online is False
    assert [b.id for b in cfg.backbones] == ["toy-a", "toy-b"]
    assert cfg.head_schedule.phases == ((1e-3, 50), (1e-5, 50))
    assert cfg.fusion_schedule.phases == ((1e-3, 50),)
    assert cfg.head_dropout == 0.5
    assert len(cfg.config_hash) == 64


def test_overrides_apply_and_change_hash(tmp_path):
    path = _write(tmp_path, BASE)
    base = load_config(path)
    seeded = load_config(path, seed_override=99)
    assert seeded.seed == 99
    assert seeded.config_hash != base.config_hash
    moved = load_config(path, out_override=str(tmp_path / "elsewhere"))
    assert moved.output_dir == tmp_path / "elsewhere"
    # output location is not an experimental parameter
    assert moved.config_hash == base.config_hash


def test_hash_stable_across_reparse(tmp_path):
    path = _write(tmp_path, BASE)
    assert load_config(path).config_hash == load_config(path).config_hash


def test_explicit_sections_parse(tmp_path):
    body = BASE + """
[augment]
offline_copies = 6
online = true

[head]
phases = [[1e-2, 3], [1e-4, 2]]
batch_size = 16
dropout = 0.25

[fusion]
phases = [[1e-2, 4]]
dropout = 0.0
"""
    cfg = load_config(_write(tmp_path, body))
    assert cfg.offline_copies == 6 and cfg.online is True
    assert cfg.head_schedule.phases == ((1e-2, 3), (1e-4, 2))
    assert cfg.head_schedule.batch_size == 16
    assert cfg.head_dropout == 0.25
    assert cfg.fusion_schedule.phases == ((1e-2, 4),)
    assert cfg.fusion_dropout == 0.0


@pytest.mark.parametrize("mutation, field", [
    ("[experiment]\noutput_dir = \"run\"", "experiment.seed"),
    ("[experiment]\nseed = 1", "experiment.output_dir"),
])
def test_missing_required_keys_name_field(tmp_path, mutation, field):
    body = BASE.replace("[experiment]\nseed = 7\noutput_dir = \"run\"", mutation)
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(_write(tmp_path, body))


def test_bad_values_name_their_field(tmp_path):
    with pytest.raises(ConfigError, match="dataset.root"):
        load_config(_write(tmp_path, BASE.replace('root = "data"', 'root = "nope"')))
    with pytest.raises(ConfigError, match="dataset.scheme"):
        load_config(_write(tmp_path, BASE.replace('scheme = "auto"', 'scheme = "x"')))
    with pytest.raises(ConfigError, match=r"augment\.offline_copies"):
        load_config(_write(tmp_path, BASE + "[augment]\noffline_copies = -1\n"))
    with pytest.raises(ConfigError, match=r"head\.dropout"):
        load_config(_write(tmp_path, BASE + "[head]\ndropout = 1.5\n"))
    with pytest.raises(ConfigError, match=r"head\.phases"):
        load_config(_write(tmp_path, BASE + "[head]\nphases = [[1e-3]]\n"))
    with pytest.raises(ConfigError, match=r"experiment\.seed.*int"):
        load_config(_write(tmp_path, BASE.replace("seed = 7", "seed = true")))


def test_backbone_validation(tmp_path):
    one = BASE[:BASE.index("[[backbone]]\nid = \"toy-b\"")]
    with pytest.raises(ConfigError, match="at least 2"):
        load_config(_write(tmp_path, one))
    dup = BASE.replace('id = "toy-b"', 'id = "toy-a"')
    with pytest.raises(ConfigError, match=r"backbone\[1\]\.id"):
        load_config(_write(tmp_path, dup))
    missing = BASE.replace('source = "toy:1"', 'source = "trunk.onnx"')
    with pytest.raises(ConfigError, match=r"backbone\[1\]\.source"):
        load_config(_write(tmp_path, missing))


def test_invalid_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="TOML"):
        load_config(_write(tmp_path, "experiment = ["))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "ghost.toml")
