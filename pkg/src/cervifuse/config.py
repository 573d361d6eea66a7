"""TOML experiment configuration: parsing, validation with field paths,
and the canonical hash stamped into every derived artifact."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import SCHEME_BUILDERS
from .errors import ConfigError, InvalidParameterError
from .fusion import TrainSchedule

VALID_SCHEMES = tuple(sorted(SCHEME_BUILDERS)) + ("auto",)


@dataclass(frozen=True)
class BackboneRef:
    id: str
    source: str


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: Path
    dataset_root: Path
    scheme: str
    offline_copies: int
    online: bool
    backbones: tuple
    head_schedule: TrainSchedule
    head_dropout: float
    fusion_schedule: TrainSchedule
    fusion_dropout: float
    config_hash: str
    raw_text: str = field(compare=False, repr=False, default="")


_REQUIRED = object()


def _get(table: dict, key: str, kind, where: str, default=_REQUIRED):
    if key not in table:
        if default is not _REQUIRED:
            return default
        raise ConfigError(f"{where}.{key}: required key missing")
    value = table[key]
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where}.{key}: expected int, got bool")
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_schedule(table: dict, where: str, default_phases) -> TrainSchedule:
    phases = table.get("phases", default_phases)
    if not isinstance(phases, (list, tuple)) or not all(
            isinstance(p, (list, tuple)) and len(p) == 2 for p in phases):
        raise ConfigError(f"{where}.phases: expected a list of [lr, epochs] pairs")
    batch = _get(table, "batch_size", int, where, default=32)
    try:
        return TrainSchedule(
            phases=tuple((float(lr), int(ep)) for lr, ep in phases),
            batch_size=batch)
    except (InvalidParameterError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_dropout(table: dict, where: str) -> float:
    rate = _get(table, "dropout", float, where, default=0.5)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"{where}.dropout: must be in [0, 1), got {rate}")
    return rate


def config_hash(canonical: dict) -> str:
    return hashlib.sha256(
        json.dumps(canonical, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def load_config(path, seed_override: int | None = None,
                out_override=None) -> ExperimentConfig:
    """Parse and validate an experiment file.

    Relative paths resolve against the config file's directory. The config
    hash covers every experimental parameter after overrides; the output
    directory is deliberately excluded so a run directory can be relocated.
    """
    path = Path(path)
    try:
        raw_text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw_text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    base = path.parent

    exp = _get(doc, "experiment", dict, str(path))
    seed = seed_override if seed_override is not None else _get(
        exp, "seed", int, "experiment")
    out_raw = out_override if out_override is not None else _get(
        exp, "output_dir", str, "experiment")
    output_dir = (base / out_raw).resolve() if not Path(out_raw).is_absolute() \
        else Path(out_raw)

    dset = _get(doc, "dataset", dict, str(path))
    root_raw = _get(dset, "root", str, "dataset")
    dataset_root = (base / root_raw).resolve() if not Path(root_raw).is_absolute() \
        else Path(root_raw)
    if not dataset_root.is_dir():
        raise ConfigError(f"dataset.root: no such directory: {dataset_root}")
    scheme = _get(dset, "scheme", str, "dataset", default="auto")
    if scheme not in VALID_SCHEMES:
        raise ConfigError(
            f"dataset.scheme: unknown scheme {scheme!r}, expected one of "
            f"{list(VALID_SCHEMES)}")

    aug = doc.get("augment", {})
    if not isinstance(aug, dict):
        raise ConfigError("augment: expected a table")
    copies = _get(aug, "offline_copies", int, "augment", default=0)
    if copies < 0:
        raise ConfigError(f"augment.offline_copies: must be >= 0, got {copies}")
    online = _get(aug, "online", bool, "augment", default=False)

    raw_backbones = doc.get("backbone", [])
    if not isinstance(raw_backbones, list) or len(raw_backbones) < 2:
        raise ConfigError(
            f"backbone: need at least 2 [[backbone]] tables, got "
            f"{len(raw_backbones) if isinstance(raw_backbones, list) else 'non-list'}")
    backbones = []
    seen_ids = set()
    for i, table in enumerate(raw_backbones):
        where = f"backbone[{i}]"
        if not isinstance(table, dict):
            raise ConfigError(f"{where}: expected a table")
        bid = _get(table, "id", str, where)
        source = _get(table, "source", str, where)
        if bid in seen_ids:
            raise ConfigError(f"{where}.id: duplicate backbone id {bid!r}")
        seen_ids.add(bid)
        if not source.startswith("toy"):
            src_path = base / source if not Path(source).is_absolute() else Path(source)
            if not src_path.is_file():
                raise ConfigError(f"{where}.source: no such file: {src_path}")
            source = str(src_path)
        backbones.append(BackboneRef(bid, source))

    head_tab = doc.get("head", {})
    fusion_tab = doc.get("fusion", {})
    head_schedule = _parse_schedule(head_tab, "head", [[1e-3, 50], [1e-5, 50]])
    fusion_schedule = _parse_schedule(fusion_tab, "fusion", [[1e-3, 50]])
    head_dropout = _parse_dropout(head_tab, "head")
    fusion_dropout = _parse_dropout(fusion_tab, "fusion")

    canonical = {
        "seed": seed,
        "dataset": {"root": root_raw, "scheme": scheme},
        "augment": {"offline_copies": copies, "online": online},
        "backbones": [[b.id, b.source] for b in backbones],
        "head": {"phases": [list(p) for p in head_schedule.phases],
                 "batch_size": head_schedule.batch_size, "dropout": head_dropout},
        "fusion": {"phases": [list(p) for p in fusion_schedule.phases],
                   "batch_size": fusion_schedule.batch_size,
                   "dropout": fusion_dropout},
    }
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        dataset_root=dataset_root,
        scheme=scheme,
        offline_copies=copies,
        online=online,
        backbones=tuple(backbones),
        head_schedule=head_schedule,
        head_dropout=head_dropout,
        fusion_schedule=fusion_schedule,
        fusion_dropout=fusion_dropout,
        config_hash=config_hash(canonical),
        raw_text=raw_text,
    )
