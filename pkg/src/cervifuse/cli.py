"""Experiment runner: reproducible pipeline stages driven by a TOML config.

Every stage writes a manifest under <run>/stages recording the config hash
and the sha256 of its inputs; downstream stages refuse artifacts produced
under a different config hash. Re-running a stage with identical inputs
rewrites byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dataset as ds
from . import evaluate as ev
from . import fusion as fu
from .backbone import load_trunk, trunk_checksum, trunk_forward
from .config import ExperimentConfig, load_config
from .errors import ConfigError, StateError
from .synth import make_synthetic_dataset

log = logging.getLogger("cervifuse")

TRUNK_BATCH = 16


def _file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _tree_hash(root) -> str:
    """One digest over (relative path, file hash) pairs, sorted."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(bytes.fromhex(_file_hash(path)))
    return digest.hexdigest()


class _RunLock:
    """One command at a time per run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"run directory is locked by another command ({self.path}); "
                f"remove the file if that command is gone") from None
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _stage_path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.output_dir / "stages" / f"{name}.json"


def _write_stage(cfg: ExperimentConfig, name: str, inputs: dict,
                 outputs: list, extra: dict | None = None) -> None:
    rec = {
        "stage": name,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "inputs": inputs,
        "outputs": [str(Path(p).relative_to(cfg.output_dir)) for p in outputs],
    }
    rec.update(extra or {})
    path = _stage_path(cfg, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")


def _require_stage(cfg: ExperimentConfig, name: str, producer: str,
                   what: str) -> dict:
    path = _stage_path(cfg, name)
    if not path.is_file():
        raise StateError(f"{what} missing; run {producer}")
    rec = json.loads(path.read_text(encoding="utf-8"))
    if rec.get("config_hash") != cfg.config_hash:
        raise ConfigError(
            f"artifacts in {cfg.output_dir} were produced under config hash "
            f"{rec.get('config_hash', '?')[:12]}, current config hashes to "
            f"{cfg.config_hash[:12]}; re-run the pipeline from split")
    return rec


def _input_hashes(paths) -> dict:
    return {p.name: _file_hash(p) for p in paths}


def _scheme_for(cfg: ExperimentConfig):
    return ds.get_scheme(cfg.scheme, root_dir=cfg.dataset_root)


# ------------------------------------------------------------------ stages

def cmd_split(cfg: ExperimentConfig) -> int:
    scheme = _scheme_for(cfg)
    manifest = ds.ingest(cfg.dataset_root, scheme)
    split = ds.stratified_split(manifest, seed=cfg.seed)
    out = cfg.output_dir / "manifest.csv"
    ds.save_manifest(split, out)
    (cfg.output_dir / "config.toml").write_text(cfg.raw_text, encoding="utf-8")
    counts = {s: len(split.subset(s)) for s in ds.SPLITS}
    log.info("split %d samples into %s", len(split), counts)
    _write_stage(cfg, "split", {"dataset_tree": _tree_hash(cfg.dataset_root)},
                 [out], extra={"counts": counts})
    return 0


def cmd_augment(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "split", "split", "split manifest")
    scheme = _scheme_for(cfg)
    manifest = ds.load_manifest(cfg.output_dir / "manifest.csv", scheme)
    pipeline = aug.default_pipeline(cfg.offline_copies, cfg.seed)
    expanded = aug.generate_offline(manifest, pipeline, cfg.output_dir / "aug")
    out = cfg.output_dir / "manifest.aug.csv"
    ds.save_manifest(expanded, out)
    log.info("augment: %d rows -> %d rows (offline_copies=%d)",
             len(manifest), len(expanded), cfg.offline_copies)
    _write_stage(cfg, "augment",
                 _input_hashes([cfg.output_dir / "manifest.csv"]), [out])
    return 0


def _trunk_features(cfg: ExperimentConfig, trunk, rows, split: str) -> np.ndarray:
    images = []
    for i, row in enumerate(rows):
        img = aug.load_image(row.path)
        if split == "train" and cfg.online:
            img = aug.online_augment(img, aug.OnlineAugConfig(),
                                     epoch_seed=cfg.seed, sample_indices=[i])
        images.append(img)
    chunks = [trunk_forward(trunk, images[i:i + TRUNK_BATCH])
              for i in range(0, len(images), TRUNK_BATCH)]
    return np.concatenate(chunks, axis=0)


def _features_path(cfg: ExperimentConfig, backbone_id: str, split: str,
                   kind: str = "") -> Path:
    tag = f"_{kind}" if kind else ""
    return cfg.output_dir / "features" / f"{backbone_id}{tag}_{split}.fmx"


def cmd_extract(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "augment", "augment", "augmented manifest")
    scheme = _scheme_for(cfg)
    manifest = ds.load_manifest(cfg.output_dir / "manifest.aug.csv", scheme)
    (cfg.output_dir / "features").mkdir(parents=True, exist_ok=True)
    outputs, checksums = [], {}
    for ref in cfg.backbones:
        trunk = load_trunk(ref.source)
        checksums[ref.id] = trunk_checksum(trunk)
        for split in ds.SPLITS:
            sub = manifest.subset(split)
            feats = _trunk_features(cfg, trunk, sub.rows, split)
            width = feats.shape[1]
            fm = fu.FeatureMatrix(
                backbone_id=ref.id, split=split, rows=feats,
                labels=sub.labels(), sample_ids=[r.path for r in sub.rows],
                norm_mean=np.zeros(width), norm_std=np.ones(width))
            path = _features_path(cfg, ref.id, split)
            fu.save_features(fm, path)
            outputs.append(path)
            log.info("extract %s/%s: %s", ref.id, split, list(feats.shape))
    _write_stage(cfg, "extract",
                 _input_hashes([cfg.output_dir / "manifest.aug.csv"]),
                 outputs, extra={"trunk_checksums": checksums})
    return 0


def _head_ckpt(cfg: ExperimentConfig, backbone_id: str) -> Path:
    return cfg.output_dir / "models" / f"head_{backbone_id}.ckpt"


def _load_head(cfg: ExperimentConfig, scheme, ref) -> fu.HeadModel:
    fm = fu.load_features(_features_path(cfg, ref.id, "train"))
    head = fu.HeadModel(ref.id, fm.rows.shape[1], scheme.n_classes,
                        dropout_rate=cfg.head_dropout, seed=cfg.seed)
    ckpt = _head_ckpt(cfg, ref.id)
    if not ckpt.is_file():
        raise StateError(f"head checkpoint {ckpt.name} missing; run train-head")
    head.load_weights(ckpt)
    return head


def cmd_train_head(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "extract", "extract", "trunk features")
    scheme = _scheme_for(cfg)
    (cfg.output_dir / "models").mkdir(parents=True, exist_ok=True)
    inputs, outputs = {}, []
    for i, ref in enumerate(cfg.backbones):
        train_path = _features_path(cfg, ref.id, "train")
        fm = fu.load_features(train_path)
        inputs[train_path.name] = _file_hash(train_path)
        head = fu.HeadModel(ref.id, fm.rows.shape[1], scheme.n_classes,
                            dropout_rate=cfg.head_dropout, seed=cfg.seed)
        _, history = fu.train_head(head, fm.rows, fm.labels,
                                   cfg.head_schedule, seed=cfg.seed + i)
        ckpt = _head_ckpt(cfg, ref.id)
        head.save(ckpt)
        hist_path = ckpt.with_suffix(".history.json")
        hist_path.write_text(json.dumps(history, sort_keys=True, indent=1) + "\n",
                             encoding="utf-8")
        outputs += [ckpt, hist_path]
        log.info("train-head %s: final loss %.4f acc %.4f", ref.id,
                 history[-1]["loss"], history[-1]["accuracy"])
    _write_stage(cfg, "train-head", inputs, outputs)
    return 0


def cmd_train_fusion(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "extract", "extract", "features")
    _require_stage(cfg, "train-head", "train-head", "trained heads")
    scheme = _scheme_for(cfg)
    inputs, outputs = {}, []
    per_split = {split: [] for split in ds.SPLITS}
    for ref in cfg.backbones:
        head = _load_head(cfg, scheme, ref)
        inputs[_head_ckpt(cfg, ref.id).name] = _file_hash(_head_ckpt(cfg, ref.id))
        norm = None
        for split in ("train", "val", "test"):
            fm = fu.load_features(_features_path(cfg, ref.id, split))
            mat = fu.extract_features(head, fm.rows, fm.labels, split,
                                      fm.sample_ids, normalization=norm)
            if split == "train":
                norm = mat.normalization
            path = _features_path(cfg, ref.id, split, kind="head")
            fu.save_features(mat, path)
            outputs.append(path)
            per_split[split].append(mat)
    fusion = fu.FusionModel(len(cfg.backbones) * fu.FEATURE_WIDTH,
                            scheme.n_classes, dropout_rate=cfg.fusion_dropout,
                            seed=cfg.seed)
    concat = fu.concat_features(per_split["train"])
    _, history = fu.train_fusion(fusion, concat, per_split["train"][0].labels,
                                 cfg.fusion_schedule, seed=cfg.seed)
    ckpt = cfg.output_dir / "models" / "fusion.ckpt"
    fusion.save(ckpt)
    hist_path = ckpt.with_suffix(".history.json")
    hist_path.write_text(json.dumps(history, sort_keys=True, indent=1) + "\n",
                         encoding="utf-8")
    outputs += [ckpt, hist_path]
    log.info("train-fusion: final loss %.4f acc %.4f",
             history[-1]["loss"], history[-1]["accuracy"])
    _write_stage(cfg, "train-fusion", inputs, outputs)
    return 0


def cmd_predict_lf(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "extract", "extract", "features")
    _require_stage(cfg, "train-head", "train-head", "trained heads")
    scheme = _scheme_for(cfg)
    all_probs, all_votes, true_labels = [], [], None
    inputs = {}
    for ref in cfg.backbones:
        head = _load_head(cfg, scheme, ref)
        test_path = _features_path(cfg, ref.id, "test")
        inputs[test_path.name] = _file_hash(test_path)
        fm = fu.load_features(test_path)
        probs, votes = fu.predict(head, fm.rows)
        all_probs.append(probs)
        all_votes.append(votes)
        true_labels = fm.labels
    pred_set = fu.PredictionSet(np.stack(all_probs), np.stack(all_votes),
                                true_labels)
    fused = pred_set.vote()
    out = cfg.output_dir / "predictions" / "lf_test.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({
        "model_ids": [ref.id for ref in cfg.backbones],
        "probs": pred_set.probs.tolist(),
        "votes": pred_set.votes.tolist(),
        "true_labels": pred_set.true_labels.tolist(),
        "lf_labels": fused.tolist(),
    }, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log.info("predict-lf: %d test samples, %d voters",
             len(true_labels), len(cfg.backbones))
    _write_stage(cfg, "predict-lf", inputs, [out])
    return 0


def _confusion_json(path, cm: ev.ConfusionMatrix) -> None:
    Path(path).write_text(json.dumps({
        "class_names": list(cm.class_names),
        "counts": cm.counts.tolist(),
    }, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_eval(cfg: ExperimentConfig) -> int:
    extract_rec = _require_stage(cfg, "extract", "extract", "features")
    _require_stage(cfg, "predict-lf", "predict-lf", "late-fusion predictions")
    _require_stage(cfg, "train-fusion", "train-fusion", "fusion model")
    scheme = _scheme_for(cfg)

    # the trunks must not have drifted since extraction
    for ref in cfg.backbones:
        now = trunk_checksum(load_trunk(ref.source))
        recorded = extract_rec["trunk_checksums"][ref.id]
        if now != recorded:
            raise StateError(
                f"trunk {ref.id} checksum changed since extract "
                f"({recorded[:12]} -> {now[:12]}); re-run extract")

    preds = json.loads(
        (cfg.output_dir / "predictions" / "lf_test.json").read_text())
    true = np.asarray(preds["true_labels"])
    reports_dir = cfg.output_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    def emit(name: str, predicted) -> None:
        cm = ev.confusion(true, predicted, scheme.classes)
        rep = ev.metrics(cm)
        mpath = reports_dir / f"metrics_{name}.json"
        rep.save_json(mpath)
        cpath = reports_dir / f"confusion_{name}.json"
        _confusion_json(cpath, cm)
        hpath = reports_dir / f"confusion_{name}.png"
        ev.confusion_heatmap(cm, hpath, title=name)
        outputs.extend([mpath, cpath, hpath])
        log.info("eval %s: accuracy %.2f%%", name, ev.percent(rep.accuracy))

    for m, model_id in enumerate(preds["model_ids"]):
        emit(model_id, np.asarray(preds["votes"])[m])
    emit("lf", fu.majority_vote(np.asarray(preds["votes"]),
                                np.asarray(preds["probs"])))

    head_mats = [fu.load_features(_features_path(cfg, ref.id, "test", kind="head"))
                 for ref in cfg.backbones]
    concat = fu.concat_features(head_mats)
    fusion = fu.FusionModel(concat.shape[1], scheme.n_classes,
                            dropout_rate=cfg.fusion_dropout, seed=cfg.seed)
    fusion.load_weights(cfg.output_dir / "models" / "fusion.ckpt")
    _, hdff_pred = fu.predict(fusion, concat)
    if not np.array_equal(head_mats[0].labels, true):
        raise StateError("test-label mismatch between predictions and features")
    emit("hdff", hdff_pred)

    inputs = _input_hashes([
        cfg.output_dir / "predictions" / "lf_test.json",
        cfg.output_dir / "models" / "fusion.ckpt",
    ])
    _write_stage(cfg, "eval", inputs, outputs)
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    _require_stage(cfg, "eval", "eval", "evaluation reports")
    reports_dir = cfg.output_dir / "reports"
    names = [ref.id for ref in cfg.backbones] + ["lf", "hdff"]
    runs, inputs = [], {}
    for name in names:
        cpath = reports_dir / f"confusion_{name}.json"
        data = json.loads(cpath.read_text(encoding="utf-8"))
        inputs[cpath.name] = _file_hash(cpath)
        cm = ev.ConfusionMatrix(np.asarray(data["counts"]), data["class_names"])
        runs.append((name, ev.metrics(cm)))
    csv_path, png_path = ev.compare_report(runs, reports_dir)
    log.info("report: wrote %s and %s", csv_path.name, png_path.name)
    _write_stage(cfg, "report", inputs, [csv_path, png_path])
    return 0


# --------------------------------------------------------------- interface

class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; our contract reserves 2 for
    runtime failures, so remap usage problems to the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_args(sub):
    sub.add_argument("--config", required=True, help="experiment TOML file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override experiment.seed")
    sub.add_argument("--out", default=None,
                     help="override experiment.output_dir")


_STAGES = {
    "split": cmd_split,
    "augment": cmd_augment,
    "extract": cmd_extract,
    "train-head": cmd_train_head,
    "train-fusion": cmd_train_fusion,
    "predict-lf": cmd_predict_lf,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _run_stage(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed,
                      out_override=args.out)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with _RunLock(cfg.output_dir):
        return _STAGES[args.command](cfg)


def _run_synth(args) -> int:
    paths = make_synthetic_dataset(args.out, n_per_class=args.per_class,
                                   n_classes=args.classes, seed=args.seed)
    log.info("synth: wrote %d images under %s", len(paths), args.out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cervifuse",
                     description="fused-backbone image classification pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic labeled dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--per-class", type=int, default=30)
    synth.add_argument("--classes", type=int, default=5)
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=_run_synth)

    for name in _STAGES:
        sub = subs.add_parser(name, help=f"run the {name} stage")
        _add_config_args(sub)
        sub.set_defaults(func=_run_stage)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        log.error("%s", exc)
        return 1
    except (RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
