"""Manifest-based dataset management.

A dataset is a directory with one subdirectory per raw class label. Ingestion
produces a manifest of rows; a class scheme maps raw labels onto the active
label set (possibly merging or excluding classes); stratified_split assigns
train/val/test per class. Manifests serialize to a small CSV so every later
stage can be driven from a file instead of a directory walk.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    InvalidParameterError,
    ManifestError,
    StratificationError,
    UnmappedLabelError,
)

EXCLUDE = "EXCLUDE"
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

MANIFEST_HEADER = ["path", "raw_label", "mapped_label", "split", "origin", "source_index"]


def normalize_label(raw: str) -> str:
    """Fold a folder name to a canonical label key (im_Koilocytotic ->
    koilocytotic)."""
    s = raw.strip().lower().replace("-", "_").replace(" ", "_")
    if s.startswith("im_"):
        s = s[3:]
    return s


@dataclass(frozen=True)
class ImageSample:
    path: str
    raw_label: str
    mapped_label: int
    split: str = ""  # one of SPLITS once assigned
    origin: str = "original"
    source_index: int = -1


@dataclass(frozen=True)
class ClassScheme:
    """Ordered class names plus a raw-label -> class-name mapping.

    Raw labels mapping to EXCLUDE are dropped at ingestion time. Every class
    must be reachable from at least one raw label.
    """
    name: str
    classes: tuple
    mapping: dict = field(hash=False)

    def __post_init__(self):
        targets = set(self.mapping.values()) - {EXCLUDE}
        missing = [c for c in self.classes if c not in targets]
        if missing:
            raise InvalidParameterError(
                f"scheme {self.name}: classes with no mapped raw label: {missing}")
        unknown = targets - set(self.classes)
        if unknown:
            raise InvalidParameterError(
                f"scheme {self.name}: mapping targets outside class list: {sorted(unknown)}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_id(self, raw_label: str):
        """Integer id for a raw label, or None when the label is excluded."""
        key = normalize_label(raw_label)
        if key not in self.mapping:
            raise UnmappedLabelError(
                f"scheme {self.name} has no mapping for label {raw_label!r}")
        target = self.mapping[key]
        if target == EXCLUDE:
            return None
        return self.classes.index(target)


_SIPAKMED_RAW = ("superficial_intermediate", "parabasal", "koilocytotic",
                 "dyskeratotic", "metaplastic")
_HERLEV_RAW = ("normal_superficiel", "normal_intermediate", "normal_columnar",
               "light_dysplastic", "moderate_dysplastic", "severe_dysplastic",
               "carcinoma_in_situ")


def _sipakmed_5() -> ClassScheme:
    return ClassScheme("sipakmed-5", _SIPAKMED_RAW, {r: r for r in _SIPAKMED_RAW})


def _sipakmed_3() -> ClassScheme:
    return ClassScheme("sipakmed-3", ("normal", "abnormal", "benign"), {
        "superficial_intermediate": "normal",
        "parabasal": "normal",
        "koilocytotic": "abnormal",
        "dyskeratotic": "abnormal",
        "metaplastic": "benign",
    })


def _sipakmed_2() -> ClassScheme:
    # the benign (metaplastic) class is dropped entirely for the binary task
    return ClassScheme("sipakmed-2", ("normal", "abnormal"), {
        "superficial_intermediate": "normal",
        "parabasal": "normal",
        "koilocytotic": "abnormal",
        "dyskeratotic": "abnormal",
        "metaplastic": EXCLUDE,
    })


def _herlev_7() -> ClassScheme:
    return ClassScheme("herlev-7", _HERLEV_RAW, {r: r for r in _HERLEV_RAW})


def _herlev_2() -> ClassScheme:
    mapping = {r: ("benign" if r.startswith("normal") else "malignant")
               for r in _HERLEV_RAW}
    return ClassScheme("herlev-2", ("benign", "malignant"), mapping)


SCHEME_BUILDERS = {
    "sipakmed-5": _sipakmed_5,
    "sipakmed-3": _sipakmed_3,
    "sipakmed-2": _sipakmed_2,
    "herlev-7": _herlev_7,
    "herlev-2": _herlev_2,
}


def get_scheme(name: str, root_dir=None) -> ClassScheme:
    """Look up a named scheme; "auto" builds an identity scheme from the
    subdirectories of root_dir."""
    if name == "auto":
        if root_dir is None:
            raise InvalidParameterError("auto scheme needs a dataset directory")
        labels = sorted(normalize_label(p.name) for p in Path(root_dir).iterdir()
                        if p.is_dir())
        if not labels:
            raise InvalidParameterError(f"no class subdirectories under {root_dir}")
        return ClassScheme("auto", tuple(labels), {l: l for l in labels})
    try:
        return SCHEME_BUILDERS[name]()
    except KeyError:
        raise InvalidParameterError(
            f"unknown scheme {name!r}, expected one of "
            f"{sorted(SCHEME_BUILDERS) + ['auto']}") from None


@dataclass
class Manifest:
    rows: list
    scheme: ClassScheme | None = None
    seed: int | None = None

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.path in seen:
                raise ManifestError(f"duplicate path in manifest: {row.path}")
            seen.add(row.path)

    def __len__(self):
        return len(self.rows)

    def subset(self, split: str) -> "Manifest":
        if split not in SPLITS:
            raise InvalidParameterError(f"unknown split {split!r}")
        return Manifest([r for r in self.rows if r.split == split],
                        scheme=self.scheme, seed=self.seed)

    def class_counts(self, split: str | None = None) -> dict:
        counts: dict = {}
        for r in self.rows:
            if split is None or r.split == split:
                counts[r.mapped_label] = counts.get(r.mapped_label, 0) + 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([r.mapped_label for r in self.rows], dtype=np.int64)


def ingest(root_dir, scheme: ClassScheme) -> Manifest:
    """Walk one-subdirectory-per-label layout into a manifest.

    Rows are ordered by (normalized label, file name) so ingestion is
    independent of filesystem enumeration order. Excluded labels are dropped;
    a subdirectory the scheme does not know is an error naming the offender.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} is not a directory")
    subdirs = sorted((p for p in root.iterdir() if p.is_dir()),
                     key=lambda p: normalize_label(p.name))
    rows = []
    index = 0
    for sub in subdirs:
        class_id = scheme.class_id(sub.name)  # raises UnmappedLabelError
        if class_id is None:
            continue
        files = sorted(p for p in sub.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        for f in files:
            rows.append(ImageSample(path=str(f), raw_label=normalize_label(sub.name),
                                    mapped_label=class_id, source_index=index))
            index += 1
    if not rows:
        warnings.warn(f"no images found under {root}")
    return Manifest(rows, scheme=scheme)


def split_counts(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Per-class (train, val, test) counts.

    Test rounds up first; val rounds up its share of what remains; train
    takes the rest. For a 60/20/20 split this is test = ceil(n/5) and
    val = ceil((n - test)/4).
    """
    f_train, f_val, f_test = fractions
    n_test = math.ceil(f_test * n)
    rest = n - n_test
    n_val = math.ceil(f_val / (f_val + f_train) * rest)
    n_train = rest - n_val
    return n_train, n_val, n_test


def stratified_split(manifest: Manifest, fractions=(0.6, 0.2, 0.2),
                     seed: int = 0) -> Manifest:
    """Assign splits per class: shuffle, then train block, val block, test.

    Deterministic for a fixed (manifest, seed). Every class needs at least
    5 samples so each split is non-empty at the default fractions.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidParameterError(f"split fractions must sum to 1, got {fractions}")
    if min(fractions) <= 0:
        raise InvalidParameterError("split fractions must be positive")
    by_class: dict = {}
    for i, row in enumerate(manifest.rows):
        by_class.setdefault(row.mapped_label, []).append(i)

    rng = np.random.default_rng(seed)
    new_rows = list(manifest.rows)
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        if len(idx) < 5:
            raise StratificationError(
                f"class {label} has {len(idx)} samples, need at least 5")
        rng.shuffle(idx)
        n_train, n_val, n_test = split_counts(len(idx), fractions)
        for pos, i in enumerate(idx):
            if pos < n_train:
                split = "train"
            elif pos < n_train + n_val:
                split = "val"
            else:
                split = "test"
            new_rows[i] = replace(new_rows[i], split=split)
    return Manifest(new_rows, scheme=manifest.scheme, seed=seed)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    seen = set()
    for row in manifest.rows:
        if row.path in seen:
            raise ManifestError(f"duplicate path in manifest: {row.path}")
        seen.add(row.path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in manifest.rows:
            writer.writerow([row.path, row.raw_label, row.mapped_label,
                             row.split, row.origin, row.source_index])


def load_manifest(path, scheme: ClassScheme | None = None) -> Manifest:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest file") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected "
                                    f"{len(MANIFEST_HEADER)} fields, got {len(rec)}")
            p, raw, mapped, split, origin, src = rec
            if split and split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: bad split {split!r}")
            if origin not in ("original", "augmented"):
                raise ManifestError(f"{path}:{lineno}: bad origin {origin!r}")
            try:
                rows.append(ImageSample(path=p, raw_label=raw, mapped_label=int(mapped),
                                        split=split, origin=origin,
                                        source_index=int(src)))
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
    return Manifest(rows, scheme=scheme)
