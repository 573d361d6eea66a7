"""Per-backbone classifier heads, feature extraction and storage, the
concatenation fusion classifier, and decision-level majority voting.

Heads share one architecture: BN -> dense(1024, relu) -> dropout ->
dense(C), with softmax applied at the loss / prediction boundary. The
fusion classifier runs BN -> dropout -> dense(C) over the concatenated
per-backbone feature blocks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    AlignmentError,
    ArtifactError,
    BatchTooSmallError,
    DimensionError,
    DivergenceError,
    InvalidParameterError,
    StateError,
)
from .nn import Adam, BatchNorm, Dense, Dropout, LayerStack, one_hot, require_finite

FEATURE_WIDTH = 1024
FEATURE_MAGIC = b"FMX1"


@dataclass(frozen=True)
class TrainSchedule:
    """Back-to-back (learning rate, epoch count) phases on one optimizer.

    The optimizer's moment estimates carry across phase boundaries; only
    the learning rate changes.
    """

    phases: tuple = ((1e-3, 50), (1e-5, 50))
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidParameterError(
                f"batch_size must be >= 2, got {self.batch_size}")
        if not self.phases:
            raise InvalidParameterError("schedule needs at least one phase")
        for lr, epochs in self.phases:
            if lr <= 0:
                raise InvalidParameterError(f"learning rate must be positive, got {lr}")
            if epochs < 0 or epochs != int(epochs):
                raise InvalidParameterError(f"epoch count must be a non-negative int, got {epochs}")

    @property
    def total_epochs(self) -> int:
        return sum(int(e) for _, e in self.phases)


def head_schedule() -> TrainSchedule:
    return TrainSchedule(phases=((1e-3, 50), (1e-5, 50)), batch_size=32)


def fusion_schedule() -> TrainSchedule:
    return TrainSchedule(phases=((1e-3, 50),), batch_size=32)


class HeadModel:
    """Trainable head over one frozen trunk's pooled feature vectors."""

    def __init__(self, backbone_id: str, in_dim: int, class_count: int,
                 dropout_rate: float = 0.5, seed: int = 0):
        if class_count < 2:
            raise InvalidParameterError(f"need >= 2 classes, got {class_count}")
        rng = np.random.default_rng(seed)
        self.backbone_id = backbone_id
        self.in_dim = in_dim
        self.class_count = class_count
        self.dropout_rate = dropout_rate
        self.stack = LayerStack([
            BatchNorm(in_dim),
            Dense(in_dim, FEATURE_WIDTH, activation="relu", rng=rng),
            Dropout(dropout_rate),
            Dense(FEATURE_WIDTH, class_count, rng=rng),
        ])
        self.trained = False

    def feature_activations(self, x: np.ndarray) -> np.ndarray:
        """Post-relu 1024-wide activations of the feature layer, row by
        row so results do not depend on caller batching."""
        x = _check_input(x, self.in_dim)
        bn, feat = self.stack.layers[0], self.stack.layers[1]
        rows = [feat.forward(bn.forward(x[i:i + 1], train=False), train=False)
                for i in range(x.shape[0])]
        return np.concatenate(rows, axis=0)

    def save(self, path) -> None:
        save_checkpoint(path, self.stack.tensors())

    def load_weights(self, path) -> None:
        self.stack.load_tensors(load_checkpoint(path))
        self.trained = True


class FusionModel:
    """Single classifier over concatenated per-backbone feature blocks."""

    def __init__(self, input_dim: int, class_count: int,
                 dropout_rate: float = 0.5, seed: int = 0):
        if input_dim % FEATURE_WIDTH != 0 or input_dim // FEATURE_WIDTH < 2:
            raise InvalidParameterError(
                f"fusion input must be k x {FEATURE_WIDTH} with k >= 2, got {input_dim}")
        if class_count < 2:
            raise InvalidParameterError(f"need >= 2 classes, got {class_count}")
        rng = np.random.default_rng(seed)
        self.in_dim = input_dim
        self.class_count = class_count
        self.dropout_rate = dropout_rate
        self.stack = LayerStack([
            BatchNorm(input_dim),
            Dropout(dropout_rate),
            Dense(input_dim, class_count, rng=rng),
        ])
        self.trained = False

    def save(self, path) -> None:
        save_checkpoint(path, self.stack.tensors())

    def load_weights(self, path) -> None:
        self.stack.load_tensors(load_checkpoint(path))
        self.trained = True


def _check_input(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected [N x {width}] input, got {list(x.shape)}")
    return require_finite(x.astype(np.float32, copy=False), "model input")


def _batch_slices(n: int, batch_size: int):
    """Contiguous batch index bounds; a trailing singleton is folded into
    the previous batch so BN always sees >= 2 rows."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return list(zip(bounds[:-1], bounds[1:]))


def _run_schedule(stack: LayerStack, x: np.ndarray, labels: np.ndarray,
                  class_count: int, schedule: TrainSchedule, seed: int) -> list:
    """Shared minibatch Adam loop. Returns per-epoch history records."""
    n = x.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must be [N], got {list(labels.shape)}")
    onehot = one_hot(labels, class_count)
    if schedule.total_epochs == 0:
        return []
    if n < 2:
        raise BatchTooSmallError(f"training needs >= 2 rows, got {n}")
    rng = np.random.default_rng(seed)
    opt = Adam(stack.params(), lr=schedule.phases[0][0])
    history = []
    epoch = 0
    for lr, epochs in schedule.phases:
        opt.lr = lr
        for _ in range(int(epochs)):
            perm = rng.permutation(n)
            total = 0.0
            for lo, hi in _batch_slices(n, schedule.batch_size):
                idx = perm[lo:hi]
                loss = stack.loss_and_backward(x[idx], onehot[idx], rng)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
                opt.step(stack.params(), stack.grads())
                total += loss * len(idx)
            preds = stack.forward(x, train=False).argmax(axis=1)
            history.append({
                "epoch": epoch,
                "lr": lr,
                "loss": total / n,
                "accuracy": float((preds == labels).mean()),
            })
            epoch += 1
    return history


def train_head(head: HeadModel, feats: np.ndarray, labels: np.ndarray,
               schedule: TrainSchedule | None = None, seed: int = 0):
    """Fit one head on frozen-trunk features. Returns (head, history)."""
    x = _check_input(feats, head.in_dim)
    schedule = schedule if schedule is not None else head_schedule()
    history = _run_schedule(head.stack, x, labels, head.class_count, schedule, seed)
    head.trained = True
    return head, history


def train_fusion(fusion: FusionModel, feats: np.ndarray, labels: np.ndarray,
                 schedule: TrainSchedule | None = None, seed: int = 0):
    """Fit the fusion classifier on concatenated features. Returns
    (fusion, history)."""
    x = _check_input(feats, fusion.in_dim)
    schedule = schedule if schedule is not None else fusion_schedule()
    history = _run_schedule(fusion.stack, x, labels, fusion.class_count, schedule, seed)
    fusion.trained = True
    return fusion, history


def predict(model, x: np.ndarray):
    """Deterministic inference: (probabilities [N x C], argmax labels [N])."""
    if not model.trained:
        raise StateError("model not trained; run training or load a checkpoint first")
    x = _check_input(x, model.in_dim)
    probs = model.stack.predict_probs(x)
    return probs, probs.argmax(axis=1)


# ----------------------------------------------------------------- features

@dataclass
class FeatureMatrix:
    """Standardized 1024-wide feature rows for one backbone and split.

    norm_mean / norm_std are always the train-split statistics, also when
    the rows themselves belong to another split.
    """

    backbone_id: str
    split: str
    rows: np.ndarray
    labels: np.ndarray
    sample_ids: list
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = [str(s) for s in self.sample_ids]
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float64)
        if self.rows.ndim != 2:
            raise DimensionError(f"rows must be 2D, got {self.rows.ndim}D")
        n, d = self.rows.shape
        if self.labels.shape != (n,) or len(self.sample_ids) != n:
            raise AlignmentError(
                f"rows/labels/sample_ids disagree on N: {n}, "
                f"{self.labels.shape[0]}, {len(self.sample_ids)}")
        if self.norm_mean.shape != (d,) or self.norm_std.shape != (d,):
            raise DimensionError("normalization stats must match feature width")
        require_finite(self.rows, "feature rows")

    @property
    def normalization(self):
        return self.norm_mean, self.norm_std


def extract_features(head: HeadModel, feats: np.ndarray, labels: np.ndarray,
                     split: str, sample_ids, normalization=None) -> FeatureMatrix:
    """Tap the trained head's feature layer and z-score per dimension.

    Statistics are fitted here only for the train split; other splits must
    pass the train matrix's `normalization` so all splits share one frame.
    Dimensions that never activate (zero variance) are left at zero rather
    than divided by a vanishing std.
    """
    if not head.trained:
        raise StateError("head not trained; features come from a trained head")
    acts = head.feature_activations(feats)
    if normalization is None:
        if split != "train":
            raise StateError(
                f"split {split!r} needs the train-split normalization stats")
        mean = acts.mean(axis=0, dtype=np.float64)
        std = acts.std(axis=0, dtype=np.float64)
    else:
        mean, std = normalization
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
    safe = np.where(std > 0, std, 1.0)
    rows = ((acts.astype(np.float64) - mean) / safe).astype(np.float32)
    return FeatureMatrix(head.backbone_id, split, rows, labels,
                         list(sample_ids), mean, std)


def concat_features(matrices: list) -> np.ndarray:
    """Concatenate feature blocks row-wise in the given backbone order.

    Every matrix must carry the same samples in the same order; ids,
    labels, and split tags are all checked.
    """
    if not matrices:
        raise InvalidParameterError("need at least one feature matrix")
    first = matrices[0]
    for m in matrices[1:]:
        if m.rows.shape[0] != first.rows.shape[0]:
            raise AlignmentError(
                f"row count mismatch: {first.backbone_id} has "
                f"{first.rows.shape[0]}, {m.backbone_id} has {m.rows.shape[0]}")
        if m.split != first.split:
            raise AlignmentError(
                f"split mismatch: {first.split!r} vs {m.split!r}")
        if m.sample_ids != first.sample_ids:
            bad = next(i for i, (a, b) in
                       enumerate(zip(first.sample_ids, m.sample_ids)) if a != b)
            raise AlignmentError(
                f"sample order mismatch at row {bad}: "
                f"{first.sample_ids[bad]!r} vs {m.sample_ids[bad]!r}")
        if not np.array_equal(m.labels, first.labels):
            raise AlignmentError("label mismatch between feature matrices")
    return np.hstack([m.rows for m in matrices])


# ------------------------------------------------------------ feature store

def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_features(fm: FeatureMatrix, path) -> None:
    """Binary FMX1 payload plus a JSON sidecar with everything else."""
    path = Path(path)
    rows = np.ascontiguousarray(fm.rows, dtype="<f4")
    n, d = rows.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(rows.tobytes())
    sidecar = {
        "backbone_id": fm.backbone_id,
        "split": fm.split,
        "label_list": [int(v) for v in fm.labels],
        "sample_ids": fm.sample_ids,
        "normalization": {
            "mean": [float(v) for v in fm.norm_mean],
            "std": [float(v) for v in fm.norm_std],
        },
    }
    _sidecar_path(path).write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_features(path) -> FeatureMatrix:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read feature store {path}: {exc}") from exc
    if blob[:4] != FEATURE_MAGIC:
        raise ArtifactError(f"{path} is not a feature store (bad magic)")
    if len(blob) < 12:
        raise ArtifactError(f"truncated feature store {path}")
    n, d = struct.unpack_from("<II", blob, 4)
    payload = blob[12:]
    if len(payload) != 4 * n * d:
        raise ArtifactError(
            f"feature store {path} payload is {len(payload)} bytes, "
            f"header promises {4 * n * d}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    side = _sidecar_path(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactError(f"missing feature sidecar {side}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"invalid feature sidecar {side}: {exc}") from exc
    try:
        return FeatureMatrix(
            backbone_id=meta["backbone_id"],
            split=meta["split"],
            rows=rows.copy(),
            labels=np.asarray(meta["label_list"], dtype=np.int64),
            sample_ids=meta["sample_ids"],
            norm_mean=meta["normalization"]["mean"],
            norm_std=meta["normalization"]["std"],
        )
    except KeyError as exc:
        raise ArtifactError(f"feature sidecar {side} lacks key {exc}") from exc


# -------------------------------------------------------------- late fusion

@dataclass
class PredictionSet:
    """Per-model probabilities and decisions over one evaluation split."""

    probs: np.ndarray    # [M x N x C]
    votes: np.ndarray    # [M x N]
    true_labels: np.ndarray  # [N]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.votes = np.asarray(self.votes, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.probs.ndim != 3:
            raise DimensionError("probs must be [M x N x C]")
        m, n, c = self.probs.shape
        if self.votes.shape != (m, n) or self.true_labels.shape != (n,):
            raise DimensionError("votes/true_labels do not match probs")
        sums = self.probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-4):
            raise InvalidParameterError("probability rows must sum to 1 within 1e-4")

    def vote(self) -> np.ndarray:
        return majority_vote(self.votes, self.probs)


def majority_vote(votes: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Per-sample plurality over model decisions.

    Ties go to the tied class with the highest mean probability across
    models; a residual tie falls to the lowest class index.
    """
    votes = np.asarray(votes)
    probs = np.asarray(probs)
    if votes.ndim != 2 or probs.ndim != 3 or probs.shape[:2] != votes.shape:
        raise DimensionError(
            f"expected votes [M x N] and probs [M x N x C], got "
            f"{list(votes.shape)} and {list(probs.shape)}")
    m, n = votes.shape
    c = probs.shape[2]
    if m < 1:
        raise InvalidParameterError("need at least one voter")
    if votes.min(initial=0) < 0 or votes.max(initial=0) >= c:
        raise InvalidParameterError(f"votes outside [0, {c})")
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        counts = np.bincount(votes[:, i], minlength=c)
        tied = np.flatnonzero(counts == counts.max())
        if tied.size == 1:
            out[i] = tied[0]
            continue
        mean_conf = probs[:, i, tied].mean(axis=0)
        # tied is ascending, argmax takes the first max: lowest index wins
        out[i] = tied[int(np.argmax(mean_conf))]
    return out
