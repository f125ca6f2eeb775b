"""Loss, gradient clipping, the SGD/step-decay recipe, the epoch loop and
confusion-count evaluation.

The recipe: binary cross-entropy on logits, plain SGD, learning rate decayed
by a fixed factor every epoch, and two-stage clipping (elementwise clamp,
then a rescale of the global L2 norm across all parameter gradients).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .data import SliceSet, augment, scale_normalize
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import ConfusionCounts
from .model import Model, forward, predict_labels
from .rng import TAG_AUGMENT, TAG_DROPOUT, TAG_SHUFFLE, SplitMixStream

HISTORY_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    decay_factor: float = 0.96
    epochs: int = 30
    batch_size: int = 16
    clip_value: float = 0.5
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0,1], got {self.decay_factor}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.clip_value <= 0 or self.clip_norm <= 0:
            raise ConfigError("clip_value and clip_norm must be positive")


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        for v in (rec.lr, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc):
            if not np.isfinite(v):
                raise NumericError(f"non-finite history value at epoch {rec.epoch}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_HEADER)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc),
                                 repr(r.val_loss), repr(r.val_acc)])

    def best_val_epoch(self) -> int:
        """1-based epoch with the highest val accuracy; ties go to the earliest."""
        best = max(range(len(self.records)), key=lambda i: (self.records[i].val_acc, -i))
        return best + 1


def bce_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy computed in logit space.

    loss = mean(softplus(z) - y*z); the gradient w.r.t. each logit is
    (sigmoid(z) - y) / N.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if y.shape != z.shape:
        raise ShapeError(f"labels shape {y.shape} != logits shape {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    y = y.astype(np.float64)
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(softplus - y * z))
    t = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    grad = (p - y) / z.size
    return loss, grad


def clip_gradients(grads: dict, clip_value: float, clip_norm: float) -> dict:
    """Clamp each element to [-clip_value, clip_value], then rescale so the
    global L2 norm over all tensors does not exceed clip_norm."""
    clipped = {name: np.clip(g, -clip_value, clip_value) for name, g in grads.items()}
    sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in clipped.values())
    norm = float(np.sqrt(sq))
    if norm > clip_norm:
        scale = clip_norm / norm
        clipped = {name: g * g.dtype.type(scale) for name, g in clipped.items()}
    return clipped


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: initial_lr * decay_factor ** epoch (epoch is 0-based)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * config.decay_factor ** epoch


def sgd_step(model: Model, grads: dict, lr: float) -> None:
    """Plain SGD, no momentum: w <- w - lr * g for every trainable tensor."""
    for name, param in model.named_parameters():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {param.shape}")
        param -= (lr * g).astype(param.dtype, copy=False)


@dataclass
class FitResult:
    final: Model
    best: Model
    best_epoch: int  # 1-based
    history: History


def _batched(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _prepare_batch(dataset: SliceSet, idx, train: bool, aug, seed: int, epoch: int):
    """Stack slices into [N,1,H,W]; training samples get augmented, otherwise
    only scale normalization is applied."""
    rows = []
    for i in idx:
        raw = dataset.slices[i]
        if train and aug is not None:
            stream = SplitMixStream(seed, TAG_AUGMENT, epoch, int(i))
            rows.append(augment(raw, aug, stream, ceiling=dataset.ceiling))
        else:
            rows.append(scale_normalize(raw, dataset.ceiling))
    x = np.stack(rows)[:, None, :, :]
    y = dataset.labels[list(idx)]
    return x, y


def _eval_pass(model: Model, dataset: SliceSet, batch_size: int):
    """Infer-mode loss and accuracy over a whole slice set."""
    total_loss = 0.0
    correct = 0
    n = len(dataset)
    for idx in _batched(np.arange(n), batch_size):
        x, y = _prepare_batch(dataset, idx, train=False, aug=None, seed=0, epoch=0)
        probs, caches = forward(model, x, "infer")
        loss, _ = bce_loss(caches.logits, y)
        total_loss += loss * len(idx)
        correct += int(np.sum(predict_labels(probs, model.config.threshold) == y))
    return total_loss / n, correct / n


def fit(model: Model, train_set: SliceSet, val_set: SliceSet, config: TrainConfig,
        aug=None) -> FitResult:
    """Run the epoch loop and return the final model, the best-validation
    snapshot (ties broken by earliest epoch) and the per-epoch history.

    Per epoch: seeded shuffle, batches (last partial batch kept), train-mode
    forward with augmentation, loss, backprop, two-stage clip, SGD step; then
    full infer-mode passes over the train and validation sets for the history
    row. Raises NumericError with an epoch/batch diagnostic if the loss goes
    non-finite.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("train and validation sets must be nonempty")
    if config.batch_size > len(train_set):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds train set size {len(train_set)}"
        )
    overlap = set(train_set.slice_keys) & set(val_set.slice_keys)
    if overlap:
        raise DataError(f"train and validation sets share {len(overlap)} slices")

    history = History()
    best_model = model.copy()
    best_acc = -1.0
    best_epoch = 0
    n = len(train_set)

    for epoch in range(config.epochs):
        lr = lr_for_epoch(config, epoch)
        order = SplitMixStream(config.seed, TAG_SHUFFLE, epoch).permutation(n)
        for batch_no, idx in enumerate(_batched(order, config.batch_size)):
            x, y = _prepare_batch(train_set, idx, True, aug, config.seed, epoch)
            dropout_rng = [
                SplitMixStream(config.seed, TAG_DROPOUT, epoch, int(i)) for i in idx
            ]
            _, caches = forward(model, x, "train", dropout_rng)
            loss, dlogits = bce_loss(caches.logits, y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {batch_no + 1}")
            grads = model_mod.backward(model, caches, dlogits.astype(x.dtype))
            grads = clip_gradients(grads, config.clip_value, config.clip_norm)
            sgd_step(model, grads, lr)

        train_loss, train_acc = _eval_pass(model, train_set, config.batch_size)
        val_loss, val_acc = _eval_pass(model, val_set, config.batch_size)
        history.append(EpochRecord(epoch + 1, lr, train_loss, train_acc, val_loss, val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch + 1
            best_model = model.copy()

    return FitResult(final=model, best=best_model, best_epoch=best_epoch, history=history)


def evaluate(model: Model, dataset: SliceSet, threshold: float | None = None,
             batch_size: int = 64) -> tuple[ConfusionCounts, float]:
    """Slice-level confusion counts and mean loss in infer mode."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    if threshold is None:
        threshold = model.config.threshold
    tp = fp = tn = fn = 0
    total_loss = 0.0
    n = len(dataset)
    for idx in _batched(np.arange(n), batch_size):
        x, y = _prepare_batch(dataset, idx, train=False, aug=None, seed=0, epoch=0)
        probs, caches = forward(model, x, "infer")
        loss, _ = bce_loss(caches.logits, y)
        total_loss += loss * len(idx)
        pred = predict_labels(probs, threshold)
        tp += int(np.sum((pred == 1) & (y == 1)))
        fp += int(np.sum((pred == 1) & (y == 0)))
        tn += int(np.sum((pred == 0) & (y == 0)))
        fn += int(np.sum((pred == 0) & (y == 1)))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn), total_loss / n


def evaluate_subject_vote(model: Model, dataset: SliceSet, threshold: float | None = None,
                          batch_size: int = 64) -> ConfusionCounts:
    """Subject-level confusion via majority vote over each subject's slices.

    Vote ties go to the positive class, mirroring the >= threshold rule.
    """
    if threshold is None:
        threshold = model.config.threshold
    votes: dict[str, list] = {}
    truth: dict[str, int] = {}
    n = len(dataset)
    for idx in _batched(np.arange(n), batch_size):
        x, y = _prepare_batch(dataset, idx, train=False, aug=None, seed=0, epoch=0)
        probs, _ = forward(model, x, "infer")
        pred = predict_labels(probs, threshold)
        for j, i in enumerate(idx):
            sid = dataset.subject_ids[int(i)]
            votes.setdefault(sid, []).append(int(pred[j]))
            truth[sid] = int(y[j])
    tp = fp = tn = fn = 0
    for sid, v in votes.items():
        label = 1 if sum(v) * 2 >= len(v) else 0
        if truth[sid] == 1:
            tp, fn = (tp + 1, fn) if label == 1 else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if label == 1 else (fp, tn + 1)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
