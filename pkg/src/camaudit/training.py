"""Adam training of the speaker classifier on a labeled spectrogram corpus.

The run is fully seeded: batch shuffling is the only stochastic element and
it comes from one generator, so (seed, data, hyperparameters) determine the
final parameters bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .model import Model


@dataclass
class TrainConfig:
    epochs: int = 14
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    heldout_per_speaker: int = 5
    seed: int = 1234


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits); returns (loss, dlogits)."""
    n = logits.shape[0]
    p = engine.softmax(logits)
    nll = -np.log(p[np.arange(n), labels])
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(nll.mean()), d / n


def am_softmax_loss(logits: np.ndarray, labels: np.ndarray,
                    margin: float, scale: float):
    """Additive-margin softmax loss on raw class scores.

    Subtracts ``margin`` from the target-class score, multiplies everything
    by ``scale``, then applies softmax cross-entropy. With margin 0 and
    scale 1 this is exactly plain softmax cross-entropy.
    """
    z = logits.copy()
    n = z.shape[0]
    z[np.arange(n), labels] -= margin
    z *= scale
    loss, dz = softmax_cross_entropy(z, labels)
    return loss, dz * scale


def _batch_loss(model: Model, logits: np.ndarray, labels: np.ndarray):
    """Training loss at the model head.

    The cosine classifier already multiplies by the configured scale, so the
    margin enters here as a scaled shift of the target logit.
    """
    cfg = model.config
    if cfg.loss_kind == "am-softmax":
        z = logits.copy()
        n = z.shape[0]
        z[np.arange(n), labels] -= cfg.scale_s * cfg.margin_m
        loss, dz = softmax_cross_entropy(z, labels)
        return loss, dz
    return softmax_cross_entropy(logits, labels)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            p -= c.learning_rate * (self.m[k] / bc1) / (
                np.sqrt(self.v[k] / bc2) + c.eps)


def _values_and_labels(data):
    values, labels = [], []
    for spec, label in data:
        values.append(np.asarray(getattr(spec, "values", spec),
                                 dtype=np.float64))
        labels.append(int(label))
    return values, np.asarray(labels)


def split_by_speaker(data, heldout_per_speaker: int):
    """Deterministic split: the last N utterances of each speaker held out."""
    per: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(data):
        per.setdefault(int(label), []).append(i)
    train_idx, held_idx = [], []
    for label in sorted(per):
        idxs = per[label]
        cut = max(len(idxs) - heldout_per_speaker, 1)
        train_idx.extend(idxs[:cut])
        held_idx.extend(idxs[cut:])
    return train_idx, held_idx


def evaluate_top1(model: Model, values: list[np.ndarray],
                  labels: np.ndarray, chunk: int = 64) -> float:
    """Mean top-1 accuracy on raw spectrogram values."""
    correct = 0
    for lo in range(0, len(values), chunk):
        batch = np.stack([model.featurize(v) for v in values[lo:lo + chunk]])
        posts = engine.predict_batch(model, batch)
        correct += int(np.sum(np.argmax(posts, axis=1)
                              == labels[lo:lo + chunk]))
    return correct / len(values)


def evaluate_loss(model: Model, values: list[np.ndarray],
                  labels: np.ndarray, chunk: int = 64) -> float:
    """Mean training loss over a dataset, no parameter updates."""
    total, n = 0.0, len(values)
    for lo in range(0, n, chunk):
        batch = np.stack([model.featurize(v) for v in values[lo:lo + chunk]])
        logits, _ = engine.run_forward_batch(model, batch)
        loss, _ = _batch_loss(model, logits, labels[lo:lo + chunk])
        total += loss * len(values[lo:lo + chunk])
    return total / n


def train(model: Model, data, cfg: TrainConfig):
    """Optimize the model on (spectrogram, label) pairs.

    Sets the model's feature normalization from the training split, runs
    seeded Adam for the configured epochs, and returns the model together
    with a log of one row per epoch:
    ``{"epoch", "loss", "heldout_top1"}``.
    """
    if not data:
        raise ValueError("dataset is empty")
    values, labels = _values_and_labels(data)
    ncls = model.config.num_classes
    if labels.min() < 0 or labels.max() >= ncls:
        raise ValueError(
            f"labels span [{labels.min()}, {labels.max()}] but the model "
            f"has {ncls} classes")
    if len(np.unique(labels)) != ncls:
        raise ValueError(
            f"dataset covers {len(np.unique(labels))} speakers, "
            f"model expects {ncls}")
    fbins = model.config.input_freq_bins
    shapes = {v.shape for v in values}
    if len(shapes) != 1 or next(iter(shapes))[0] != fbins:
        raise ValueError(f"training inputs must share one ({fbins}, frames) "
                         f"shape, got {sorted(shapes)}")

    train_idx, held_idx = split_by_speaker(data, cfg.heldout_per_speaker)
    train_vals = [values[i] for i in train_idx]
    train_labels = labels[train_idx]
    held_vals = [values[i] for i in held_idx] or train_vals
    held_labels = labels[held_idx] if held_idx else train_labels

    flat = np.concatenate([v.ravel() for v in train_vals])
    model.input_mean = float(flat.mean())
    model.input_std = float(max(flat.std(), 1e-12))

    feats = np.stack([model.featurize(v) for v in train_vals])
    params = dict(model.param_items())
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_vals))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            logits, caches = engine.run_forward_batch(model, feats[sel])
            loss, dlogits = _batch_loss(model, logits, train_labels[sel])
            grads = engine.training_gradients(model, caches, dlogits)
            opt.step(grads)
            losses.append(loss)
        acc = evaluate_top1(model, held_vals, held_labels)
        log.append({"epoch": epoch, "loss": float(np.mean(losses)),
                    "heldout_top1": acc})
    return model, log


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("epoch,loss,heldout_top1\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['loss']!r},{r['heldout_top1']!r}\n")
