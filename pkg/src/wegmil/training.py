"""Classification metrics and the shared minibatch Adam loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from wegmil import autodiff as ad
from wegmil.autodiff import Adam, Module, Tensor
from wegmil.config import RunConfig
from wegmil.errors import DataError

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy", "macro_recall")


def predict_class(probs: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest class index wins ties
    return int(np.argmax(probs))


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


def classification_metrics(y_true: Sequence[int], y_pred: Sequence[int], K: int) -> dict:
    cm = confusion_matrix(y_true, y_pred, K)
    support = cm.sum(axis=1)
    recall = [float(cm[k, k] / support[k]) if support[k] else None for k in range(K)]
    present = [r for r in recall if r is not None]
    n = int(cm.sum())
    return {
        "n": n,
        "accuracy": float(np.trace(cm) / n) if n else 0.0,
        "per_class_recall": recall,
        "macro_recall": float(np.mean(present)) if present else 0.0,
        "confusion": cm.tolist(),
    }


@dataclass
class EpochRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    macro_recall: float

    def as_csv(self) -> str:
        return f"{self.epoch},{self.split},{self.loss!r},{self.accuracy!r},{self.macro_recall!r}"


def evaluate(items: Sequence, forward: Callable, K: int) -> tuple[float, dict]:
    """Mean loss and metrics; ``forward(item)`` returns ``(y_hat Tensor, y array)``."""
    losses, y_true, y_pred = [], [], []
    for item in items:
        y_hat, y = forward(item)
        losses.append(ad.cross_entropy(y_hat, y).item())
        y_true.append(int(np.argmax(y)))
        y_pred.append(predict_class(y_hat.data[0]))
    return (float(np.mean(losses)) if losses else 0.0), classification_metrics(y_true, y_pred, K)


def train(model: Module | Sequence[Tensor], items: Sequence, forward: Callable, K: int,
          config: RunConfig, epochs: int, lr: float, seed: int, val_items: Sequence = (),
          tag: str = "") -> list[EpochRow]:
    """Minimise mean cross-entropy over ``items`` with Adam.

    ``forward(item)`` returns ``(y_hat, y)``.  Bag order is reshuffled each
    epoch from ``seed``; per-epoch train (post-epoch) and validation rows
    are returned.
    """
    if not items:
        raise DataError(f"{tag or 'training'}: empty training set")
    params = model.parameters() if isinstance(model, Module) else list(model)
    params = [p for p in params if p.requires_grad]
    opt = Adam(params, **config.adam_hyper(lr))
    rng = np.random.default_rng(seed)
    rows = []
    bs = config.batch_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(items))
        for start in range(0, len(order), bs):
            batch = order[start:start + bs]
            opt.zero_grad()
            for i in batch:
                y_hat, y = forward(items[i])
                loss = ad.scale(ad.cross_entropy(y_hat, y), 1.0 / len(batch))
                ad.backward(loss)
            opt.step()
        for split, subset in (("train", items), ("val", val_items)):
            if not len(subset):
                continue
            loss, m = evaluate(subset, forward, K)
            rows.append(EpochRow(epoch, split, loss, m["accuracy"], m["macro_recall"]))
        last = [r for r in rows if r.epoch == epoch]
        log.info("%s epoch %d: %s", tag, epoch,
                 ", ".join(f"{r.split} loss={r.loss:.4f} acc={r.accuracy:.3f}" for r in last))
    return rows


def metrics_csv(rows: Sequence[EpochRow]) -> str:
    return ",".join(METRIC_COLUMNS) + "\n" + "".join(r.as_csv() + "\n" for r in rows)
