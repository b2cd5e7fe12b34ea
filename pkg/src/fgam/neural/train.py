"""Mini-batch Adam training with a step learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from fgam.errors import DegenerateDataset
from fgam.neural.models import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    decay_every: int = 5
    decay_factor: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.decay_factor ** (epoch // config.decay_every)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    if len(y) == 0:
        return float("nan")
    pred = np.concatenate([model.logits(x[i : i + batch_size]) >= 0.0 for i in range(0, len(x), batch_size)])
    return float(np.mean(pred == (np.asarray(y) >= 0.5)))


def _round_to_float32(model: Model) -> None:
    for k, v in model.params.items():
        model.params[k] = v.astype(np.float32).astype(np.float64)


def train(model: Model, x_train: np.ndarray, y_train: np.ndarray,
          x_test: np.ndarray, y_test: np.ndarray, config: TrainConfig) -> Model:
    """Fit ``model`` in place and return the epoch checkpoint with the best test accuracy.

    Inputs are batches already passed through ``model.prepare``. Ties in test
    accuracy keep the earliest epoch. Returned weights are rounded to float32
    so a saved checkpoint reloads to the identical model.
    """
    y_train = np.asarray(y_train, dtype=np.float64)
    if len(np.unique(y_train)) < 2:
        raise DegenerateDataset("training labels contain a single class")

    rng = np.random.default_rng(config.seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(p) for k, p in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    best, best_acc = model.copy(), -1.0
    history = []
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = rng.permutation(len(y_train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads, _ = model.loss_and_grads(x_train[idx], y_train[idx])
            losses.append(loss)
            step += 1
            for k, p in model.params.items():
                g = grads[k] + config.weight_decay * p
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1**step)
                vhat = v[k] / (1 - b2**step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
        train_acc = accuracy(model, x_train, y_train)
        test_acc = accuracy(model, x_test, y_test)
        history.append({"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses)),
                        "train_accuracy": train_acc, "test_accuracy": test_acc})
        log.info("%s epoch %d lr %.5f loss %.4f train %.4f test %.4f",
                 model.arch, epoch + 1, lr, np.mean(losses), train_acc, test_acc)
        if test_acc > best_acc:
            best_acc, best = test_acc, model.copy()
            best.metadata["best_epoch"] = epoch + 1

    _round_to_float32(best)
    best.metadata.update({
        "epochs": config.epochs,
        "final_accuracy": accuracy(best, x_test, y_test),
        "seed": config.seed,
        "train_config": asdict(config),
        "history": history,
    })
    return best
