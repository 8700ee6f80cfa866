"""
Mini-batch SGD with a stepwise learning-rate schedule and optional
validation-driven stopping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.errors import DatasetError, NonFiniteLossError, NonFiniteValueError
from app.nn.losses import loss_and_grad
from app.nn.network import NetworkSpec, Params, backward, forward, predict
from app.nn.rng import Rng

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """Optimizer and schedule settings for one training stage."""
    initial_lr: float = Field(1e-3, gt=0, description="Learning rate at epoch 0")
    lr_decay_every_epochs: int = Field(2, ge=1, description="Epochs between learning-rate reductions")
    lr_decay_factor: float = Field(0.5, gt=0, le=1, description="Multiplier applied at each reduction")
    max_epochs: int = Field(6, ge=1)
    batch_size: int = Field(10, ge=1)
    validation_frequency: Optional[int] = Field(None, ge=1, description="Iterations between validation checks")
    validation_patience: Optional[int] = Field(None, ge=1, description="Checks without improvement before stopping")
    seed: int = Field(0, ge=0, lt=2**64)


def learning_rate(cfg: TrainConfig, epoch_index: int) -> float:
    return cfg.initial_lr * cfg.lr_decay_factor ** (epoch_index // cfg.lr_decay_every_epochs)


def sgd_epoch(
    net: NetworkSpec,
    params: Params,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    epoch_index: int,
    class_weights=None,
    on_iteration: Optional[Callable[[int, Params], bool]] = None,
) -> tuple[Params, float]:
    """
    Runs one epoch of plain SGD and returns the updated parameters and the
    sample-weighted mean batch loss.

    Batches are visited in an order drawn from the (seed, epoch) sub-stream, so
    identical inputs and seed give bitwise-identical parameters. `params` is
    not modified. `on_iteration(i, params)` is called after each update and may
    return True to stop the epoch early.
    """
    inputs, targets = data
    n = len(inputs)
    if n == 0:
        raise DatasetError("sgd_epoch needs a non-empty dataset")
    if epoch_index < 0:
        raise ValueError(f"epoch_index must be >= 0, got {epoch_index}")

    lr = learning_rate(cfg, epoch_index)
    order = Rng(cfg.seed).spawn(f"epoch-{epoch_index}").permutation(n)
    trainable = {node.name for node in net.nodes if node.layer.learnable and not node.layer.frozen}
    # Frozen tensors are shared, not copied, so they stay bitwise identical.
    updated = {name: ({k: v.copy() for k, v in t.items()} if name in trainable else t) for name, t in params.items()}

    total = 0.0
    for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        where = f"epoch {epoch_index}, batch {batch_index} (lr={lr:g})"
        try:
            outputs, cache = forward(net, updated, inputs[idx])
            loss, grad = loss_and_grad(net.loss, outputs, targets[idx], class_weights)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"Non-finite loss {loss} at {where}")
            grads = backward(net, updated, cache, grad)
        except NonFiniteValueError as e:
            raise NonFiniteLossError(f"{e} at {where}") from e
        for name, g in grads.params.items():
            for key, value in g.items():
                updated[name][key] -= lr * value
        total += loss * len(idx)
        if on_iteration is not None and on_iteration(batch_index, updated):
            break
    epoch_loss = total / n
    logger.info(f"Epoch {epoch_index}: lr={lr:g} loss={epoch_loss:.6g}",
                extra={"epoch": epoch_index, "lr": lr, "loss": epoch_loss})
    return updated, epoch_loss


def evaluate_loss(net: NetworkSpec, params: Params, data, class_weights=None, batch_size: int = 64):
    """Mean loss and, for classifiers, accuracy over a dataset."""
    inputs, targets = data
    outputs = predict(net, params, inputs, batch_size)
    loss, _ = loss_and_grad(net.loss, outputs, targets, class_weights)
    accuracy = None
    if outputs.ndim == 2 and outputs.shape[1] > 1:
        accuracy = float(np.mean(np.argmax(outputs, axis=1) == np.asarray(targets)))
    return loss, accuracy


@dataclass
class TrainingResult:
    params: Params
    epoch_losses: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def fit(
    net: NetworkSpec,
    params: Params,
    train: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
    class_weights=None,
) -> TrainingResult:
    """
    Trains for up to `cfg.max_epochs` epochs. With a validation set, validation
    loss is checked every `validation_frequency` iterations and at each epoch
    end; training stops once it has not improved for `validation_patience`
    consecutive checks.
    """
    result = TrainingResult(params=params)
    state = {"iteration": 0, "best": math.inf, "stale": 0}

    def check(params_now: Params, epoch: int) -> bool:
        loss, acc = evaluate_loss(net, params_now, val, class_weights)
        result.validation.append({"iteration": state["iteration"], "epoch": epoch, "loss": loss, "accuracy": acc})
        logger.info(f"Validation at iteration {state['iteration']}: loss={loss:.6g} accuracy={acc}",
                    extra={"iteration": state["iteration"], "val_loss": loss, "val_accuracy": acc})
        if loss < state["best"]:
            state["best"], state["stale"] = loss, 0
        else:
            state["stale"] += 1
        return cfg.validation_patience is not None and state["stale"] >= cfg.validation_patience

    for epoch in range(cfg.max_epochs):
        def on_iteration(_, params_now, epoch=epoch):
            state["iteration"] += 1
            if val is None or cfg.validation_frequency is None:
                return False
            if state["iteration"] % cfg.validation_frequency:
                return False
            result.stopped_early = check(params_now, epoch)
            return result.stopped_early

        result.params, loss = sgd_epoch(net, result.params, train, cfg, epoch, class_weights, on_iteration)
        result.epoch_losses.append(loss)
        if result.stopped_early:
            break
        if val is not None and check(result.params, epoch):
            result.stopped_early = True
            break
    if result.stopped_early:
        logger.info(f"Stopped early after {state['iteration']} iterations: validation loss stopped improving")
    return result
