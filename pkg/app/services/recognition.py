"""
Polyp recognition: the toy CNN, its pretext-then-fine-tune regimen, screening
metrics and input-gradient saliency maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.errors import DatasetError
from app.models import EvalReport, PhantomSample, RecognitionLabel
from app.nn.layers import LayerKind
from app.nn.network import LossKind, NetworkSpec, Node, Params, backward, conv, dense, forward, init_params, predict, simple
from app.nn.rng import Rng
from app.nn.train import TrainConfig, TrainingResult, fit

logger = logging.getLogger(__name__)

CONV_CHANNELS = (8, 16, 32)
HIDDEN_UNITS = 32


def build_toy_cnn(image_size: int = 64, channels: int = 3, n_classes: int = 2,
                  loss: LossKind = LossKind.CROSS_ENTROPY) -> NetworkSpec:
    """
    Three conv(3x3)+ReLU+maxpool stages (8, 16, 32 maps), a 32-unit hidden
    dense layer and a softmax head. Nodes are named conv1/relu1/pool1 ...
    fc1/relu4/fc2/softmax.
    """
    if image_size % 8:
        raise ValueError(f"image_size must be divisible by 8, got {image_size}")
    nodes = []
    prev, cin = "input", channels
    for i, cout in enumerate(CONV_CHANNELS, start=1):
        nodes += [
            Node(name=f"conv{i}", layer=conv(cin, cout), inputs=(prev,)),
            Node(name=f"relu{i}", layer=simple(LayerKind.RELU), inputs=(f"conv{i}",)),
            Node(name=f"pool{i}", layer=simple(LayerKind.MAXPOOL), inputs=(f"relu{i}",)),
        ]
        prev, cin = f"pool{i}", cout
    flat = CONV_CHANNELS[-1] * (image_size // 8) ** 2
    nodes += [
        Node(name="fc1", layer=dense(flat, HIDDEN_UNITS), inputs=(prev,)),
        Node(name="relu4", layer=simple(LayerKind.RELU), inputs=("fc1",)),
        Node(name="fc2", layer=dense(HIDDEN_UNITS, n_classes), inputs=("relu4",)),
        Node(name="softmax", layer=simple(LayerKind.SOFTMAX), inputs=("fc2",)),
    ]
    return NetworkSpec(input_shape=(channels, image_size, image_size), nodes=tuple(nodes), output="softmax", loss=loss)


def build_recognizer(image_size: int = 64) -> NetworkSpec:
    return build_toy_cnn(image_size)


def recognition_arrays(samples: Sequence[PhantomSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked images and class indices (1 for C-Polyp)."""
    if not samples:
        return np.zeros((0,)), np.zeros((0,), dtype=np.int64)
    images = np.stack([s.image for s in samples])
    labels = np.asarray([int(s.has_polyp) for s in samples], dtype=np.int64)
    return images, labels


@dataclass
class TransferResult:
    params: Params
    pretrained: Params
    pretrain: TrainingResult
    finetune: TrainingResult


def pretrain_then_finetune(
    net: NetworkSpec,
    pretrain_data: tuple[np.ndarray, np.ndarray],
    finetune_data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    fine_tune_last_k: int = 2,
    finetune_cfg: Optional[TrainConfig] = None,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> TransferResult:
    """
    Trains every layer on the pretext task, then freezes all but the last
    `fine_tune_last_k` learnable layers and trains on the target task. Frozen
    tensors of the result are the pretrained arrays themselves.
    """
    if len(pretrain_data[0]) == 0 or len(finetune_data[0]) == 0:
        raise DatasetError("pretrain_then_finetune needs non-empty pretext and fine-tune datasets")
    n_learnable = len(net.learnable_nodes())
    if not 0 <= fine_tune_last_k <= n_learnable:
        raise ValueError(f"fine_tune_last_k must be in [0, {n_learnable}], got {fine_tune_last_k}")

    params = init_params(net, Rng(cfg.seed).spawn("init"))
    logger.info(f"Pretraining all {n_learnable} learnable layers on {len(pretrain_data[0])} pretext images")
    pretrain = fit(net.with_frozen(set()), params, pretrain_data, cfg)

    tuned_net = net.fine_tune_tail(fine_tune_last_k)
    frozen = [n.name for n in tuned_net.nodes if n.layer.learnable and n.layer.frozen]
    logger.info(f"Fine-tuning last {fine_tune_last_k} layer(s); frozen: {frozen}")
    finetune = fit(tuned_net, pretrain.params, finetune_data, finetune_cfg or cfg, val=val)
    return TransferResult(params=finetune.params, pretrained=pretrain.params, pretrain=pretrain, finetune=finetune)


def label_from_probs(probs: np.ndarray, tie_break_positive: bool = False) -> tuple[int, float]:
    """Argmax class and its probability. Equal top scores go to class 0 unless `tie_break_positive`."""
    probs = np.asarray(probs, dtype=np.float64)
    top = float(probs.max())
    winners = np.flatnonzero(probs == top)
    if len(winners) > 1:
        index = int(winners[-1]) if tie_break_positive else int(winners[0])
    else:
        index = int(winners[0])
    return index, top


def classify(net: NetworkSpec, params: Params, image: np.ndarray,
             tie_break_positive: bool = False) -> tuple[RecognitionLabel, float]:
    probs, _ = forward(net, params, np.asarray(image)[None])
    index, confidence = label_from_probs(probs[0], tie_break_positive)
    return list(RecognitionLabel)[index], confidence


def classify_batch(net: NetworkSpec, params: Params, images: np.ndarray,
                   tie_break_positive: bool = False) -> list[tuple[RecognitionLabel, float]]:
    labels = list(RecognitionLabel)
    out = []
    for probs in predict(net, params, images):
        index, confidence = label_from_probs(probs, tie_break_positive)
        out.append((labels[index], confidence))
    return out


def screening_metrics(tp: int, fp: int, tn: int, fn: int) -> EvalReport:
    """Sensitivity, specificity, NPV and accuracy; a ratio with a zero denominator is None."""
    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den else None

    return EvalReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        sensitivity=ratio(tp, tp + fn),
        specificity=ratio(tn, tn + fp),
        npv=ratio(tn, tn + fn),
        accuracy=ratio(tp + tn, tp + fp + tn + fn),
    )


def confusion_counts(predicted: Sequence[int], truth: Sequence[int]) -> tuple[int, int, int, int]:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    tp = int(np.sum((predicted == 1) & (truth == 1)))
    fp = int(np.sum((predicted == 1) & (truth == 0)))
    tn = int(np.sum((predicted == 0) & (truth == 0)))
    fn = int(np.sum((predicted == 0) & (truth == 1)))
    return tp, fp, tn, fn


def evaluate(net: NetworkSpec, params: Params, images: np.ndarray, labels: np.ndarray,
             tie_break_positive: bool = False) -> EvalReport:
    if len(images) == 0:
        raise DatasetError("Cannot evaluate on an empty test set")
    predicted = [label_from_probs(p, tie_break_positive)[0] for p in predict(net, params, images)]
    report = screening_metrics(*confusion_counts(predicted, labels))
    logger.info(f"Evaluated {len(images)} images: sensitivity={report.sensitivity} "
                f"specificity={report.specificity} npv={report.npv}",
                extra={"tp": report.tp, "fp": report.fp, "tn": report.tn, "fn": report.fn})
    return report


def normalize_map(magnitude: np.ndarray) -> np.ndarray:
    """Scales a non-negative map by its maximum; a constant map becomes all zeros."""
    top, bottom = float(magnitude.max()), float(magnitude.min())
    if top == bottom or top <= 0.0:
        return np.zeros_like(magnitude)
    return magnitude / top


def saliency_map(net: NetworkSpec, params: Params, image: np.ndarray, class_index: int) -> np.ndarray:
    """
    |d score / d pixel| summed over channels and scaled to [0, 1], where score
    is the network output for `class_index`. Returns an (H, W) map.
    """
    inference_net = net.with_frozen(set(net.learnable_nodes()))
    outputs, cache = forward(inference_net, params, np.asarray(image)[None])
    seed_grad = np.zeros_like(outputs)
    seed_grad[0, class_index] = 1.0
    grads = backward(inference_net, params, cache, seed_grad, want_input_grad=True)
    magnitude = np.abs(grads.input[0]).sum(axis=0)
    return normalize_map(magnitude)
