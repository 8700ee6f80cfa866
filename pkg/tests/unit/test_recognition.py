import random
from fractions import Fraction

import numpy as np
import pytest

from app.errors import DatasetError
from app.models import RecognitionLabel
from app.nn.layers import LayerKind
from app.nn.network import LossKind, NetworkSpec, Node, dense, forward, init_params, simple
from app.nn.rng import Rng
from app.nn.train import TrainConfig
from app.services.recognition import (
    build_toy_cnn,
    classify,
    confusion_counts,
    evaluate,
    label_from_probs,
    normalize_map,
    pretrain_then_finetune,
    saliency_map,
    screening_metrics,
)


def _tiny_data(n, seed):
    rng = Rng(seed)
    return rng.uniform((n, 3, 8, 8)), np.arange(n) % 2


def test_screening_metrics_worked_example():
    report = screening_metrics(tp=8, fp=1, tn=9, fn=2)
    assert report.sensitivity == pytest.approx(0.8)
    assert report.specificity == pytest.approx(0.9)
    assert report.npv == pytest.approx(9 / 11)
    assert report.accuracy == pytest.approx(17 / 20)


def test_screening_metrics_match_exact_rationals():
    rnd = random.Random(0)
    for _ in range(10_000):
        tp, fp, tn, fn = (rnd.randint(0, 50) for _ in range(4))
        report = screening_metrics(tp, fp, tn, fn)
        for value, num, den in (
            (report.sensitivity, tp, tp + fn),
            (report.specificity, tn, tn + fp),
            (report.npv, tn, tn + fn),
        ):
            if den == 0:
                assert value is None
            else:
                assert abs(Fraction(value) - Fraction(num, den)) < Fraction(1, 10**12)


def test_undefined_ratios_are_none():
    report = screening_metrics(tp=0, fp=0, tn=5, fn=0)
    assert report.sensitivity is None
    assert report.specificity == 1.0
    assert report.npv == 1.0


def test_confusion_counts():
    assert confusion_counts([1, 1, 0, 0, 1], [1, 0, 0, 1, 1]) == (2, 1, 1, 1)


@pytest.mark.parametrize(
    "probs, tie_break_positive, expected",
    [
        ([0.1, 0.9], False, (1, 0.9)),
        ([0.7, 0.3], False, (0, 0.7)),
        ([0.5, 0.5], False, (0, 0.5)),  # ties go to No-C-Polyp
        ([0.5, 0.5], True, (1, 0.5)),   # unless configured otherwise
    ],
)
def test_label_from_probs(probs, tie_break_positive, expected):
    assert label_from_probs(np.array(probs), tie_break_positive) == expected


def test_monotone_transform_of_logits_keeps_the_label():
    rng = Rng(4)
    for _ in range(100):
        logits = rng.normal(2)
        if logits[0] == logits[1]:
            continue
        for transformed in (logits, 3 * logits + 1, np.exp(logits)):
            probs = np.exp(transformed - transformed.max())
            probs /= probs.sum()
            assert label_from_probs(probs)[0] == int(np.argmax(logits))


def test_toy_cnn_shape():
    net = build_toy_cnn(64)
    assert net.output_shape == (2,)
    assert net.learnable_nodes() == ["conv1", "conv2", "conv3", "fc1", "fc2"]
    with pytest.raises(ValueError):
        build_toy_cnn(60)


def test_classify_returns_a_label_and_its_probability():
    net = build_toy_cnn(8)
    params = init_params(net, Rng(0))
    label, confidence = classify(net, params, np.zeros((3, 8, 8)))
    assert isinstance(label, RecognitionLabel)
    assert 0.5 <= confidence <= 1.0


@pytest.mark.parametrize("k", [0, 2, 5])
def test_fine_tuning_leaves_frozen_layers_bitwise_unchanged(k):
    net = build_toy_cnn(8)
    cfg = TrainConfig(initial_lr=0.05, max_epochs=1, batch_size=3, seed=1)
    result = pretrain_then_finetune(net, _tiny_data(6, 0), _tiny_data(6, 1), cfg, fine_tune_last_k=k)
    learnable = net.learnable_nodes()
    frozen = learnable[:len(learnable) - k]
    for name in frozen:
        for key in ("W", "b"):
            assert result.params[name][key].tobytes() == result.pretrained[name][key].tobytes()
    for name in learnable[len(learnable) - k:]:
        assert result.params[name]["W"].tobytes() != result.pretrained[name]["W"].tobytes()


def test_fine_tune_depth_is_bounded():
    net = build_toy_cnn(8)
    with pytest.raises(ValueError):
        pretrain_then_finetune(net, _tiny_data(2, 0), _tiny_data(2, 1), TrainConfig(), fine_tune_last_k=6)


def test_evaluate_on_empty_set_is_rejected():
    net = build_toy_cnn(8)
    with pytest.raises(DatasetError):
        evaluate(net, init_params(net, Rng(0)), np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))


def _linear(bias=(0.0, 0.0), softmax=False):
    nodes = [Node(name="fc", layer=dense(6, 2), inputs=("input",))]
    if softmax:
        nodes.append(Node(name="softmax", layer=simple(LayerKind.SOFTMAX), inputs=("fc",)))
    net = NetworkSpec(input_shape=(1, 2, 3), nodes=tuple(nodes), output=nodes[-1].name,
                      loss=LossKind.CROSS_ENTROPY if softmax else LossKind.MSE)
    params = {"fc": {"W": np.array([[1.0, -2.0, 0.5, 0.0, 4.0, -1.0], [0.3, 0.1, 0.0, 2.0, 0.0, 0.2]]),
                     "b": np.array(bias)}}
    return net, params


def test_saliency_of_a_linear_score_is_proportional_to_the_weights():
    net, params = _linear()
    heat = saliency_map(net, params, Rng(0).uniform((1, 2, 3)), class_index=0)
    expected = np.abs(params["fc"]["W"][0]).reshape(2, 3) / 4.0
    assert np.allclose(heat, expected)
    assert heat.max() == 1.0


def test_saliency_of_a_constant_network_is_all_zero():
    net, params = _linear()
    params["fc"]["W"] = np.zeros_like(params["fc"]["W"])
    assert not saliency_map(net, params, np.ones((1, 2, 3)), 1).any()


def test_saliency_ignores_a_common_logit_shift():
    image = Rng(2).uniform((1, 2, 3))
    net, a = _linear(softmax=True)
    _, b = _linear(bias=(5.0, 5.0), softmax=True)
    assert np.allclose(saliency_map(net, a, image, 1), saliency_map(net, b, image, 1), atol=1e-9)


def test_saliency_leaves_parameters_untouched():
    net = build_toy_cnn(8)
    params = init_params(net, Rng(1))
    before = {n: t["W"].copy() for n, t in params.items()}
    heat = saliency_map(net, params, Rng(3).uniform((3, 8, 8)), 1)
    assert heat.shape == (8, 8)
    assert heat.min() >= 0.0 and heat.max() <= 1.0
    assert all(np.array_equal(params[n]["W"], before[n]) for n in params)
    assert forward(net, params, np.zeros((1, 3, 8, 8)))[0].shape == (1, 2)


def test_normalize_map_of_a_constant_is_zero():
    assert not normalize_map(np.full((3, 3), 2.0)).any()
