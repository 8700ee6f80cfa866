"""
Forward and backward kernels for every layer kind the engine supports.

All tensors are batched, float64, channels-first: (N, C, H, W) for image
tensors and (N, F) for flat ones. Each kernel is a small class with a
`forward` that returns the output plus whatever it needs to cache, and a
`backward` that maps the output gradient to input gradients and parameter
gradients.
"""
from __future__ import annotations

from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    RELU = "relu"
    MAXPOOL = "maxpool2x2"
    TCONV = "transposed-conv2x2"
    CONCAT = "concat"
    DENSE = "dense"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class Kernel:
    """Interface shared by every layer implementation."""

    def forward(self, layer, params: dict, inputs: list[np.ndarray]):
        raise NotImplementedError

    def backward(self, layer, params: dict, cache, grad: np.ndarray, need_param_grads: bool):
        """Returns (input gradients, parameter gradients)."""
        raise NotImplementedError


def _windows(x: np.ndarray, k: int, pad_before: int, pad_after: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (pad_before, pad_after), (pad_before, pad_after)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


class Conv2D(Kernel):
    def forward(self, layer, params, inputs):
        x = inputs[0]
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        win = _windows(x, k, p, p)[:, :, ::s, ::s]
        out = np.tensordot(win, params["W"], axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + params["b"][None, :, None, None]
        return out, (x.shape, win)

    def backward(self, layer, params, cache, grad, need_param_grads):
        x_shape, win = cache
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        n, c, h, w = x_shape
        hp, wp = h + 2 * p, w + 2 * p

        grads = {}
        if need_param_grads:
            grads["W"] = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
            grads["b"] = grad.sum(axis=(0, 2, 3))

        # Dilate the output gradient back onto the stride grid, then run a full
        # correlation with the flipped kernel over the padded input extent.
        ho, wo = grad.shape[2], grad.shape[3]
        dilated = np.zeros((n, grad.shape[1], (ho - 1) * s + 1, (wo - 1) * s + 1))
        dilated[:, :, ::s, ::s] = grad
        extra_h = hp - (dilated.shape[2] + k - 1)
        extra_w = wp - (dilated.shape[3] + k - 1)
        padded = np.pad(dilated, ((0, 0), (0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w)))
        gwin = sliding_window_view(padded, (k, k), axis=(2, 3))
        flipped = params["W"][:, :, ::-1, ::-1]
        dxp = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return [dxp[:, :, p:p + h, p:p + w]], grads


class ReLU(Kernel):
    def forward(self, layer, params, inputs):
        x = inputs[0]
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, layer, params, cache, grad, need_param_grads):
        return [np.where(cache, grad, 0.0)], {}


class MaxPool2x2(Kernel):
    def forward(self, layer, params, inputs):
        x = inputs[0]
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax takes the first maximum, so ties route the gradient to one input only.
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, layer, params, cache, grad, need_param_grads):
        (n, c, h, w), idx = cache
        blocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return [dx], {}


class TransposedConv2x2(Kernel):
    """Learned 2x upsampling: out[n, o, 2i+a, 2j+b] = sum_c x[n, c, i, j] W[c, o, a, b] + b[o]."""

    def forward(self, layer, params, inputs):
        x = inputs[0]
        n, _, h, w = x.shape
        t = np.tensordot(x, params["W"], axes=([1], [0]))
        out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, -1, 2 * h, 2 * w)
        return out + params["b"][None, :, None, None], x

    def backward(self, layer, params, cache, grad, need_param_grads):
        x = cache
        n, _, h, w = x.shape
        g6 = grad.reshape(n, grad.shape[1], h, 2, w, 2)
        grads = {}
        if need_param_grads:
            grads["W"] = np.tensordot(x, g6, axes=([0, 2, 3], [0, 2, 4]))
            grads["b"] = grad.sum(axis=(0, 2, 3))
        dx = np.tensordot(g6, params["W"], axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return [dx], grads


class Concat(Kernel):
    def forward(self, layer, params, inputs):
        return np.concatenate(inputs, axis=1), [x.shape[1] for x in inputs]

    def backward(self, layer, params, cache, grad, need_param_grads):
        splits = np.cumsum(cache)[:-1]
        return np.split(grad, splits, axis=1), {}


class Dense(Kernel):
    def forward(self, layer, params, inputs):
        x = inputs[0]
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["W"].T + params["b"], (x.shape, flat)

    def backward(self, layer, params, cache, grad, need_param_grads):
        x_shape, flat = cache
        grads = {}
        if need_param_grads:
            grads["W"] = grad.T @ flat
            grads["b"] = grad.sum(axis=0)
        return [(grad @ params["W"]).reshape(x_shape)], grads


class Softmax(Kernel):
    def forward(self, layer, params, inputs):
        z = inputs[0] - inputs[0].max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        return s, s

    def backward(self, layer, params, cache, grad, need_param_grads):
        s = cache
        return [s * (grad - (grad * s).sum(axis=1, keepdims=True))], {}


class Sigmoid(Kernel):
    def forward(self, layer, params, inputs):
        s = expit(inputs[0])
        return s, s

    def backward(self, layer, params, cache, grad, need_param_grads):
        s = cache
        return [grad * s * (1.0 - s)], {}


LAYERS: dict[LayerKind, Kernel] = {
    LayerKind.CONV2D: Conv2D(),
    LayerKind.RELU: ReLU(),
    LayerKind.MAXPOOL: MaxPool2x2(),
    LayerKind.TCONV: TransposedConv2x2(),
    LayerKind.CONCAT: Concat(),
    LayerKind.DENSE: Dense(),
    LayerKind.SOFTMAX: Softmax(),
    LayerKind.SIGMOID: Sigmoid(),
}

LEARNABLE = {LayerKind.CONV2D, LayerKind.TCONV, LayerKind.DENSE}
