"""Finite-difference checks for every differentiable op and for the full pair loss."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import GradCheckReport, LSTMParams, Tensor, grad_check
from .encoders import EncoderConfig, ImageSample, VideoTracklet
from .fmr import FmrStage
from .verid import ReidNetwork, forward_pair

OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4

TINY = EncoderConfig(d=4, resolution=8, channels=(2, 3), kernels=(3, 2), strides=(1, 1), pools=(2, 1))


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, tuple]:
    """(function, inputs) per op, on random float64 inputs."""
    rng = np.random.default_rng(seed)
    d, n = 3, 5
    lstm = [_param(rng, 4 * d, n), _param(rng, 4 * d, d), _param(rng, 4 * d)]
    # pooled values spaced apart so no finite-difference step crosses a tie
    pool_in = Tensor(rng.permutation(2 * 5 * 4).reshape(2, 5, 4) * 0.1 + rng.uniform(-0.01, 0.01, (2, 5, 4)),
                     requires_grad=True)
    relu_in = rng.normal(size=7)
    relu_in = Tensor(np.where(np.abs(relu_in) < 0.05, 0.1, relu_in), requires_grad=True)
    return {
        "conv2d": (lambda x, k, b: dc.conv2d(x, k, b, 1), [_param(rng, 1, 5, 5), _param(rng, 2, 1, 3, 3), _param(rng, 2)]),
        "conv2d_stride2": (lambda x, k, b: dc.conv2d(x, k, b, 2), [_param(rng, 2, 7, 6), _param(rng, 3, 2, 3, 2),
                                                                     _param(rng, 3)]),
        "linear": (dc.linear, [_param(rng, 3), _param(rng, 4, 3), _param(rng, 4)]),
        "lstm_step": (
            lambda x, h, c, wx, wh, b: dc.concat(list(dc.lstm_step(x, h, c, LSTMParams(wx, wh, b)))),
            [_param(rng, n), _param(rng, d), _param(rng, d)] + lstm,
        ),
        "softmax": (dc.softmax, [_param(rng, 5)]),
        "log": (dc.log, [Tensor(rng.uniform(0.2, 2.0, size=6), requires_grad=True)]),
        "sigmoid": (dc.sigmoid, [_param(rng, 6)]),
        "tanh": (dc.tanh, [_param(rng, 6)]),
        "relu": (dc.relu, [relu_in]),
        "max_pool2d": (lambda x: dc.max_pool2d(x, 2), [pool_in]),
        "square_diff": (lambda a, b: dc.square(dc.sub(a, b)), [_param(rng, 4), _param(rng, 4)]),
        "mul": (dc.mul, [_param(rng, 4), _param(rng, 4)]),
        "stack_mean": (lambda a, b, c: dc.stack_mean([a, b, c]), [_param(rng, 3), _param(rng, 3), _param(rng, 3)]),
        "take_concat": (lambda a, b: dc.concat([dc.take(a, slice(1, 3)), b]), [_param(rng, 4), _param(rng, 2)]),
        "flatten": (dc.flatten, [_param(rng, 2, 3, 2)]),
    }


def run_op_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: grad_check(fn, inputs, OP_TOLERANCE) for name, (fn, inputs) in op_cases(seed).items()}


def tiny_pair(seed: int = 0, frames: int = 2, cfg: EncoderConfig = TINY) -> tuple[ImageSample, VideoTracklet]:
    rng = np.random.default_rng([seed, 99])
    shape = (cfg.in_channels, cfg.resolution, cfg.resolution)
    image = ImageSample(Tensor(rng.normal(size=shape)), 0, key="tiny/image")
    tracklet = VideoTracklet([Tensor(rng.normal(size=shape)) for _ in range(frames)], 1, key="tiny/video")
    return image, tracklet


def tiny_network(seed: int = 0, stage: FmrStage = FmrStage("KD", 0.5), fmr: bool = True) -> ReidNetwork:
    net = ReidNetwork(TINY, 2, seed, np.float64, fmr_enabled=fmr, fixed_seed=seed + 1)
    net.set_stage(stage)
    return net


def end_to_end(seed: int = 0, same: bool = False, stage: FmrStage = FmrStage("KD", 0.5)) -> GradCheckReport:
    """Gradient of the combined pair loss w.r.t. every trainable parameter of the tiny network."""
    net = tiny_network(seed, stage)
    image, tracklet = tiny_pair(seed)
    params = net.trainable()

    def loss(**_):
        return forward_pair(image, tracklet, net, same).loss

    return grad_check(loss, params, END_TO_END_TOLERANCE, seed=seed)
