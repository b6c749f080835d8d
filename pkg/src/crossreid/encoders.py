"""Image and video encoders.

The image branch is a small conv stack followed by one linear layer. The video
branch runs the same kind of stack on every frame, feeds the per-frame vectors
through a single-layer LSTM, averages the per-step hidden outputs and projects
the average to ``d`` dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import LSTMParams, ShapeError, Tensor


@dataclass
class ImageSample:
    pixels: Tensor  # [C, H, W]
    identity: int
    key: str | None = None


@dataclass
class VideoTracklet:
    frames: list[Tensor]  # each [C, H, W]
    identity: int
    key: str | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a tracklet needs at least one frame")
        first = self.frames[0].shape
        for t, frame in enumerate(self.frames):
            if frame.shape != first:
                raise ShapeError(f"tracklet frame {t} has shape {frame.shape}, frame 0 has {first}")

    def __len__(self) -> int:
        return len(self.frames)


INIT_SCHEMES = ("passthrough", "uniform")

# passthrough init: small random recurrent weights plus an identity path
GATE_SCALE = 0.1
CANDIDATE_GAIN = 0.5
# with near-zero gate pre-activations i = f = o = 1/2, so over a short sequence
# the mean hidden output is roughly 0.4 * CANDIDATE_GAIN * x
LSTM_PASSTHROUGH_GAIN = 0.4 * CANDIDATE_GAIN


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the conv stacks, LSTM and projections.

    ``channels``, ``kernels``, ``strides`` and ``pools`` describe one conv
    layer per entry (conv -> ReLU -> non-overlapping max pool; pool 1 means no
    pooling).

    ``init="uniform"`` draws every parameter from U(-a, a), a = sqrt(1/fan_in).
    ``init="passthrough"`` does the same for the conv stacks but starts the
    LSTM and the video projection close to an identity map, so the video
    feature begins in the same space as the image feature.
    """

    d: int = 64
    in_channels: int = 3
    resolution: int = 32
    channels: tuple[int, ...] = (8, 16)
    kernels: tuple[int, ...] = (3, 3)
    strides: tuple[int, ...] = (1, 1)
    pools: tuple[int, ...] = (2, 2)
    share_cnn: bool = True
    init: str = "passthrough"

    def __post_init__(self):
        n = len(self.channels)
        if not (len(self.kernels) == len(self.strides) == len(self.pools) == n) or n == 0:
            raise ValueError("channels, kernels, strides and pools must have the same non-zero length")
        if self.d <= 0 or self.resolution <= 0 or self.in_channels <= 0:
            raise ValueError("d, resolution and in_channels must be positive")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init!r}; expected one of {INIT_SCHEMES}")
        self.trunk_output_shape()  # validates that every layer fits

    def trunk_output_shape(self) -> tuple[int, int, int]:
        h = w = self.resolution
        c = self.in_channels
        for layer, (ch, k, s, p) in enumerate(zip(self.channels, self.kernels, self.strides, self.pools)):
            if k > h:
                raise ValueError(f"conv layer {layer}: kernel {k} exceeds feature map {h}x{w}")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            if p > h:
                raise ValueError(f"conv layer {layer}: pool {p} exceeds feature map {h}x{w}")
            h, w, c = h // p, w // p, ch
        return c, h, w

    def as_dict(self) -> dict:
        return {
            "d": self.d, "in_channels": self.in_channels, "resolution": self.resolution,
            "channels": list(self.channels), "kernels": list(self.kernels),
            "strides": list(self.strides), "pools": list(self.pools), "share_cnn": self.share_cnn, "init": self.init,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderConfig":
        return cls(
            d=int(raw["d"]), in_channels=int(raw["in_channels"]), resolution=int(raw["resolution"]),
            channels=tuple(raw["channels"]), kernels=tuple(raw["kernels"]),
            strides=tuple(raw["strides"]), pools=tuple(raw["pools"]), share_cnn=bool(raw["share_cnn"]),
            init=raw.get("init", "uniform"),
        )


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype, trainable=True, name=None) -> Tensor:
    a = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=trainable, name=name)


class Module:
    """Anything that owns named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, LSTMParams):
                for sub in ("w_x", "w_h", "b"):
                    yield f"{full}.{sub}", getattr(value, sub)
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        for name, t in self.named_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype, trainable=True, fan_in: int | None = None):
        fan = fan_in or n_in
        self.weight = uniform_param(rng, (n_out, n_in), fan, dtype, trainable)
        self.bias = uniform_param(rng, (n_out,), fan, dtype, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.weight, self.bias)


class ConvLayer(Module):
    def __init__(self, c_in, c_out, kernel, stride, pool, rng, dtype, trainable=True):
        fan = c_in * kernel * kernel
        self.kernel = uniform_param(rng, (c_out, c_in, kernel, kernel), fan, dtype, trainable)
        self.bias = uniform_param(rng, (c_out,), fan, dtype, trainable)
        self.stride = stride
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        return dc.max_pool2d(dc.relu(dc.conv2d(x, self.kernel, self.bias, self.stride)), self.pool)


class ConvTrunk(Module):
    """Conv stack plus the linear layer that maps the flattened map to ``d``."""

    def __init__(self, cfg: EncoderConfig, rng, dtype, trainable=True):
        self.cfg = cfg
        self.layers = []
        c = cfg.in_channels
        for ch, k, s, p in zip(cfg.channels, cfg.kernels, cfg.strides, cfg.pools):
            self.layers.append(ConvLayer(c, ch, k, s, p, rng, dtype, trainable))
            c = ch
        flat = int(np.prod(cfg.trunk_output_shape()))
        self.fc = Linear(flat, cfg.d, rng, dtype, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        expected = (self.cfg.in_channels, self.cfg.resolution, self.cfg.resolution)
        if x.shape != expected:
            raise ShapeError(f"encoder expects input of shape {expected}, got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return self.fc(dc.flatten(x))


def lstm_params(n_in: int, d: int, rng, dtype, trainable=True) -> LSTMParams:
    return LSTMParams(
        w_x=uniform_param(rng, (4 * d, n_in), n_in, dtype, trainable),
        w_h=uniform_param(rng, (4 * d, d), d, dtype, trainable),
        b=uniform_param(rng, (4 * d,), d, dtype, trainable),
    )


class ImageEncoder(Module):
    def __init__(self, trunk: ConvTrunk):
        self.trunk = trunk

    def __call__(self, sample: ImageSample) -> Tensor:
        return self.trunk(sample.pixels)


class VideoEncoder(Module):
    def __init__(self, trunk: ConvTrunk, lstm: LSTMParams, proj: Linear):
        self.trunk = trunk
        self.lstm = lstm
        self.proj = proj

    def frame_features(self, tracklet: VideoTracklet) -> list[Tensor]:
        return [self.trunk(frame) for frame in tracklet.frames]

    def aggregate(self, feats: list[Tensor]) -> Tensor:
        d = self.lstm.hidden
        dtype = self.lstm.b.dtype
        h = Tensor(np.zeros(d, dtype=dtype))
        c = Tensor(np.zeros(d, dtype=dtype))
        outputs = []
        for x in feats:
            h, c = dc.lstm_step(x, h, c, self.lstm)
            outputs.append(h)
        return self.proj(dc.stack_mean(outputs))

    def __call__(self, tracklet: VideoTracklet) -> Tensor:
        if len(tracklet.frames) == 0:
            raise ValueError("cannot encode an empty tracklet")
        return self.aggregate(self.frame_features(tracklet))


@dataclass
class Encoders(Module):
    image: ImageEncoder
    video: VideoEncoder
    cfg: EncoderConfig = field(repr=False, default=None)

    @classmethod
    def build(cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32, trainable=True) -> "Encoders":
        image_trunk = ConvTrunk(cfg, rng, dtype, trainable)
        frame_trunk = image_trunk if cfg.share_cnn else ConvTrunk(cfg, rng, dtype, trainable)
        lstm = lstm_params(cfg.d, cfg.d, rng, dtype, trainable)
        proj = Linear(cfg.d, cfg.d, rng, dtype, trainable)
        if cfg.init == "passthrough":
            _passthrough(lstm, proj, cfg.d)
        return cls(ImageEncoder(image_trunk), VideoEncoder(frame_trunk, lstm, proj), cfg)


def _passthrough(lstm: LSTMParams, proj: Linear, d: int) -> None:
    dtype = lstm.b.dtype
    eye = np.eye(d, dtype=dtype)
    for t in (lstm.w_x, lstm.w_h, lstm.b, proj.weight, proj.bias):
        t.values *= dtype.type(GATE_SCALE)
    lstm.w_x.values[2 * d:3 * d] += dtype.type(CANDIDATE_GAIN) * eye
    proj.weight.values += eye / dtype.type(LSTM_PASSTHROUGH_GAIN)


def encode_image(sample: ImageSample, encoders: Encoders) -> Tensor:
    return encoders.image(sample)


def encode_video(tracklet: VideoTracklet, encoders: Encoders) -> Tensor:
    return encoders.video(tracklet)
