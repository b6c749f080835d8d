"""Verification-identification heads, the square layer and the pair loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .encoders import GATE_SCALE, EncoderConfig, Encoders, ImageSample, Linear, Module, VideoTracklet
from .fmr import WP, FixedEmbedder, FmrStage, FusionLayer, fuse

IDENTIFICATION_WEIGHT = 0.5


def identification_loss(dist: Tensor, target: int) -> Tensor:
    """Cross-entropy of a predicted identity distribution against a one-hot target."""
    k = dist.shape[0]
    if not 0 <= target < k:
        raise ValueError(f"target identity {target} outside [0, {k})")
    return dc.scale(dc.log(dc.take(dist, target)), -1.0)


def verification_loss(dist: Tensor, same: bool) -> Tensor:
    """Cross-entropy of the 2-way same/different prediction; index 0 means "same"."""
    if dist.shape != (2,):
        raise ShapeError(f"verification distribution must have shape (2,), got {dist.shape}")
    return dc.scale(dc.log(dc.take(dist, 0 if same else 1)), -1.0)


def square_layer(f_i: Tensor, f_v: Tensor) -> Tensor:
    if f_i.shape != f_v.shape:
        raise ShapeError(f"square layer inputs differ in shape: {f_i.shape} vs {f_v.shape}")
    return dc.square(dc.sub(f_i, f_v))


@dataclass(frozen=True)
class LossBreakdown:
    L_v: float
    L_ii: float
    L_iv: float
    L: float

    def as_row(self) -> list[float]:
        return [self.L, self.L_v, self.L_ii, self.L_iv]


def combined_loss(L_v: float, L_ii: float, L_iv: float) -> LossBreakdown:
    parts = {"L_v": float(L_v), "L_ii": float(L_ii), "L_iv": float(L_iv)}
    for name, value in parts.items():
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"{name}={value} must be finite and non-negative")
    total = parts["L_v"] + IDENTIFICATION_WEIGHT * parts["L_ii"] + IDENTIFICATION_WEIGHT * parts["L_iv"]
    return LossBreakdown(parts["L_v"], parts["L_ii"], parts["L_iv"], total)


@dataclass
class PairOutput:
    f_i: Tensor
    f_v: Tensor
    p_image: Tensor
    p_video: Tensor
    q: Tensor
    loss: Tensor | None = None
    breakdown: LossBreakdown | None = None


FixedOverride = Callable[[str, Tensor], Tensor]


class ReidNetwork(Module):
    """Encoders, optional FMR fusion, shared identity classifier and verification head."""

    def __init__(self, cfg: EncoderConfig, num_identities: int, seed: int, dtype=np.float32,
                 fmr_enabled: bool = True, fixed_seed: int = 0):
        if num_identities < 2:
            raise ValueError("need at least two training identities")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.num_identities = num_identities
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.encoders = Encoders.build(cfg, rng, self.dtype)
        self.fmr_enabled = fmr_enabled
        self.fixed_seed = fixed_seed
        if fmr_enabled:
            self.fuse_image = FusionLayer(cfg.d, cfg.d, rng, self.dtype)
            self.fuse_video = FusionLayer(cfg.d, cfg.d, rng, self.dtype)
        self.classifier = Linear(cfg.d, num_identities, rng, self.dtype)
        self.verifier = Linear(cfg.d, 2, rng, self.dtype)
        if cfg.init == "passthrough":
            self._passthrough_heads()
        self.fixed_image: FixedEmbedder | None = None
        self.fixed_video: FixedEmbedder | None = None
        self.stage = FmrStage(WP)
        if fmr_enabled:
            self.attach_fixed(
                FixedEmbedder.surrogate("image", cfg, fixed_seed, self.dtype),
                FixedEmbedder.surrogate("video", cfg, fixed_seed, self.dtype),
            )

    def _passthrough_heads(self) -> None:
        # verifier starts as "same iff squared distance is small"; fusion starts as identity on the learned path
        d = self.cfg.d
        small = self.dtype.type(GATE_SCALE)
        self.verifier.weight.values *= small
        self.verifier.weight.values[0] -= self.dtype.type(1.0 / d)
        self.verifier.weight.values[1] += self.dtype.type(1.0 / d)
        if self.fmr_enabled:
            for layer in (self.fuse_image, self.fuse_video):
                layer.w_learned.values *= small
                layer.w_learned.values += np.eye(d, dtype=self.dtype)
                layer.bias.values *= small

    # ------------------------------------------------------------ FMR plumbing

    def attach_fixed(self, image: FixedEmbedder, video: FixedEmbedder) -> None:
        self.fixed_image, self.fixed_video = image, video

    def set_stage(self, stage: FmrStage) -> None:
        self.stage = stage
        if self.fmr_enabled:
            self.fuse_image.set_stage(stage)
            self.fuse_video.set_stage(stage)

    def _fixed(self, modality: str, sample, override: FixedOverride | None) -> Tensor:
        embedder = self.fixed_image if modality == "image" else self.fixed_video
        if embedder is None:
            raise RuntimeError(f"stage {self.stage.kind} needs a fixed {modality} embedder but none is attached")
        value = embedder(sample)
        return override(modality, value) if override is not None else value

    # ------------------------------------------------------------ forward

    def image_feature(self, image: ImageSample, fixed_override: FixedOverride | None = None) -> Tensor:
        learned = self.encoders.image(image)
        if not self.fmr_enabled:
            return learned
        fixed = None if self.stage.beta == 0.0 else self._fixed("image", image, fixed_override)
        return fuse(learned, fixed, self.fuse_image, self.stage)

    def video_feature(self, tracklet: VideoTracklet, fixed_override: FixedOverride | None = None) -> Tensor:
        learned = self.encoders.video(tracklet)
        if not self.fmr_enabled:
            return learned
        fixed = None if self.stage.beta == 0.0 else self._fixed("video", tracklet, fixed_override)
        return fuse(learned, fixed, self.fuse_video, self.stage)

    def identify(self, f: Tensor) -> Tensor:
        return dc.softmax(self.classifier(f))

    def verify(self, f_i: Tensor, f_v: Tensor) -> Tensor:
        return dc.softmax(self.verifier(square_layer(f_i, f_v)))

    def outputs(self, image: ImageSample, tracklet: VideoTracklet,
                fixed_override: FixedOverride | None = None) -> tuple[np.ndarray, ...]:
        f_i = self.image_feature(image, fixed_override)
        f_v = self.video_feature(tracklet, fixed_override)
        q = self.verify(f_i, f_v)
        return f_i.values, f_v.values, self.identify(f_i).values, self.identify(f_v).values, q.values

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.parameters().items() if t.requires_grad}


def forward_pair(image: ImageSample, tracklet: VideoTracklet, network: ReidNetwork,
                 same: bool | None = None, with_loss: bool = True) -> PairOutput:
    """Run both branches and all three heads on one image/video pair.

    With ``with_loss`` the identity labels of the samples are used as
    classifier targets and ``same`` defaults to whether those labels match.
    """
    f_i = network.image_feature(image)
    f_v = network.video_feature(tracklet)
    p_image = network.identify(f_i)
    p_video = network.identify(f_v)
    q = network.verify(f_i, f_v)
    out = PairOutput(f_i, f_v, p_image, p_video, q)
    if not with_loss:
        return out
    if same is None:
        same = image.identity == tracklet.identity
    l_ii = identification_loss(p_image, image.identity)
    l_iv = identification_loss(p_video, tracklet.identity)
    l_v = verification_loss(q, same)
    w = IDENTIFICATION_WEIGHT
    out.loss = dc.add(l_v, dc.add(dc.scale(l_ii, w), dc.scale(l_iv, w)))
    out.breakdown = combined_loss(l_v.item(), l_ii.item(), l_iv.item())
    return out
