"""Fixed model reuse: frozen cross-modal branches and the WP -> KD -> WPK schedule.

A frozen embedder runs in parallel with each trainable encoder. A fusion layer
mixes ``[learned || fixed]`` into the coordinated space; during knockdown the
fixed block of the fusion weights is scaled by ``beta``, which ramps linearly
from 1 to 0. Once ``beta`` reaches 0 the fixed branch is no longer evaluated at
all, so the trained network does not depend on the frozen model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .encoders import EncoderConfig, Encoders, ImageSample, Module, VideoTracklet, uniform_param

WP, KD, WPK = "WP", "KD", "WPK"
_ORDER = {WP: 0, KD: 1, WPK: 2}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class FmrStage:
    kind: str
    progress: float = 0.0

    def __post_init__(self):
        if self.kind not in _ORDER:
            raise ValueError(f"unknown FMR stage {self.kind!r}")
        if not 0.0 <= self.progress <= 1.0:
            raise ValueError(f"knockdown progress {self.progress} outside [0, 1]")

    @property
    def beta(self) -> float:
        if self.kind == WP:
            return 1.0
        if self.kind == KD:
            return 1.0 - self.progress
        return 0.0

    def __le__(self, other: "FmrStage") -> bool:
        return (_ORDER[self.kind], self.progress) <= (_ORDER[other.kind], other.progress)


@dataclass(frozen=True)
class FmrSchedule:
    wp_end: int
    kd_end: int
    total_epochs: int

    def __post_init__(self):
        if not (0 < self.wp_end < self.kd_end <= self.total_epochs):
            raise ConfigError(
                f"FMR boundaries must satisfy 0 < wp_end < kd_end <= epochs; got wp_end={self.wp_end}, "
                f"kd_end={self.kd_end}, epochs={self.total_epochs}"
            )

    @classmethod
    def default(cls, total_epochs: int) -> "FmrSchedule":
        return cls(max(1, int(round(0.4 * total_epochs))), max(2, int(round(0.8 * total_epochs))), total_epochs)


def advance_stage(schedule: FmrSchedule, epoch: int) -> FmrStage:
    """Stage for a 0-based ``epoch``."""
    if epoch < schedule.wp_end:
        return FmrStage(WP)
    if epoch < schedule.kd_end:
        return FmrStage(KD, (epoch - schedule.wp_end) / (schedule.kd_end - schedule.wp_end))
    return FmrStage(WPK)


class FixedEmbedder:
    """Frozen function from one modality's raw input to a ``d_f`` vector.

    ``fn`` may be any deterministic callable; the default surrogate built by
    :meth:`surrogate` is a seed-initialised, never-trained copy of the encoder
    architecture. Outputs are memoised per sample key.
    """

    def __init__(self, fn: Callable[[object], np.ndarray], dim: int, identifier: str, seed: int,
                 params: dict[str, Tensor] | None = None):
        self._fn = fn
        self.dim = dim
        self.identifier = identifier
        self.seed = seed
        self.params = params or {}
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def surrogate(cls, modality: str, cfg: EncoderConfig, seed: int, dtype=np.float32) -> "FixedEmbedder":
        rng = np.random.default_rng([seed, 0 if modality == "image" else 1])
        frozen = Encoders.build(cfg, rng, dtype, trainable=False)
        branch = frozen.image if modality == "image" else frozen.video
        return cls(lambda x: branch(x).values, cfg.d, f"surrogate-{modality}-{seed}", seed, branch.parameters())

    def __call__(self, sample: ImageSample | VideoTracklet) -> Tensor:
        key = getattr(sample, "key", None)
        if key is not None and key in self._cache:
            return Tensor(self._cache[key])
        out = np.array(self._fn(sample), copy=True)
        out.setflags(write=False)
        if out.shape != (self.dim,):
            raise ShapeError(f"fixed embedder {self.identifier} produced shape {out.shape}, expected ({self.dim},)")
        if key is not None:
            self._cache[key] = out
        return Tensor(out)


class FusionLayer(Module):
    """``W_l @ learned + beta * W_f @ fixed + b``."""

    def __init__(self, d: int, d_fixed: int, rng: np.random.Generator, dtype=np.float32):
        fan = d + d_fixed
        self.w_learned = uniform_param(rng, (d, d), fan, dtype)
        self.w_fixed = uniform_param(rng, (d, d_fixed), fan, dtype)
        self.bias = uniform_param(rng, (d,), fan, dtype)
        self.beta = 1.0

    def set_stage(self, stage: FmrStage) -> None:
        self.beta = stage.beta


def fuse(learned: Tensor, fixed: Tensor | None, layer: FusionLayer, stage: FmrStage) -> Tensor:
    beta = layer.beta
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"knockdown scale beta={beta} outside [0, 1]")
    if beta != stage.beta:
        raise StageError(f"fusion layer beta={beta} inconsistent with stage {stage.kind} (beta={stage.beta})")
    out = dc.linear(learned, layer.w_learned, layer.bias)
    if stage.kind == WPK or beta == 0.0:
        return out
    if fixed is None:
        raise ValueError(f"stage {stage.kind} needs the fixed-branch embedding")
    if fixed.shape != (layer.w_fixed.shape[1],):
        raise ShapeError(f"fixed embedding shape {fixed.shape} does not match fusion input {layer.w_fixed.shape[1]}")
    contrib = dc.matvec(layer.w_fixed, fixed)
    if beta != 1.0:
        contrib = dc.scale(contrib, beta)
    return dc.add(out, contrib)


def severance_check(network, image: ImageSample, tracklet: VideoTracklet, perturbation: float = 1000.0,
                    seed: int = 0) -> bool:
    """True iff overriding the fixed-branch outputs leaves the network output unchanged.

    Only meaningful once knockdown is complete; earlier stages are rejected
    (use :func:`fixed_branch_delta` for diagnostics there).
    """
    if network.stage.kind != WPK:
        raise StageError(f"severance check requires stage WPK, network is in {network.stage.kind}")
    return fixed_branch_delta(network, image, tracklet, perturbation, seed) == 0.0


def fixed_branch_delta(network, image: ImageSample, tracklet: VideoTracklet, perturbation: float = 1000.0,
                       seed: int = 0) -> float:
    """Max absolute change of every network output when fixed embeddings are perturbed."""
    rng = np.random.default_rng(seed)

    def override(modality: str, value: Tensor) -> Tensor:
        noise = rng.standard_normal(value.shape).astype(value.dtype)
        return Tensor(value.values + value.dtype.type(perturbation) * noise)

    base = network.outputs(image, tracklet)
    moved = network.outputs(image, tracklet, fixed_override=override)
    return float(max(np.max(np.abs(a - b)) for a, b in zip(base, moved)))
