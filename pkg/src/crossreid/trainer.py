"""Plain-SGD training loop, one image/video pair per step."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import SampleStore, SplitPlan, sample_epoch
from .diffcore import NonFiniteError, Tape
from .encoders import EncoderConfig
from .fmr import FmrSchedule, FmrStage, advance_stage
from .verid import LossBreakdown, ReidNetwork, combined_loss, forward_pair

log = logging.getLogger(__name__)

FORMAT = "crossreid-train-state"
LOSS_COLUMNS = ["epoch", "L", "L_v", "L_ii", "L_iv", "stage", "beta"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    precision: str = "float32"
    seed: int = 0
    fmr_enabled: bool = True
    wp_end: int | None = None
    kd_end: int | None = None
    fixed_seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.fmr_enabled:
            self.schedule()

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def schedule(self) -> FmrSchedule:
        default = FmrSchedule.default(self.epochs)
        wp = default.wp_end if self.wp_end is None else self.wp_end
        kd = default.kd_end if self.kd_end is None else self.kd_end
        return FmrSchedule(wp, kd, self.epochs)


@dataclass
class TrainState:
    """Everything needed to resume: epochs completed, network, loss history."""

    epoch: int
    network: ReidNetwork
    config: TrainConfig
    split: SplitPlan
    history: list[tuple[int, LossBreakdown, str, float]] = field(default_factory=list)

    @property
    def stage(self) -> FmrStage:
        return self.network.stage

    def epoch_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self.split.trial, epoch])


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """In-place ``p -= lr * g``; nothing is modified if any gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}; step aborted")
    for name, p in params.items():
        g = grads[name]
        p -= p.dtype.type(lr) * g
    return params


def new_state(config: TrainConfig, split: SplitPlan, encoder_cfg: EncoderConfig) -> TrainState:
    net = ReidNetwork(encoder_cfg, len(split.train), config.seed, config.dtype,
                      fmr_enabled=config.fmr_enabled, fixed_seed=config.fixed_seed)
    return TrainState(0, net, config, split)


def stage_for(config: TrainConfig, epoch: int) -> FmrStage:
    if not config.fmr_enabled:
        return FmrStage("WPK")
    return advance_stage(config.schedule(), epoch)


def train_epoch(state: TrainState, store: SampleStore) -> LossBreakdown:
    net = state.network
    epoch = state.epoch
    net.set_stage(stage_for(state.config, epoch))
    params = net.trainable()
    values = {name: t.values for name, t in params.items()}
    rows = []
    for i, pair in enumerate(sample_epoch(state.split, store, state.epoch_rng(epoch))):
        for t in params.values():
            t.zero_grad()
        with Tape() as tape:
            out = forward_pair(pair.image, pair.tracklet, net, pair.same)
            if not np.isfinite(out.loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, pair {i}")
            tape.backward(out.loss)
        try:
            sgd_step(values, {name: t.grad for name, t in params.items()}, state.config.lr)
        except NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch + 1}, pair {i}: {exc}") from exc
        rows.append(out.breakdown)
    mean = combined_loss(*(float(np.mean([getattr(r, f) for r in rows])) for f in ("L_v", "L_ii", "L_iv")))
    state.epoch += 1
    state.history.append((state.epoch, mean, net.stage.kind, net.stage.beta))
    return mean


def train(config: TrainConfig, store: SampleStore, split: SplitPlan, encoder_cfg: EncoderConfig,
          out_dir: str | Path | None = None, state: TrainState | None = None,
          stop_at: int | None = None) -> TrainState:
    """Train (or resume) until ``stop_at`` (default: ``config.epochs``) epochs are complete.

    With ``out_dir`` the per-epoch loss rows go to ``loss.csv`` and checkpoints
    ``ckpt_<epoch>`` are written every ``checkpoint_every`` epochs and at the end.
    """
    if len(split.train) < 2:
        raise TrainingError("training needs at least two training identities")
    state = state or new_state(config, split, encoder_cfg)
    target = config.epochs if stop_at is None else min(stop_at, config.epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_path = out / "loss.csv"
        if state.epoch == 0 or not loss_path.exists():
            with open(loss_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_COLUMNS)
    while state.epoch < target:
        mean = train_epoch(state, store)
        log.info("epoch %d L=%.6f stage=%s", state.epoch, mean.L, state.network.stage.kind)
        if out is not None:
            with open(out / "loss.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(loss_row(state.history[-1]))
            every = config.checkpoint_every
            if (every and state.epoch % every == 0) or state.epoch == target:
                save_state(state, out / f"ckpt_{state.epoch}")
    return state


def loss_row(entry: tuple[int, LossBreakdown, str, float]) -> list[str]:
    epoch, b, stage, beta = entry
    return [str(epoch), repr(b.L), repr(b.L_v), repr(b.L_ii), repr(b.L_iv), stage, repr(beta)]


# ---------------------------------------------------------------- persistence


def state_header(state: TrainState) -> dict:
    net, cfg = state.network, state.config
    return {
        "format": FORMAT,
        "encoder": net.cfg.as_dict(),
        "d": net.cfg.d,
        "num_identities": net.num_identities,
        "seed": cfg.seed,
        "fixed_seed": cfg.fixed_seed,
        "train_config": {
            "epochs": cfg.epochs, "lr": cfg.lr, "precision": cfg.precision, "seed": cfg.seed,
            "fmr_enabled": cfg.fmr_enabled, "wp_end": cfg.wp_end, "kd_end": cfg.kd_end,
            "fixed_seed": cfg.fixed_seed, "checkpoint_every": cfg.checkpoint_every,
        },
        "epoch": state.epoch,
        "stage": net.stage.kind,
        "kd_progress": net.stage.progress,
        "rng": {"kind": "per-epoch", "entropy": [cfg.seed, state.split.trial]},
        "split": {"trial": state.split.trial, "seed": state.split.seed,
                  "train": list(state.split.train), "test": list(state.split.test)},
        "history": [loss_row(h) for h in state.history],
    }


def save_state(state: TrainState, path: str | Path) -> Path:
    arrays = {name: t.values for name, t in state.network.trainable().items()}
    return checkpoint.save(path, arrays, state_header(state))


def load_state(path: str | Path) -> TrainState:
    header, arrays = checkpoint.load(path)
    if header.get("format") != FORMAT:
        raise checkpoint.CheckpointError(f"{path}: not a training checkpoint")
    tc = TrainConfig(**header["train_config"])
    enc = EncoderConfig.from_dict(header["encoder"])
    sp = header["split"]
    split = SplitPlan(sp["trial"], tuple(sp["train"]), tuple(sp["test"]), sp["seed"])
    net = ReidNetwork(enc, header["num_identities"], tc.seed, tc.dtype,
                      fmr_enabled=tc.fmr_enabled, fixed_seed=tc.fixed_seed)
    params = net.trainable()
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise checkpoint.CheckpointError(f"{path}: parameter set mismatch ({sorted(missing)[:3]} ...)")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise checkpoint.CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.values = arrays[name].astype(tc.dtype, copy=True)
        t.zero_grad()
    net.set_stage(FmrStage(header["stage"], header["kd_progress"]))
    history = []
    for row in header["history"]:
        b = combined_loss(float(row[2]), float(row[3]), float(row[4]))
        history.append((int(row[0]), b, row[5], float(row[6])))
    return TrainState(header["epoch"], net, tc, split, history)
