"""Image-to-video retrieval scoring and CMC curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SampleStore, SplitPlan
from .encoders import ImageSample, VideoTracklet
from .verid import ReidNetwork, square_layer

SCORE_MODES = ("verification", "distance")
TABLE_RANKS = (1, 5, 10, 20)


class EvaluationError(ValueError):
    pass


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # [probes, gallery], higher = more similar
    truth: np.ndarray  # ground-truth gallery column per probe

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.size == 0:
            raise EvaluationError(f"score matrix must be a non-empty 2-D array, got shape {self.scores.shape}")
        if self.truth.shape != (self.scores.shape[0],):
            raise EvaluationError("need exactly one ground-truth column per probe")
        if np.any(self.truth < 0) or np.any(self.truth >= self.scores.shape[1]):
            raise EvaluationError("ground-truth column outside the gallery")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("score matrix contains non-finite entries")


@dataclass
class CmcCurve:
    values: np.ndarray  # values[m-1] = CMC(m)
    trials: int = 1
    per_trial: list[np.ndarray] = field(default_factory=list)

    def rank(self, m: int) -> float:
        return float(self.values[m - 1])

    def __len__(self) -> int:
        return len(self.values)


def ranks(scores: ScoreMatrix) -> np.ndarray:
    """1-based rank of each probe's true match; equal scores rank by ascending column."""
    s = scores.scores
    rows = np.arange(s.shape[0])
    gt = s[rows, scores.truth][:, None]
    cols = np.arange(s.shape[1])[None, :]
    better = (s > gt) | ((s == gt) & (cols < scores.truth[:, None]))
    return better.sum(axis=1) + 1


def cmc(scores: ScoreMatrix) -> CmcCurve:
    r = ranks(scores)
    g = scores.scores.shape[1]
    counts = np.bincount(r, minlength=g + 1)[1:]
    values = np.cumsum(counts) / len(r)
    return CmcCurve(values, 1, [values])


def average_curves(curves: list[CmcCurve]) -> CmcCurve:
    if not curves:
        raise EvaluationError("no curves to average")
    lengths = {len(c) for c in curves}
    if len(lengths) != 1:
        raise EvaluationError(f"curves have different gallery sizes {sorted(lengths)}")
    per_trial = [c.values for c in curves]
    return CmcCurve(np.mean(np.stack(per_trial), axis=0), len(curves), per_trial)


def _score(network: ReidNetwork, f_i, f_v, mode: str) -> float:
    if mode == "verification":
        # softmax in float64 so near-saturated probabilities do not collapse into ties
        logits = network.verifier(square_layer(f_i, f_v)).values.astype(np.float64)
        return float(1.0 / (1.0 + np.exp(logits[1] - logits[0])))
    if mode == "distance":
        return -float(np.sum(square_layer(f_i, f_v).values, dtype=np.float64))
    raise EvaluationError(f"unknown score mode {mode!r}; expected one of {SCORE_MODES}")


def score_pair(image: ImageSample, tracklet: VideoTracklet, network: ReidNetwork,
               mode: str = "verification") -> float:
    return _score(network, network.image_feature(image), network.video_feature(tracklet), mode)


def score_matrix(network: ReidNetwork, probes: list[ImageSample], gallery: list[VideoTracklet],
                 truth: list[int], mode: str = "verification") -> ScoreMatrix:
    if not probes or not gallery:
        raise EvaluationError("empty probe set or gallery")
    img = [network.image_feature(p) for p in probes]
    vid = [network.video_feature(t) for t in gallery]
    s = np.array([[_score(network, fi, fv, mode) for fv in vid] for fi in img])
    return ScoreMatrix(s, np.asarray(truth))


@dataclass
class EvalResult:
    curve: CmcCurve
    scores: ScoreMatrix
    split: SplitPlan


def evaluate(network: ReidNetwork, store: SampleStore, mode: str = "verification") -> EvalResult:
    """Rank every camera-B test tracklet for every camera-A test probe."""
    split = store.split
    if not split.test:
        raise EvaluationError("empty test set")
    names = list(split.test)
    probes = [store.probe(n) for n in names]
    gallery = [store.tracklet(n) for n in names]
    sm = score_matrix(network, probes, gallery, list(range(len(names))), mode)
    return EvalResult(cmc(sm), sm, split)


def write_cmc_csv(path: str | Path, curve: CmcCurve) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "mean"] + [f"trial_{i}" for i in range(len(curve.per_trial))])
        for m in range(1, len(curve) + 1):
            w.writerow([m, repr(float(curve.values[m - 1]))] + [repr(float(t[m - 1])) for t in curve.per_trial])
    return path


def read_cmc_csv(path: str | Path) -> CmcCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    values = np.array([float(r[1]) for r in body])
    per_trial = [np.array([float(r[j]) for r in body]) for j in range(2, len(rows[0]))]
    return CmcCurve(values, max(1, len(per_trial)), per_trial)


def format_table(curve: CmcCurve, label: str = "ours") -> str:
    """Rank-1/5/10/20 percentages in a one-row table; ranks beyond the gallery show '-'."""
    head = "CMC Rank | " + " | ".join(f"{m:>5}" for m in TABLE_RANKS)
    cells = [f"{100 * curve.rank(m):5.1f}" if m <= len(curve) else "    -" for m in TABLE_RANKS]
    row = f"{label:<8} | " + " | ".join(cells)
    rule = "-" * len(head)
    return "\n".join([rule, head, rule, row, rule, f"({curve.trials} trial(s), gallery size {len(curve)})"])
