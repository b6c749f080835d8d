"""Dataset trees, synthetic data, preprocessing, train/test splits and pair sampling.

On-disk layout::

    root/cam_a/<identity>/<frame>.png
    root/cam_b/<identity>/<frame>.png
    root/single_shot/<identity>.png      (optional probe image)

Identities are matched across cameras by directory name and frames are taken
in lexicographic order. Probes come from camera A, gallery tracklets from
camera B.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .diffcore import Tensor
from .encoders import ImageSample, VideoTracklet

log = logging.getLogger(__name__)

CAMERA_SHIFT_B = (1, 2)  # rows, cols; camera A is unshifted


class IngestionError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- synthetic data


@dataclass
class RawDataset:
    """Decoded uint8 images, [H, W, C] each, keyed by identity name."""

    probes: dict[str, np.ndarray]
    cam_a: dict[str, list[np.ndarray]]
    cam_b: dict[str, list[np.ndarray]]

    def identities(self) -> list[str]:
        return sorted(self.cam_b)

    def equals(self, other: "RawDataset") -> bool:
        if self.identities() != other.identities() or sorted(self.probes) != sorted(other.probes):
            return False
        for name in self.identities():
            if not np.array_equal(self.probes.get(name), other.probes.get(name)):
                return False
            for cam in ("cam_a", "cam_b"):
                mine, theirs = getattr(self, cam)[name], getattr(other, cam)[name]
                if len(mine) != len(theirs) or not all(np.array_equal(a, b) for a, b in zip(mine, theirs)):
                    return False
        return True


def identity_name(i: int) -> str:
    return f"id_{i:04d}"


def _render_pattern(rng: np.random.Generator, res: int) -> np.ndarray:
    """Smooth pedestrian-like pattern: background, two clothing bands and a coloured blob."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    img = np.empty((res, res, 3))
    img[:] = rng.uniform(0.2, 0.8, size=3)
    soft = lambda t: 1.0 / (1.0 + np.exp(-t * 40.0))  # noqa: E731
    left, right = rng.uniform(0.2, 0.35), rng.uniform(0.65, 0.8)
    body = soft(xx - left) * soft(right - xx)
    split = rng.uniform(0.4, 0.6)
    top = body * soft(yy - 0.1) * soft(split - yy)
    bottom = body * soft(yy - split) * soft(0.95 - yy)
    for mask in (top, bottom):
        colour = rng.uniform(0.0, 1.0, size=3)
        img = img * (1 - mask[..., None]) + colour * mask[..., None]
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    radius = rng.uniform(0.08, 0.2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    colour = rng.uniform(0.0, 1.0, size=3)
    img = img * (1 - blob[..., None]) + colour * blob[..., None]
    return img


def _observe(pattern: np.ndarray, shift: tuple[int, int], noise: float, rng: np.random.Generator) -> np.ndarray:
    img = np.roll(pattern, shift, axis=(0, 1))
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(k: int, frames: int, resolution: int = 32, noise: float = 0.1, seed: int = 0) -> RawDataset:
    """Generate ``k`` identities seen by two cameras.

    Each identity owns one base pattern. Camera A yields a probe image plus a
    ``frames``-long tracklet, camera B a ``frames``-long tracklet shifted by
    :data:`CAMERA_SHIFT_B`. Every observation carries independent Gaussian
    pixel noise of standard deviation ``noise`` (in [0, 1] intensity units).
    """
    if k < 2:
        raise ConfigError(f"synthetic data needs k >= 2 identities, got {k}")
    if frames < 1:
        raise ConfigError(f"synthetic data needs at least one frame per tracklet, got {frames}")
    if resolution < 4:
        raise ConfigError(f"resolution {resolution} too small")
    if noise < 0:
        raise ConfigError(f"noise must be non-negative, got {noise}")
    probes, cam_a, cam_b = {}, {}, {}
    for i in range(k):
        name = identity_name(i)
        pattern = _render_pattern(np.random.default_rng([seed, i, 0]), resolution)
        rng = np.random.default_rng([seed, i, 1])
        probes[name] = _observe(pattern, (0, 0), noise, rng)
        cam_a[name] = [_observe(pattern, (0, 0), noise, rng) for _ in range(frames)]
        cam_b[name] = [_observe(pattern, CAMERA_SHIFT_B, noise, rng) for _ in range(frames)]
    return RawDataset(probes, cam_a, cam_b)


def emit(dataset: RawDataset, root: str | os.PathLike) -> Path:
    root = Path(root)
    for name in dataset.identities():
        for cam in ("cam_a", "cam_b"):
            folder = root / cam / name
            folder.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(getattr(dataset, cam)[name]):
                _write_png(frame, folder / f"{t:04d}.png")
        if name in dataset.probes:
            (root / "single_shot").mkdir(parents=True, exist_ok=True)
            _write_png(dataset.probes[name], root / "single_shot" / f"{name}.png")
    return root


def _write_png(arr: np.ndarray, path: Path) -> None:
    # fixed encoder settings keep the byte stream reproducible
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6, optimize=False)


# ---------------------------------------------------------------- ingestion


@dataclass(frozen=True)
class Layout:
    cam_a: str = "cam_a"
    cam_b: str = "cam_b"
    single_shot: str = "single_shot"
    suffix: str = ".png"
    max_identities: int = 0  # 0 keeps all; PRID-2011 protocol uses the first 200


@dataclass(frozen=True)
class IdentityEntry:
    name: str
    cam_a: tuple[Path, ...]
    cam_b: tuple[Path, ...]
    probe: Path


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IdentityEntry]

    @property
    def k_total(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> IdentityEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _frames(folder: Path, suffix: str) -> tuple[Path, ...]:
    if not folder.is_dir():
        return ()
    return tuple(sorted((p for p in folder.iterdir() if p.suffix.lower() == suffix and p.is_file()),
                        key=lambda p: p.name))


def ingest(root: str | os.PathLike, layout: Layout = Layout()) -> DatasetIndex:
    root = Path(root)
    cam_a_root, cam_b_root = root / layout.cam_a, root / layout.cam_b
    names = set()
    for cam_root in (cam_a_root, cam_b_root):
        if cam_root.is_dir():
            names.update(p.name for p in cam_root.iterdir() if p.is_dir())
    if not names:
        raise IngestionError(f"no identities found under {root} (expected {layout.cam_a}/ and {layout.cam_b}/)")
    entries = []
    for name in sorted(names):
        a = _frames(cam_a_root / name, layout.suffix)
        b = _frames(cam_b_root / name, layout.suffix)
        if not a or not b:
            missing = layout.cam_a if not a else layout.cam_b
            log.warning("skipping identity %s: no frames in %s", name, missing)
            continue
        single = root / layout.single_shot / f"{name}{layout.suffix}"
        entries.append(IdentityEntry(name, a, b, single if single.is_file() else a[0]))
    if layout.max_identities:
        entries = entries[: layout.max_identities]
    if not entries:
        raise IngestionError(f"no identity under {root} has frames in both camera views")
    return DatasetIndex(root, entries)


def decode(path: str | os.PathLike | bytes) -> np.ndarray:
    """Decode an image file (or raw bytes) to uint8 [H, W, 3]."""
    try:
        if isinstance(path, bytes):
            img = Image.open(io.BytesIO(path))
        else:
            img = Image.open(path)
        with img:
            return np.asarray(img.convert("RGB"))
    except Exception as exc:
        where = "<bytes>" if isinstance(path, bytes) else str(path)
        raise IngestionError(f"cannot decode image {where}: {exc}") from exc


def read_raw(index: DatasetIndex) -> RawDataset:
    probes, cam_a, cam_b = {}, {}, {}
    for e in index.entries:
        probes[e.name] = decode(e.probe)
        cam_a[e.name] = [decode(p) for p in e.cam_a]
        cam_b[e.name] = [decode(p) for p in e.cam_b]
    return RawDataset(probes, cam_a, cam_b)


# ---------------------------------------------------------------- preprocessing


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an [H, W, C] float array with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, height)
    x0, x1, wx = axis(w, width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def identity(cls, channels: int = 3) -> "ChannelStats":
        return cls((0.0,) * channels, (1.0,) * channels)


def to_unit(raw: np.ndarray, resolution: int) -> np.ndarray:
    """uint8 [H, W, C] -> float64 [H', W', C] in [0, 1]."""
    img = raw.astype(np.float64) / 255.0
    return bilinear_resize(img, resolution, resolution)


def standardize(unit: np.ndarray, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    mean = np.asarray(stats.mean)
    std = np.maximum(np.asarray(stats.std), 1e-8)
    return ((unit - mean) / std).transpose(2, 0, 1).astype(dtype)


def preprocess(raw: bytes | np.ndarray | str | os.PathLike, resolution: int,
               stats: ChannelStats | None = None, dtype=np.float32) -> Tensor:
    """Decode, resize to ``resolution`` square, scale to [0, 1] and standardize per channel."""
    arr = raw if isinstance(raw, np.ndarray) else decode(raw)
    unit = to_unit(arr, resolution)
    return Tensor(standardize(unit, stats or ChannelStats.identity(unit.shape[2]), dtype))


def compute_stats(images: list[np.ndarray], resolution: int) -> ChannelStats:
    """Per-channel mean and std over every pixel of the given uint8 images."""
    if not images:
        raise ValueError("no images to compute statistics from")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for raw in images:
        unit = to_unit(raw, resolution).reshape(-1, 3)
        total += unit.sum(axis=0)
        total_sq += (unit ** 2).sum(axis=0)
        count += unit.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return ChannelStats(tuple(float(m) for m in mean), tuple(float(s) for s in np.sqrt(var)))


# ---------------------------------------------------------------- splits and pairs


@dataclass(frozen=True)
class SplitPlan:
    trial: int
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


def make_splits(index: DatasetIndex | list[str], trials: int, seed: int) -> list[SplitPlan]:
    names = index.names() if isinstance(index, DatasetIndex) else sorted(index)
    if len(names) < 2:
        raise ConfigError(f"splitting needs at least 2 identities, got {len(names)}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    plans = []
    n_train = len(names) // 2
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        perm = rng.permutation(len(names))
        train = tuple(sorted(names[i] for i in perm[:n_train]))
        test = tuple(sorted(names[i] for i in perm[n_train:]))
        plans.append(SplitPlan(trial, train, test, seed))
    return plans


@dataclass(frozen=True)
class Pair:
    image: ImageSample
    tracklet: VideoTracklet
    same: bool


@dataclass
class SampleStore:
    """Preprocessed probes and camera-B tracklets for one split.

    Labels are class indices: position of the identity in ``split.train`` for
    training identities and in ``split.test`` for test identities. Statistics
    come from training identities only.
    """

    index: DatasetIndex
    split: SplitPlan
    resolution: int
    dtype: np.dtype = np.float32
    max_frames: int = 0
    stats: ChannelStats = field(init=False)
    _raw: dict = field(default_factory=dict, init=False, repr=False)
    _probes: dict = field(default_factory=dict, init=False, repr=False)
    _tracklets: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        self._labels = {name: i for i, name in enumerate(self.split.train)}
        self._labels.update({name: i for i, name in enumerate(self.split.test)})
        images = []
        for name in self.split.train:
            probe, frames = self._raw_for(name)
            images.append(probe)
            images.extend(frames)
        self.stats = compute_stats(images, self.resolution)

    def _raw_for(self, name: str):
        if name not in self._raw:
            e = self.index.entry(name)
            paths = e.cam_b[: self.max_frames] if self.max_frames else e.cam_b
            self._raw[name] = (decode(e.probe), [decode(p) for p in paths])
        return self._raw[name]

    def _tensor(self, raw: np.ndarray) -> Tensor:
        return Tensor(standardize(to_unit(raw, self.resolution), self.stats, self.dtype))

    def probe(self, name: str) -> ImageSample:
        if name not in self._probes:
            raw, _ = self._raw_for(name)
            self._probes[name] = ImageSample(self._tensor(raw), self._labels[name], key=f"{name}/probe")
        return self._probes[name]

    def tracklet(self, name: str) -> VideoTracklet:
        if name not in self._tracklets:
            _, frames = self._raw_for(name)
            self._tracklets[name] = VideoTracklet([self._tensor(f) for f in frames], self._labels[name],
                                                  key=f"{name}/cam_b")
        return self._tracklets[name]


def sample_epoch(split: SplitPlan, store: SampleStore, rng: np.random.Generator) -> list[Pair]:
    """One epoch of pairs: every training identity's positive pair plus as many negatives.

    Each training identity also contributes one negative as the image side,
    paired with a tracklet of another identity drawn uniformly (with
    replacement across negatives). The combined list is shuffled.
    """
    names = list(split.train)
    if len(names) < 2:
        raise ConfigError("pair sampling needs at least 2 training identities")
    plan = [(n, n) for n in names]
    for i, name in enumerate(names):
        j = int(rng.integers(len(names) - 1))
        plan.append((name, names[j if j < i else j + 1]))
    order = rng.permutation(len(plan))
    return [Pair(store.probe(plan[o][0]), store.tracklet(plan[o][1]), plan[o][0] == plan[o][1]) for o in order]
