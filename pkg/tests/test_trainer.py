import csv

import numpy as np
import pytest

from crossreid.data import SampleStore, SplitPlan
from crossreid.diffcore import NonFiniteError
from crossreid.fmr import KD, WP, WPK, FixedEmbedder
from crossreid.trainer import (
    LOSS_COLUMNS,
    TrainConfig,
    TrainingError,
    load_state,
    sgd_step,
    stage_for,
    train,
)
from crossreid.verid import ReidNetwork


def small_train(small_store, small_split, small_cfg, out=None, **kwargs):
    cfg = TrainConfig(**{"epochs": 6, "lr": 1e-3, "seed": 0, "wp_end": 2, "kd_end": 4, "checkpoint_every": 3,
                         **kwargs})
    return train(cfg, small_store, small_split, small_cfg, out)


def param_values(state):
    return {n: t.values.copy() for n, t in state.network.trainable().items()}


class TestSgd:
    def test_update(self):
        p = {"w": np.array([1.0, 2.0])}
        sgd_step(p, {"w": np.array([10.0, -10.0])}, 0.1)
        np.testing.assert_allclose(p["w"], [0.0, 3.0])

    def test_non_finite_aborts_before_any_update(self):
        p = {"a": np.array([1.0]), "b": np.array([1.0])}
        with pytest.raises(NonFiniteError, match="b"):
            sgd_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, 0.1)
        assert p["a"][0] == 1.0 and p["b"][0] == 1.0


class TestTrainConfig:
    def test_stage_for(self):
        cfg = TrainConfig(epochs=10, wp_end=3, kd_end=6)
        assert [stage_for(cfg, e).kind for e in (0, 2, 3, 5, 6, 9)] == [WP, WP, KD, KD, WPK, WPK]

    def test_stage_without_fmr(self):
        assert stage_for(TrainConfig(epochs=10, fmr_enabled=False), 0).kind == WPK

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"lr": -1.0}, {"precision": "float16"},
                                        {"epochs": 10, "wp_end": 7, "kd_end": 5}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestTrain:
    def test_zero_learning_rate_changes_nothing(self, small_store, small_split, small_cfg):
        state = small_train(small_store, small_split, small_cfg, lr=0.0)
        fresh = ReidNetwork(small_cfg, len(small_split.train), 0, np.float32, fixed_seed=0)
        for name, t in fresh.trainable().items():
            np.testing.assert_array_equal(state.network.trainable()[name].values, t.values)

    def test_deterministic(self, small_store, small_split, small_cfg, tmp_path):
        small_train(small_store, small_split, small_cfg, tmp_path / "a")
        small_train(small_store, small_split, small_cfg, tmp_path / "b")
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "ckpt_6").read_bytes() == (tmp_path / "b" / "ckpt_6").read_bytes()

    def test_resume_matches_uninterrupted(self, small_store, small_split, small_cfg, tmp_path):
        full = small_train(small_store, small_split, small_cfg, tmp_path / "full")
        cfg = TrainConfig(epochs=6, lr=1e-3, seed=0, wp_end=2, kd_end=4, checkpoint_every=3)
        train(cfg, small_store, small_split, small_cfg, tmp_path / "part", stop_at=3)
        resumed = load_state(tmp_path / "part" / "ckpt_3")
        assert resumed.epoch == 3
        resumed = train(cfg, small_store, small_split, small_cfg, tmp_path / "part", state=resumed)
        for name, values in param_values(full).items():
            np.testing.assert_array_equal(resumed.network.trainable()[name].values, values)
        assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "part" / "loss.csv").read_bytes()

    def test_hundred_epochs_equal_fifty_plus_fifty(self, small_store, small_split, small_cfg, tmp_path):
        cfg = TrainConfig(epochs=100, seed=1, checkpoint_every=50)
        full = train(cfg, small_store, small_split, small_cfg)
        train(cfg, small_store, small_split, small_cfg, tmp_path, stop_at=50)
        resumed = train(cfg, small_store, small_split, small_cfg, state=load_state(tmp_path / "ckpt_50"))
        assert resumed.network.stage == full.network.stage
        for name, values in param_values(full).items():
            assert resumed.network.trainable()[name].values.tobytes() == values.tobytes()

    def test_outputs(self, small_store, small_split, small_cfg, tmp_path):
        state = small_train(small_store, small_split, small_cfg, tmp_path)
        assert sorted(p.name for p in tmp_path.glob("ckpt_*")) == ["ckpt_3", "ckpt_6"]
        with open(tmp_path / "loss.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == LOSS_COLUMNS
        assert [r[0] for r in rows[1:]] == [str(e) for e in range(1, 7)]
        assert [r[5] for r in rows[1:]] == [WP, WP, KD, KD, WPK, WPK]
        assert [float(r[6]) for r in rows[1:]] == [1.0, 1.0, 1.0, 0.5, 0.0, 0.0]
        for r in rows[1:]:
            L, L_v, L_ii, L_iv = map(float, r[1:5])
            assert L == pytest.approx(L_v + 0.5 * L_ii + 0.5 * L_iv, rel=1e-12)
        assert len(state.history) == 6

    def test_checkpoint_restores_network(self, small_store, small_split, small_cfg, tmp_path):
        state = small_train(small_store, small_split, small_cfg, tmp_path)
        loaded = load_state(tmp_path / "ckpt_6")
        assert loaded.network.stage == state.network.stage
        assert loaded.split == state.split
        for name, values in param_values(state).items():
            np.testing.assert_array_equal(loaded.network.trainable()[name].values, values)

    def test_fixed_branch_untouched(self, small_store, small_split, small_cfg):
        state = small_train(small_store, small_split, small_cfg)
        fresh = FixedEmbedder.surrogate("video", small_cfg, 0, np.float32)
        for name, t in state.network.fixed_video.params.items():
            assert t.values.tobytes() == fresh.params[name].values.tobytes()

    def test_float64_training(self, small_index, small_split, small_cfg):
        store = SampleStore(small_index, small_split, 16, np.float64)
        state = small_train(store, small_split, small_cfg, epochs=2, wp_end=1, kd_end=2, precision="float64")
        assert all(t.dtype == np.float64 for t in state.network.trainable().values())

    def test_too_few_identities(self, small_store, small_split, small_cfg):
        with pytest.raises(TrainingError):
            small_train(small_store, SplitPlan(0, ("id_0000",), small_split.test, 0), small_cfg)
