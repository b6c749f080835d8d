import numpy as np
import pytest

from crossreid.diffcore import ShapeError, Tensor
from crossreid.encoders import (
    CANDIDATE_GAIN,
    LSTM_PASSTHROUGH_GAIN,
    EncoderConfig,
    Encoders,
    ImageSample,
    VideoTracklet,
    encode_image,
    encode_video,
)


def sample(cfg, rng, key="img"):
    return ImageSample(Tensor(rng.normal(size=(3, cfg.resolution, cfg.resolution)).astype(np.float32)), 0, key)


def tracklet(cfg, rng, frames, key="vid"):
    shape = (3, cfg.resolution, cfg.resolution)
    return VideoTracklet([Tensor(rng.normal(size=shape).astype(np.float32)) for _ in range(frames)], 0, key)


@pytest.fixture
def enc(small_cfg):
    return Encoders.build(small_cfg, np.random.default_rng(0))


class TestEncoderConfig:
    def test_trunk_output_shape(self):
        assert EncoderConfig().trunk_output_shape() == (16, 6, 6)  # 32 -> 30 -> 15 -> 13 -> 6

    @pytest.mark.parametrize("kwargs", [
        {"channels": (4,), "kernels": (3, 3), "strides": (1,), "pools": (2,)},
        {"resolution": 4, "kernels": (5, 3)},
        {"resolution": 8, "pools": (4, 4)},
        {"init": "xavier"},
        {"d": 0},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            EncoderConfig(**kwargs)

    def test_dict_round_trip(self, small_cfg):
        assert EncoderConfig.from_dict(small_cfg.as_dict()) == small_cfg


class TestEncoders:
    def test_feature_shapes(self, enc, small_cfg):
        rng = np.random.default_rng(1)
        assert encode_image(sample(small_cfg, rng), enc).shape == (small_cfg.d,)
        for frames in (1, 2, 5):
            assert encode_video(tracklet(small_cfg, rng, frames), enc).shape == (small_cfg.d,)

    def test_same_seed_same_parameters(self, small_cfg):
        a = Encoders.build(small_cfg, np.random.default_rng(3)).parameters()
        b = Encoders.build(small_cfg, np.random.default_rng(3)).parameters()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name].values, b[name].values)

    def test_shared_trunk_listed_once(self, enc):
        names = list(enc.parameters())
        assert any(n.startswith("image.trunk") for n in names)
        assert not any(n.startswith("video.trunk") for n in names)
        assert enc.image.trunk is enc.video.trunk

    def test_unshared_trunks(self, small_cfg):
        cfg = EncoderConfig(**{**small_cfg.as_dict(), "share_cnn": False})
        e = Encoders.build(cfg, np.random.default_rng(0))
        assert e.image.trunk is not e.video.trunk
        assert any(n.startswith("video.trunk") for n in e.parameters())

    def test_frozen_build(self, small_cfg):
        e = Encoders.build(small_cfg, np.random.default_rng(0), trainable=False)
        assert not any(t.requires_grad for t in e.parameters().values())

    def test_wrong_input_shape(self, enc):
        with pytest.raises(ShapeError):
            enc.image(ImageSample(Tensor(np.zeros((3, 15, 15), np.float32)), 0))

    def test_video_feature_is_order_sensitive(self, enc, small_cfg):
        t = tracklet(small_cfg, np.random.default_rng(2), 3)
        rev = VideoTracklet(list(reversed(t.frames)), 0, "rev")
        assert not np.allclose(enc.video(t).values, enc.video(rev).values)

    def test_empty_tracklet_rejected(self):
        with pytest.raises(ValueError):
            VideoTracklet([], 0)

    def test_mismatched_frames_rejected(self):
        with pytest.raises((ValueError, ShapeError)):
            VideoTracklet([Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 5, 5)))], 0)


class TestInit:
    def test_uniform_bounds(self, small_cfg):
        cfg = EncoderConfig(**{**small_cfg.as_dict(), "init": "uniform"})
        e = Encoders.build(cfg, np.random.default_rng(0))
        w = e.video.proj.weight.values
        assert np.abs(w).max() <= np.sqrt(1.0 / cfg.d)
        k = e.image.trunk.layers[0].kernel.values
        assert np.abs(k).max() <= np.sqrt(1.0 / (3 * 3 * 3))

    def test_passthrough_single_frame_close_to_image_feature(self, small_cfg):
        # with one frame the video path approximately reproduces the image feature
        e = Encoders.build(small_cfg, np.random.default_rng(0))
        rng = np.random.default_rng(4)
        img = sample(small_cfg, rng)
        f_i = e.image(img).values
        f_v = e.video(VideoTracklet([img.pixels], 0)).values
        assert np.linalg.norm(f_v - f_i) < 0.5 * np.linalg.norm(f_i)

    def test_passthrough_gains(self):
        assert LSTM_PASSTHROUGH_GAIN == pytest.approx(0.4 * CANDIDATE_GAIN)
