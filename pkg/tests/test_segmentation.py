"""U-Net segmentation: contracts, augmentation, learnability."""

import numpy as np
import pytest

from uwstereo.segmentation import (AugmentConfig, SegNet, SegTrainConfig,
                                   UNetConfig, augment_samples, iou,
                                   train_segmenter)
from uwstereo.synth import disc_dataset

TINY = UNetConfig(levels=3, base_channels=4, seed=0)


def zeroed(segnet):
    for node in segnet.net.param_nodes():
        node.layer.weight[:] = 0.0
        node.layer.bias[:] = 0.0
    return segnet


class TestArchitecture:
    def test_five_levels_by_default(self):
        assert UNetConfig().levels == 5
        assert UNetConfig().stride == 16

    def test_zero_weight_net_predicts_half_everywhere(self):
        seg = zeroed(SegNet(TINY))
        p = seg.segment(np.zeros((48, 48), np.uint8))
        np.testing.assert_allclose(p, 0.5)

    @pytest.mark.parametrize("size", [(32, 32), (100, 100), (48, 56), (37, 61)])
    def test_output_size_equals_input_size(self, size, rng):
        seg = SegNet(TINY)
        img = (rng.random(size) * 255).astype(np.uint8)
        assert seg.segment(img).shape == size

    def test_channel_widths_double_up_to_cap(self):
        cfg = UNetConfig(levels=5, base_channels=16, channel_cap=64)
        assert [cfg.width(i) for i in range(5)] == [16, 32, 64, 64, 64]

    def test_mask_threshold_and_dilation(self, rng):
        seg = zeroed(SegNet(TINY))
        seg.threshold = 0.4
        m = seg.mask(np.zeros((32, 32), np.uint8))
        assert m.all()  # 0.5 >= 0.4 everywhere


class TestAugmentation:
    def samples(self, n=4, size=32):
        return disc_dataset(n, size=size, seed=3)

    def test_factor_multiplies_sample_count(self):
        out = augment_samples(self.samples(4), AugmentConfig(factor=10), seed=0)
        assert len(out) == 40

    def test_two_hundred_sources_factor_ten_gives_two_thousand(self):
        out = augment_samples(self.samples(200, size=16),
                              AugmentConfig(factor=10), seed=0)
        assert len(out) == 2000

    def test_factor_one_returns_sources_unchanged(self):
        src = self.samples(3)
        out = augment_samples(src, AugmentConfig(factor=1), seed=0)
        assert out == src

    def test_augmented_masks_stay_binary(self):
        out = augment_samples(self.samples(2), AugmentConfig(factor=4), seed=1)
        for _, mask in out:
            assert mask.dtype == bool

    def test_invalid_factor_rejected(self):
        with pytest.raises(ValueError):
            AugmentConfig(factor=0)


class TestTraining:
    def test_size_mismatch_rejected(self, rng):
        bad = [(np.zeros((32, 32), np.uint8), np.zeros((16, 16), bool))]
        with pytest.raises(ValueError, match="disagree"):
            train_segmenter(SegNet(TINY), bad)

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            train_segmenter(SegNet(TINY), [])

    def test_loss_decreases_on_disc_task(self):
        seg = SegNet(TINY)
        hist = train_segmenter(seg, disc_dataset(12, size=32, seed=1),
                               SegTrainConfig(steps=40, batch_size=4, lr=0.3,
                                              seed=0))
        assert np.mean(hist[-5:]) < np.mean(hist[:5])

    def test_disc_task_is_threshold_separable(self):
        # oracle: thresholding at the image mean already nails the target,
        # so a trained net reaching high IoU is a fair ask
        for img, mask in disc_dataset(6, size=48, seed=9):
            pred = img > img.mean() + 40
            assert iou(pred, mask) > 0.9

    def test_trained_net_beats_090_iou_on_held_out_discs(self):
        seg = SegNet(UNetConfig(levels=3, base_channels=6, seed=0))
        train_segmenter(seg, disc_dataset(24, size=48, seed=1),
                        SegTrainConfig(steps=80, batch_size=4, lr=0.3, seed=0))
        scores = [iou(seg.segment(img) >= 0.5, mask)
                  for img, mask in disc_dataset(8, size=48, seed=99)]
        assert float(np.mean(scores)) > 0.9


class TestIou:
    def test_identical_masks(self):
        m = np.zeros((8, 8), bool)
        m[2:5, 2:5] = True
        assert iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((8, 8), bool)
        b = np.zeros((8, 8), bool)
        a[0, 0] = True
        b[7, 7] = True
        assert iou(a, b) == 0.0

    def test_empty_masks_count_as_perfect(self):
        z = np.zeros((4, 4), bool)
        assert iou(z, z) == 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        seg = SegNet(TINY, threshold=0.7)
        p = tmp_path / "seg.uwnn"
        seg.save(p)
        back = SegNet.load(p)
        assert back.threshold == 0.7
        img = (rng.random((32, 32)) * 255).astype(np.uint8)
        np.testing.assert_array_equal(back.segment(img), seg.segment(img))
