import numpy as np
import pytest
from scipy import stats

from bpreg.augmentation import AugmentationConfig
from bpreg.errors import SamplingError
from bpreg.sampling import delta_h_to_index_step, sample_training_item
from bpreg.volumes import PreprocessedVolume

IDENTITY = AugmentationConfig.identity()


def make_volume(n_slices, z_spacing, name="vol"):
    return PreprocessedVolume(
        np.zeros((n_slices, 128, 128), dtype=np.float32), z_spacing=z_spacing, source_id=name
    )


class TestIndexStep:
    def test_exact_division(self):
        assert delta_h_to_index_step(10.0, 2.5) == 4

    def test_rounding(self):
        assert delta_h_to_index_step(5.0, 6.0) == 1

    def test_floored_at_one(self):
        # raw round(5/100) = 0 would duplicate slices; the floor keeps the
        # ladder strictly increasing
        assert round(5.0 / 100.0) == 0
        assert delta_h_to_index_step(5.0, 100.0) == 1
        vol = make_volume(10, 100.0)
        item = sample_training_item(vol, 3, (5.0, 5.0), IDENTITY, np.random.default_rng(0))
        assert item.k == 1

    def test_positivity_required(self):
        with pytest.raises(ValueError):
            delta_h_to_index_step(0.0, 1.0)
        with pytest.raises(ValueError):
            delta_h_to_index_step(5.0, -1.0)


class TestSampleTrainingItem:
    def test_indices_always_feasible_with_equal_gaps(self):
        vol = make_volume(100, 1.0)
        rng = np.random.default_rng(0)
        for _ in range(300):
            item = sample_training_item(vol, 4, (5.0, 100.0), IDENTITY, rng)
            assert item.slices.shape == (4, 128, 128)
            # realized step fits: start + 3k <= 99 was enforced
            assert item.k >= 1 and 3 * item.k <= 99

    def test_degenerate_range_is_deterministic_step(self):
        vol = make_volume(50, 2.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            item = sample_training_item(vol, 2, (10.0, 10.0), IDENTITY, rng)
            assert item.k == 5
            assert item.delta_h == 10.0

    def test_recorded_delta_h_is_realized_step(self):
        vol = make_volume(80, 2.5)
        rng = np.random.default_rng(2)
        for _ in range(100):
            item = sample_training_item(vol, 4, (5.0, 100.0), IDENTITY, rng)
            assert item.delta_h == item.k * 2.5

    def test_realized_delta_h_uniform_by_ks(self):
        # 1 mm spacing: the realized distance is the drawn one rounded to
        # an integer, which costs ~0.5/95 of systematic CDF deviation, so
        # the margin below the 5% critical value is real but thin
        vol = make_volume(300, 1.0)
        rng = np.random.default_rng(0)
        realized = [
            sample_training_item(vol, 2, (5.0, 100.0), IDENTITY, rng).delta_h
            for _ in range(10_000)
        ]
        ks = stats.kstest(realized, stats.uniform(loc=5, scale=95).cdf).statistic
        assert ks < 1.36 / np.sqrt(len(realized))

    def test_deterministic_under_seed(self):
        vol = make_volume(120, 1.5)
        cfg = AugmentationConfig()
        a = sample_training_item(vol, 4, (5.0, 100.0), cfg, np.random.default_rng(7))
        b = sample_training_item(vol, 4, (5.0, 100.0), cfg, np.random.default_rng(7))
        assert a.k == b.k and a.delta_h == b.delta_h
        np.testing.assert_array_equal(a.slices, b.slices)

    def test_short_volume_falls_back_to_minimum(self):
        # every draw from [50, 100] mm needs k >= 50, infeasible for 5
        # slices; after the retries the distance collapses to the largest
        # feasible step
        vol = make_volume(5, 1.0)
        item = sample_training_item(vol, 4, (50.0, 100.0), IDENTITY, np.random.default_rng(3))
        assert item.k == 1
        assert item.delta_h == 1.0

    def test_too_few_slices_raises_with_volume_name(self):
        vol = make_volume(3, 1.0, name="tiny-volume")
        with pytest.raises(SamplingError, match="tiny-volume"):
            sample_training_item(vol, 4, (5.0, 100.0), IDENTITY, np.random.default_rng(0))

    def test_augmentation_applied_per_slice(self):
        rng = np.random.default_rng(4)
        slices = rng.uniform(-1, 1, (30, 128, 128)).astype(np.float32)
        vol = PreprocessedVolume(slices, z_spacing=5.0, source_id="aug")
        cfg = AugmentationConfig.identity()
        cfg.noise_prob = 1.0
        cfg.noise_std_min = cfg.noise_std_max = 0.02
        item = sample_training_item(vol, 3, (5.0, 5.0), cfg, np.random.default_rng(5))
        # each sampled slice was perturbed independently
        for i in range(3):
            assert not np.array_equal(item.slices[i], slices[i])
        assert not np.array_equal(item.slices[0] - slices[0], item.slices[1] - slices[1])


class TestIndexStepSampling:
    def test_direct_index_step_range(self):
        vol = make_volume(100, 1.0)
        rng = np.random.default_rng(6)
        ks = {
            sample_training_item(vol, 2, (5.0, 100.0), IDENTITY, rng, index_step_range=(2, 30)).k
            for _ in range(200)
        }
        assert min(ks) >= 2 and max(ks) <= 30
        assert len(ks) > 20  # actually spans the range

    def test_index_step_clamped_to_volume(self):
        vol = make_volume(10, 1.0)
        rng = np.random.default_rng(7)
        for _ in range(50):
            item = sample_training_item(vol, 4, (5.0, 100.0), IDENTITY, rng, index_step_range=(2, 30))
            assert 2 <= item.k <= 3

    def test_infeasible_index_range(self):
        vol = make_volume(4, 1.0, name="short")
        with pytest.raises(SamplingError, match="short"):
            sample_training_item(vol, 4, (5.0, 100.0), IDENTITY, np.random.default_rng(0), index_step_range=(2, 30))
