import math

import numpy as np
from django.test import SimpleTestCase

from fedseg import rng
from fedseg.dp_mechanism import DpConfig, account_privacy, add_noise, clip_update, privatize, rdp_curve
from fedseg.errors import ConfigurationError


class ClipTests(SimpleTestCase):
    def test_long_update_is_scaled_to_the_bound(self):
        delta = np.array([3.0, 4.0], dtype=np.float32)
        clipped = clip_update(delta, 1.0)
        np.testing.assert_allclose(clipped, [0.6, 0.8], rtol=1e-6)
        self.assertEqual(clipped.dtype, np.float32)

    def test_scale_by_half(self):
        np.testing.assert_array_equal(clip_update(np.array([2.0, 0.0]), 1.0), [1.0, 0.0])

    def test_random_vectors_keep_direction(self):
        gen = np.random.default_rng(0)
        for _ in range(20):
            v = gen.normal(scale=gen.uniform(0.01, 10.0), size=1000)
            clipped = clip_update(v, 1.0)
            self.assertLessEqual(np.linalg.norm(clipped), 1.0 + 1e-6)
            cosine = v @ clipped / (np.linalg.norm(v) * np.linalg.norm(clipped))
            self.assertAlmostEqual(cosine, 1.0, delta=1e-6)

    def test_zero_vector_passes_through(self):
        np.testing.assert_array_equal(clip_update(np.zeros(3), 1.0), np.zeros(3))

    def test_short_update_is_untouched(self):
        delta = np.array([0.3, 0.4], dtype=np.float32)
        self.assertIs(clip_update(delta, 1.0), delta)

    def test_unbounded_clip(self):
        delta = np.full(10, 100.0, dtype=np.float32)
        self.assertIs(clip_update(delta, math.inf), delta)

    def test_non_positive_bound_rejected(self):
        with self.assertRaises(ConfigurationError):
            clip_update(np.ones(2), 0.0)


class NoiseTests(SimpleTestCase):
    def test_zero_sigma_is_identity(self):
        delta = np.ones(5, dtype=np.float32)
        self.assertIs(add_noise(delta, 0.0, 1.0, rng.stream(1, "dp-noise")), delta)

    def test_noise_scale(self):
        stream = rng.stream(2, "dp-noise")
        noisy = np.stack([add_noise(np.zeros(10), 1.2, 1.0, stream) for _ in range(100000)])
        for std in noisy.std(axis=0):
            self.assertTrue(1.188 <= std <= 1.212)

    def test_noise_scales_with_clip_norm(self):
        noisy = add_noise(np.zeros(200000), 1.2, 0.5, rng.stream(2, "dp-noise"))
        self.assertAlmostEqual(float(noisy.std()), 0.6, delta=0.01)

    def test_same_stream_same_noise(self):
        a = add_noise(np.zeros(8), 1.0, 1.0, rng.stream(3, "dp-noise", 1, 2))
        b = add_noise(np.zeros(8), 1.0, 1.0, rng.stream(3, "dp-noise", 1, 2))
        np.testing.assert_array_equal(a, b)

    def test_privatize_clips_before_noise(self):
        config = DpConfig(clip_norm=1.0, noise_sigma=0.0)
        out = privatize(np.full(4, 10.0, dtype=np.float32), config, rng.stream(4))
        self.assertAlmostEqual(float(np.linalg.norm(out)), 1.0, places=5)


class ConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = DpConfig()
        self.assertEqual((config.clip_norm, config.noise_sigma, config.delta), (1.0, 1.2, 1e-5))

    def test_invalid_values(self):
        for kwargs in ({"clip_norm": 0.0}, {"noise_sigma": -1.0}, {"delta": 1.0}, {"clip_norm": math.inf}):
            with self.assertRaises(ConfigurationError):
                DpConfig(**kwargs)

    def test_unbounded_clip_without_noise_is_allowed(self):
        self.assertTrue(math.isinf(DpConfig(clip_norm=math.inf, noise_sigma=0.0).clip_norm))


class AccountantTests(SimpleTestCase):
    def test_closed_form_minimum(self):
        # for sigma 1.2 and 100 rounds the grid minimum sits at order 1.5
        expected = 100 * 1.5 / (2 * 1.2**2) + math.log(1e5) / 0.5
        self.assertAlmostEqual(account_privacy(1.2, 100, 1e-5), expected, places=9)

    def test_single_round_matches_fine_grid_search(self):
        alphas = np.linspace(1.0001, 600.0, 2_000_000)
        fine = float(np.min(alphas / (2 * 1.44) + math.log(1e5) / (alphas - 1)))
        eps = account_privacy(1.2, 1, 1e-5)
        # the accountant grid is coarser, so it can only sit above the fine minimum
        self.assertGreaterEqual(eps, fine - 1e-9)
        self.assertLess(eps - fine, 0.05)

    def test_zero_rounds_is_conversion_floor(self):
        self.assertAlmostEqual(account_privacy(1.2, 0, 1e-5), math.log(1e5) / (512 - 1), places=12)

    def test_more_noise_less_epsilon(self):
        eps = [account_privacy(s, 50, 1e-5) for s in (0.8, 1.2, 2.0, 4.0)]
        self.assertEqual(eps, sorted(eps, reverse=True))

    def test_more_rounds_more_epsilon(self):
        eps = [account_privacy(1.2, r, 1e-5) for r in (1, 10, 100)]
        self.assertEqual(eps, sorted(eps))

    def test_no_noise_is_unbounded(self):
        self.assertEqual(account_privacy(0.0, 10, 1e-5), math.inf)

    def test_negative_rounds_rejected(self):
        with self.assertRaises(ConfigurationError):
            account_privacy(1.0, -1, 1e-5)

    def test_rdp_composes_linearly(self):
        np.testing.assert_allclose(rdp_curve(1.5, 20), 20 * rdp_curve(1.5, 1))
