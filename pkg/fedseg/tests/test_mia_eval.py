import math
import tempfile

import numpy as np
from django.test import SimpleTestCase

from fedseg.errors import UsageError
from fedseg.fl_engine import train_local_only
from fedseg.mia_eval import (
    FEATURE_NAMES,
    MiaTracker,
    auc_from_scores,
    extract_features,
    features_from_probs,
    fit_attack,
    sample_targets,
    train_attack,
    train_shadow,
)
from fedseg.segmentation_model import build_model
from fedseg.synth_data import load_federation
from fedseg.task_processor import ClientWorkerPool
from fedseg.tests.fixtures import MODEL, build_wide, tiny_federation, train_config


class AucTests(SimpleTestCase):
    def test_perfect_separation(self):
        self.assertEqual(auc_from_scores([0.9, 0.8, 0.7], [0.1, 0.2]), 1.0)

    def test_reversed_separation(self):
        self.assertEqual(auc_from_scores([0.1, 0.2], [0.9, 0.8, 0.7]), 0.0)

    def test_all_ties_score_one_half(self):
        self.assertEqual(auc_from_scores([0.5] * 4, [0.5] * 6), 0.5)

    def test_partial_overlap(self):
        # pairs won: 0.6 beats 0.4 only; 0.8 beats both
        self.assertEqual(auc_from_scores([0.6, 0.8], [0.4, 0.7]), 0.75)

    def test_two_by_two(self):
        self.assertEqual(auc_from_scores([0.9, 0.4], [0.6, 0.1]), 0.75)

    def test_swapping_classes_complements(self):
        gen = np.random.default_rng(3)
        a, b = gen.normal(size=30), gen.normal(0.3, size=20)
        self.assertAlmostEqual(auc_from_scores(a, b) + auc_from_scores(b, a), 1.0, places=12)

    def test_monotone_transform_keeps_auc(self):
        gen = np.random.default_rng(4)
        a, b = gen.normal(size=25), gen.normal(0.5, size=25)
        self.assertAlmostEqual(auc_from_scores(a, b), auc_from_scores(np.exp(a), np.exp(b)), places=12)

    def test_empty_class_rejected(self):
        with self.assertRaises(UsageError):
            auc_from_scores([], [0.5])


class FeatureTests(SimpleTestCase):
    def test_constant_half_probability(self):
        masks = np.zeros((2, 1, 4, 4), dtype=np.uint8)
        features = features_from_probs(np.full((2, 1, 4, 4), 0.5), masks)
        self.assertEqual(features.shape, (2, len(FEATURE_NAMES)))
        np.testing.assert_allclose(features[:, 0], math.log(2))
        np.testing.assert_allclose(features[:, 1], math.log(2))
        np.testing.assert_allclose(features[:, 2], 0.5)
        # everything predicted foreground against an empty mask
        np.testing.assert_array_equal(features[:, 3], 0.0)

    def test_confident_correct_prediction(self):
        masks = np.zeros((1, 1, 4, 4), dtype=np.uint8)
        masks[0, 0, 0] = 1
        probs = np.where(masks == 1, 0.999, 0.001)
        bce, entropy, confidence, dice = features_from_probs(probs, masks)[0]
        self.assertLess(bce, 0.01)
        self.assertLess(entropy, 0.01)
        self.assertGreater(confidence, 0.99)
        self.assertEqual(dice, 1.0)


class AttackFitTests(SimpleTestCase):
    def test_separable_features_give_high_auc(self):
        gen = np.random.default_rng(0)
        members = gen.normal(size=(50, 4))
        nonmembers = gen.normal(size=(50, 4))
        members[:, 0] -= 3.0
        attack = fit_attack(members, nonmembers)
        self.assertGreater(auc_from_scores(attack.score(members), attack.score(nonmembers)), 0.95)
        self.assertLess(attack.weights[0], 0.0)

    def test_unrelated_labels_stay_near_chance(self):
        gen = np.random.default_rng(1)
        pool = gen.normal(size=(400, 4))
        attack = fit_attack(pool[:100], pool[100:200])
        auc = auc_from_scores(attack.score(pool[200:300]), attack.score(pool[300:]))
        self.assertAlmostEqual(auc, 0.5, delta=0.12)

    def test_constant_feature_keeps_zero_weight(self):
        gen = np.random.default_rng(2)
        members = gen.normal(size=(30, 4))
        nonmembers = gen.normal(size=(30, 4)) + 1.0
        members[:, 3] = 1.0
        nonmembers[:, 3] = 1.0
        attack = fit_attack(members, nonmembers)
        self.assertEqual(attack.weights[3], 0.0)
        self.assertFalse(attack.active[3])
        self.assertTrue(np.all(np.isfinite(attack.score(members))))

    def test_too_few_samples(self):
        with self.assertRaises(UsageError):
            fit_attack(np.zeros((5, 4)), np.zeros((30, 4)))

    def test_attack_items_are_named(self):
        gen = np.random.default_rng(3)
        attack = fit_attack(gen.normal(size=(20, 4)), gen.normal(size=(20, 4)), shadow_seed=9)
        keys = dict(attack.items())
        self.assertIn("weight.max_confidence", keys)
        self.assertEqual(keys["shadow_seed"], "9")


class PipelineTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.federation = tiny_federation(cls._tmp.name)
        cfg = train_config("centralized", rounds=1)
        cls.shadow = train_shadow(cls.federation.shadow_members, cfg, 4, MODEL)
        cls.attack = train_attack(cls.shadow, cls.federation.shadow_members, cls.federation.shadow_nonmembers, 4)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_shadow_training_is_deterministic(self):
        again = train_shadow(self.federation.shadow_members, train_config("centralized", rounds=1), 4, MODEL)
        self.assertTrue(again.identical(self.shadow))
        self.assertFalse(self.shadow.identical(build_model(MODEL, 4)))

    def test_target_sampling(self):
        members, nonmembers = sample_targets(self.federation, 5, seed=1)
        self.assertEqual(len(members), 5)
        # the validation splits hold only 2 + 1 slices
        self.assertEqual(len(nonmembers), 3)
        again, _ = sample_targets(self.federation, 5, seed=1)
        np.testing.assert_array_equal(again.images, members.images)

    def test_single_sample_features(self):
        sample = self.federation.test.subset([0])
        features = extract_features(self.shadow, sample)
        self.assertTrue(0.0 <= features.dice <= 1.0)
        self.assertEqual(features.as_array().shape, (4,))

    def test_tracker_cadence_and_final_round(self):
        members, nonmembers = sample_targets(self.federation, 5, seed=1)
        tracker = MiaTracker(self.attack, members, nonmembers, cadence=3, final_round=4)
        model = build_model(MODEL, 1)
        observed = {r: tracker.observe(r, model) for r in range(1, 5)}
        self.assertIsNone(observed[1])
        self.assertIsNone(observed[2])
        self.assertIsNotNone(observed[3])
        self.assertIsNotNone(observed[4])
        self.assertEqual([r for r, _ in tracker.series], [3, 4])
        self.assertTrue(0.0 <= observed[3] <= 1.0)

    def test_disabled_tracker(self):
        tracker = MiaTracker(self.attack, *sample_targets(self.federation, 3, seed=2), cadence=0, final_round=1)
        self.assertIsNone(tracker.observe(1, build_model(MODEL, 1)))

    def test_record_rejects_repeated_round(self):
        members, nonmembers = sample_targets(self.federation, 3, seed=2)
        tracker = MiaTracker(self.attack, members, nonmembers, cadence=1, final_round=2)
        tracker.record(1, 0.5)
        with self.assertRaises(UsageError):
            tracker.record(1, 0.6)
        self.assertEqual(tracker.series, [(1, 0.5)])

    def test_fork_starts_empty(self):
        members, nonmembers = sample_targets(self.federation, 3, seed=2)
        tracker = MiaTracker(self.attack, members, nonmembers, cadence=2, final_round=5)
        tracker.record(2, 0.5)
        fork = tracker.fork()
        self.assertEqual(fork.series, [])
        self.assertEqual((fork.cadence, fork.final_round), (2, 5))
        self.assertIs(fork.attack, self.attack)

    def test_local_only_series_under_threads(self):
        members, nonmembers = sample_targets(self.federation, 5, seed=1)
        series = {}
        for threads in (1, 2):
            tracker = MiaTracker(self.attack, members, nonmembers, cadence=1, final_round=3)
            with ClientWorkerPool(threads) as pool:
                result = train_local_only(
                    self.federation, train_config("local_only", rounds=3), 3, MODEL, tracker=tracker, pool=pool
                )
            self.assertEqual([r for r, _ in tracker.series], [1, 2, 3])
            self.assertEqual([auc for _, auc in tracker.series], [r.mia_auc for r in result.history.records])
            series[threads] = tracker.series
        self.assertEqual(series[1], series[2])


class UntrainedModelTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.federation = load_federation(build_wide(cls._tmp.name))

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_untrained_model_scores_near_chance(self):
        members, nonmembers = sample_targets(self.federation, 200, seed=3)
        self.assertEqual((len(members), len(nonmembers)), (200, 200))
        shadow = train_shadow(self.federation.shadow_members, train_config("centralized", rounds=1), 3, MODEL)
        attack = train_attack(shadow, self.federation.shadow_members, self.federation.shadow_nonmembers, 3)
        tracker = MiaTracker(attack, members, nonmembers, cadence=1, final_round=1)
        auc = tracker.observe(1, build_model(MODEL, 3))
        self.assertGreaterEqual(auc, 0.4)
        self.assertLessEqual(auc, 0.6)
