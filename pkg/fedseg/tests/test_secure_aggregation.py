import numpy as np
from django.test import SimpleTestCase

from fedseg.errors import EncodingRangeError, ProtocolError
from fedseg.secure_aggregation import (
    MaskedUpdate,
    VALUE_LIMIT,
    decode_fixed,
    encode_fixed,
    mask_update,
    pairwise_seeds,
    secure_aggregate,
    server_sum,
)


class FixedPointTests(SimpleTestCase):
    def test_encode_decode_is_exact_on_the_grid(self):
        values = np.array([0.5, -0.25, 3.0, -1024.0])
        np.testing.assert_array_equal(decode_fixed(encode_fixed(values)), values)

    def test_out_of_range_rejected(self):
        with self.assertRaises(EncodingRangeError):
            encode_fixed(np.array([0.0, VALUE_LIMIT]))
        with self.assertRaises(EncodingRangeError):
            encode_fixed(np.array([np.nan]))


class AggregateTests(SimpleTestCase):
    def test_two_clients(self):
        seeds = pairwise_seeds(1, 1, [1, 2])
        total = secure_aggregate({1: np.array([0.5]), 2: np.array([0.25])}, seeds)
        np.testing.assert_array_equal(total, [0.75])

    def test_zeros_stay_zero(self):
        seeds = pairwise_seeds(2, 3, [1, 2, 3])
        total = secure_aggregate({k: np.zeros(16) for k in (1, 2, 3)}, seeds)
        np.testing.assert_array_equal(total, np.zeros(16))

    def test_integers_sum_exactly(self):
        gen = np.random.default_rng(0)
        deltas = {k: gen.integers(-100, 100, size=32).astype(np.float64) for k in (1, 2, 3, 4)}
        total = secure_aggregate(deltas, pairwise_seeds(3, 1, deltas))
        np.testing.assert_array_equal(total, sum(deltas.values()))

    def test_five_clients_match_float_sum(self):
        gen = np.random.default_rng(1)
        deltas = {k: gen.normal(scale=0.1, size=1000) for k in range(1, 6)}
        weights = {k: w for k, w in zip(deltas, (0.25, 0.25, 0.25, 0.125, 0.125))}
        total = secure_aggregate(deltas, pairwise_seeds(4, 2, deltas), weights=weights)
        expected = sum(weights[k] * deltas[k] for k in deltas)
        self.assertLessEqual(np.abs(total - expected).max(), 5 * 2.0**-24)

    def test_single_client_rejected(self):
        with self.assertRaises(ProtocolError):
            secure_aggregate({1: np.zeros(3)}, {})

    def test_masked_vectors_hide_the_update(self):
        seeds = pairwise_seeds(5, 1, [1, 2])
        encoded = encode_fixed(np.zeros(8))
        masked = mask_update(1, encoded, 10, seeds, [1, 2])
        self.assertFalse(np.array_equal(masked.masked_fixed, encoded))

    def test_missing_pair_seed(self):
        with self.assertRaises(ProtocolError):
            mask_update(1, encode_fixed(np.zeros(2)), 1, {}, [1, 2])

    def test_length_mismatch(self):
        updates = [MaskedUpdate(1, np.zeros(2, dtype=np.uint64), 1), MaskedUpdate(2, np.zeros(3, dtype=np.uint64), 1)]
        with self.assertRaises(ProtocolError):
            server_sum(updates)

    def test_seeds_change_every_round(self):
        self.assertNotEqual(pairwise_seeds(1, 1, [1, 2]), pairwise_seeds(1, 2, [1, 2]))
        self.assertEqual(sorted(pairwise_seeds(1, 1, [3, 1, 2])), [(1, 2), (1, 3), (2, 3)])
