import numpy
from django.test import SimpleTestCase

from .. import aggregation
from ..aggregation import AggregationConfig, ClientUpdate
from ..exceptions import AggregationError, ShapeError


def _updates(values, counts=None):
    counts = counts or [1] * len(values)
    return [ClientUpdate(i, numpy.atleast_1d(numpy.asarray(value, dtype=numpy.float32)), count) for i, (value, count) in enumerate(zip(values, counts))]


# Naive reference implementations, written independently of the module under test
def naive_krum(updates, f):
    n = len(updates)
    scores = {}
    for a in updates:
        distances = []
        for b in updates:
            if b is not a:
                distances.append(sum((float(p) - float(q))**2 for p, q in zip(a.vector, b.vector)))
        scores[a.client_id] = sum(sorted(distances)[:n - f - 2])
    best = min(updates, key=lambda update: (scores[update.client_id], update.client_id))
    return best.client_id, scores


def naive_trimmed_mean(updates, f):
    n = len(updates)
    result = []
    for j in range(len(updates[0].vector)):
        column = [(float(update.vector[j]), update.client_id) for update in updates]
        median = sorted(value for value, _id in column)[(n - 1) // 2]
        kept = sorted(column, key=lambda item: (abs(item[0] - median), item[0], item[1]))[:n - 2 * f]
        total = 0.0
        for value, _id in kept:
            total += value
        result.append(total / len(kept))
    return numpy.array(result, dtype=numpy.float32)


def naive_bulyan(updates, f):
    pool = list(updates)
    selected = []
    for _round in range(len(updates) - 2 * f):
        if len(pool) == 1:
            winner = pool[0]
        else:
            neighbours = min(max(len(pool) - f - 2, 1), len(pool) - 1)
            scores = {}
            for a in pool:
                distances = sorted(sum((float(p) - float(q))**2 for p, q in zip(a.vector, b.vector)) for b in pool if b is not a)
                scores[a.client_id] = sum(distances[:neighbours])
            winner = min(pool, key=lambda update: (scores[update.client_id], update.client_id))
        selected.append(winner)
        pool.remove(winner)
    return naive_trimmed_mean(selected, f)


class FedAvgTests(SimpleTestCase):
    def test_single_update(self):
        numpy.testing.assert_array_equal(aggregation.fedavg(_updates([[1.5, -2.0]])), [1.5, -2.0])

    def test_midpoint(self):
        numpy.testing.assert_array_equal(aggregation.fedavg(_updates([0.0, 2.0])), [1.0])

    def test_weighted(self):
        numpy.testing.assert_allclose(aggregation.fedavg(_updates([0.0, 4.0], counts=[1, 3])), [3.0])

    def test_length_mismatch(self):
        with self.assertRaises(ShapeError):
            aggregation.fedavg([ClientUpdate(0, [1.0, 2.0], 1), ClientUpdate(1, [1.0], 1)])


class KrumTests(SimpleTestCase):
    def test_worked_example(self):
        selected, scores = aggregation.krum(_updates([0.0, 1.0, 2.0, 10.0]), f=0)
        self.assertEqual(selected.client_id, 1)
        self.assertEqual(scores, {0: 5.0, 1: 2.0, 2: 5.0, 3: 145.0})

    def test_identical_updates_pick_lowest_id(self):
        updates = [ClientUpdate(client_id, [0.5, 0.5], 1) for client_id in (7, 3, 5)]
        selected, scores = aggregation.krum(updates, f=0)
        self.assertEqual(selected.client_id, 3)
        self.assertEqual(set(scores.values()), {0.0})

    def test_outlier_never_selected(self):
        rng = numpy.random.default_rng(0)
        for _trial in range(50):
            values = list(rng.normal(0, 1, size=(6, 3))) + [numpy.full(3, 1000.0)]
            selected, _scores = aggregation.krum(_updates(values), f=2)
            self.assertNotEqual(selected.client_id, 6)

    def test_output_is_an_input(self):
        updates = _updates(list(numpy.random.default_rng(1).normal(size=(7, 4))))
        selected, _scores = aggregation.krum(updates, f=1)
        self.assertTrue(any(numpy.array_equal(selected.vector, update.vector) for update in updates))

    def test_too_few_updates(self):
        with self.assertRaises(AggregationError):
            aggregation.krum(_updates([0.0, 1.0, 2.0, 3.0]), f=1)


class TrimmedMeanTests(SimpleTestCase):
    def test_worked_example(self):
        numpy.testing.assert_array_equal(aggregation.trimmed_mean(_updates([1.0, 2.0, 3.0, 4.0, 100.0]), f=1), [3.0])

    def test_constant(self):
        numpy.testing.assert_array_equal(aggregation.trimmed_mean(_updates([2.5] * 5), f=2), [2.5])

    def test_no_trimming_is_the_mean(self):
        numpy.testing.assert_allclose(aggregation.trimmed_mean(_updates([1.0, 2.0, 6.0]), f=0), [3.0])

    def test_outlier_cannot_leave_benign_range(self):
        result = aggregation.trimmed_mean(_updates([0.9, 1.0, 1.1, 1.2, 1e9]), f=1)
        self.assertTrue(0.9 <= result[0] <= 1.2)

    def test_chunking_and_workers_do_not_change_result(self):
        updates = _updates(list(numpy.random.default_rng(2).normal(size=(9, 23))))
        whole = aggregation.trimmed_mean(updates, f=2)
        numpy.testing.assert_array_equal(whole, aggregation.trimmed_mean(updates, f=2, chunk_size=5))
        numpy.testing.assert_array_equal(whole, aggregation.trimmed_mean(updates, f=2, chunk_size=4, workers=3))

    def test_too_few_updates(self):
        with self.assertRaises(AggregationError):
            aggregation.trimmed_mean(_updates([1.0, 2.0]), f=1)


class BulyanTests(SimpleTestCase):
    def test_no_byzantine_is_the_mean(self):
        values = numpy.random.default_rng(3).normal(size=(5, 4))
        result, selected = aggregation.bulyan(_updates(list(values)), f=0)
        numpy.testing.assert_allclose(result, values.astype(numpy.float32).mean(axis=0), atol=1e-6)
        self.assertEqual(sorted(selected), [0, 1, 2, 3, 4])

    def test_constant(self):
        result, _selected = aggregation.bulyan(_updates([[1.0, -1.0]] * 7), f=1)
        numpy.testing.assert_array_equal(result, [1.0, -1.0])

    def test_too_few_updates(self):
        with self.assertRaises(AggregationError):
            aggregation.bulyan(_updates([0.0] * 10), f=2)

    def test_random_instance_matches_oracle(self):
        updates = _updates(list(numpy.random.default_rng(4).normal(size=(11, 3))))
        result, _selected = aggregation.bulyan(updates, f=2)
        numpy.testing.assert_allclose(result, naive_bulyan(updates, 2), atol=1e-6)


class OracleTests(SimpleTestCase):
    def test_random_instances(self):
        rng = numpy.random.default_rng(5)
        for _trial in range(1000):
            n = int(rng.integers(3, 12))
            d = int(rng.integers(1, 6))
            updates = _updates(list(rng.normal(0, 1, size=(n, d))))

            f = int(rng.integers(0, (n - 3) // 2 + 1))
            selected, scores = aggregation.krum(updates, f)
            oracle_id, oracle_scores = naive_krum(updates, f)
            self.assertEqual(selected.client_id, oracle_id)
            for client_id, score in oracle_scores.items():
                self.assertAlmostEqual(scores[client_id], score, places=9)

            numpy.testing.assert_array_equal(aggregation.trimmed_mean(updates, f), naive_trimmed_mean(updates, f))

            if n >= 3:
                f_bulyan = int(rng.integers(0, (n - 3) // 4 + 1))
                result, _selected = aggregation.bulyan(updates, f_bulyan)
                numpy.testing.assert_allclose(result, naive_bulyan(updates, f_bulyan), atol=1e-6)

    def test_permutation_invariance(self):
        rng = numpy.random.default_rng(6)
        for _trial in range(50):
            values = rng.normal(size=(11, 4))
            ids = rng.permutation(11)
            updates = [ClientUpdate(int(ids[i]), values[i], 1) for i in range(11)]
            shuffled = [updates[i] for i in rng.permutation(11)]
            self.assertEqual(aggregation.krum(updates, 2)[0].client_id, aggregation.krum(shuffled, 2)[0].client_id)
            numpy.testing.assert_array_equal(aggregation.bulyan(updates, 2)[0], aggregation.bulyan(shuffled, 2)[0])
            numpy.testing.assert_allclose(aggregation.trimmed_mean(updates, 3), aggregation.trimmed_mean(shuffled, 3), atol=1e-6)
            numpy.testing.assert_allclose(aggregation.fedavg(updates), aggregation.fedavg(shuffled), atol=1e-6)


class DispatchTests(SimpleTestCase):
    def test_krum_result(self):
        result = aggregation.aggregate(_updates([0.0, 1.0, 2.0, 10.0]), AggregationConfig("krum", 0))
        self.assertEqual(result.selected_ids, [1])
        numpy.testing.assert_array_equal(result.vector, [1.0])

    def test_trimmed_mean_kept_count(self):
        result = aggregation.aggregate(_updates([1.0, 2.0, 3.0, 4.0, 100.0]), AggregationConfig("trimmed_mean", 1))
        self.assertEqual(result.kept_count, 3)

    def test_preconditions(self):
        with self.assertRaises(AggregationError):
            aggregation.aggregate(_updates([0.0] * 6), AggregationConfig("bulyan", 1))
        with self.assertRaises(ValueError):
            AggregationConfig("median", 0)

    def test_duplicate_ids(self):
        with self.assertRaises(AggregationError):
            aggregation.fedavg([ClientUpdate(0, [1.0], 1), ClientUpdate(0, [2.0], 1)])
