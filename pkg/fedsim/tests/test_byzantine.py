import numpy
from django.test import SimpleTestCase

from .. import aggregation, byzantine, networks
from ..exceptions import AttackError, ShapeError
from .helpers import blobs, tiny_arch


class ConvergenceAttackTests(SimpleTestCase):
    def test_zero_k_is_the_mean(self):
        result = byzantine.convergence_attack_updates([numpy.array([1.0, 4.0]), numpy.array([3.0, 0.0])], 0.0)
        numpy.testing.assert_array_equal(result, [2.0, 2.0])

    def test_population_std(self):
        numpy.testing.assert_allclose(byzantine.convergence_attack_updates([numpy.array([0.0]), numpy.array([2.0])], -1.5), [-0.5])

    def test_identical_updates(self):
        vector = numpy.array([0.25, -1.0], dtype=numpy.float32)
        numpy.testing.assert_array_equal(byzantine.convergence_attack_updates([vector, vector, vector], 7.0), vector)

    def test_needs_two_colluders(self):
        with self.assertRaises(AttackError):
            byzantine.convergence_attack_updates([numpy.zeros(3)], -1.0)

    def test_lands_inside_trimmed_mean_kept_set(self):
        # 51 clients, 24 colluders sharing the benign distribution, k = -1.5
        rng = numpy.random.default_rng(0)
        d, n, f = 2000, 51, 24
        honest = rng.normal(0, 1, size=(n, d))
        malicious = byzantine.convergence_attack_updates(list(honest[:f]), -1.5).astype(numpy.float32).astype(numpy.float64)
        submitted = numpy.vstack([numpy.tile(malicious, (f, 1)), honest[f:]])
        median = numpy.sort(submitted, axis=0)[(n - 1) // 2]
        distance = numpy.abs(submitted - median)
        cutoff = numpy.sort(distance, axis=0)[n - 2 * f - 1]
        inside = distance <= cutoff
        malicious_rate = inside[0].mean()
        benign_rate = inside[f:].mean()
        self.assertGreater(malicious_rate, 0.7)
        self.assertGreater(malicious_rate, 5 * benign_rate)


class DistillationAttackTests(SimpleTestCase):
    def setUp(self):
        self.arch = tiny_arch(hidden=(6, 5))
        self.global_params = networks.build_model(self.arch, 0)
        data = blobs(n_per_class=8)
        self.x, self.y = data.images, data.labels

    def test_only_the_target_layer_changes(self):
        cfg = byzantine.DistillationAttackConfig([0, 1], temperature=100.0, teacher_epochs=1, student_epochs=2, lr=0.05, batch_size=8)
        update = byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=1)
        layer = networks.smallest_layer(self.arch)
        region = self.arch.layer_slice(layer)
        global_vector = self.global_params.flatten()
        outside = numpy.ones(len(global_vector), dtype=bool)
        outside[region] = False
        numpy.testing.assert_array_equal(update.vector[outside], global_vector[outside])
        self.assertFalse(numpy.array_equal(update.vector[region], global_vector[region]))
        self.assertEqual(update.sample_count, len(self.x))

    def test_no_student_epochs_returns_global(self):
        cfg = byzantine.DistillationAttackConfig([0], teacher_epochs=1, student_epochs=0, lr=0.05)
        update = byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=1)
        numpy.testing.assert_array_equal(update.vector, self.global_params.flatten())

    def test_deterministic(self):
        cfg = byzantine.DistillationAttackConfig([0], target_layer="fc2", teacher_epochs=1, student_epochs=1, lr=0.05, batch_size=8)
        first = byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=4)
        second = byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=4)
        numpy.testing.assert_array_equal(first.vector, second.vector)

    def test_unknown_layer(self):
        cfg = byzantine.DistillationAttackConfig([0], target_layer="conv1")
        with self.assertRaises(AttackError):
            byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=0)

    def test_needs_local_data(self):
        cfg = byzantine.DistillationAttackConfig([0])
        with self.assertRaises(AttackError):
            byzantine.distillation_attack_update(self.global_params, self.x[:0], self.y[:0], cfg, seed=0)

    def test_smaller_step_than_full_finetune(self):
        cfg = byzantine.DistillationAttackConfig([0], teacher_epochs=2, student_epochs=2, lr=0.05, batch_size=8)
        distilled = byzantine.distillation_attack_update(self.global_params, self.x, self.y, cfg, seed=2)
        full = byzantine._train(self.global_params.copy(), self.x, self.y, 2, 1.0, {"kind": "adam"}, 0.05, 8, numpy.random.default_rng(2))
        global_vector = self.global_params.flatten()
        self.assertLess(byzantine.l2_proximity(distilled.vector, [global_vector]), byzantine.l2_proximity(full.flatten(), [global_vector]))

    def test_invalid_temperature(self):
        with self.assertRaises(ValueError):
            byzantine.DistillationAttackConfig([0], temperature=0.0)


class ProximityTests(SimpleTestCase):
    def test_equal_to_mean(self):
        self.assertEqual(byzantine.l2_proximity(numpy.array([1.0, 2.0]), [numpy.array([0.0, 2.0]), numpy.array([2.0, 2.0])]), 0.0)

    def test_one_dimension(self):
        self.assertEqual(byzantine.l2_proximity(numpy.array([3.0]), [numpy.array([1.0]), numpy.array([1.0])]), 4.0)

    def test_length_mismatch(self):
        with self.assertRaises(ShapeError):
            byzantine.l2_proximity(numpy.zeros(2), [numpy.zeros(3)])

    def test_client_update_vectors_are_float32(self):
        self.assertEqual(aggregation.ClientUpdate(0, [1.0], 1).vector.dtype, numpy.float32)
