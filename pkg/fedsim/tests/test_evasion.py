import numpy
from django.test import SimpleTestCase

from .. import evasion, networks
from ..exceptions import FedsimError, ShapeError
from .helpers import blobs, random_batch, tiny_arch, tiny_conv_arch


class PgdTests(SimpleTestCase):
    def setUp(self):
        self.params = networks.build_model(tiny_conv_arch(), 3)
        self.x, self.y = random_batch((1, 6, 6), 8, 3, seed=1)

    def test_zero_epsilon_is_identity(self):
        cfg = evasion.PgdConfig(0.0, 0.01, 5, random_init=True)
        numpy.testing.assert_array_equal(evasion.pgd_attack(self.params, self.x, self.y, cfg), self.x)

    def test_ball_and_box_constraints(self):
        for seed in range(5):
            params = networks.build_model(tiny_conv_arch(), seed)
            x, y = random_batch((1, 6, 6), 6, 3, seed=seed)
            for random_init in (False, True):
                cfg = evasion.PgdConfig(0.2, 0.07, 6, restarts=2, random_init=random_init)
                x_adv = evasion.pgd_attack(params, x, y, cfg, seed=seed)
                self.assertLessEqual(numpy.abs(x_adv - x).max(), 0.2 + 1e-6)
                self.assertGreaterEqual(x_adv.min(), 0.0)
                self.assertLessEqual(x_adv.max(), 1.0)

    def test_deterministic(self):
        cfg = evasion.PgdConfig(0.1, 0.02, 4, restarts=2, random_init=True)
        first = evasion.pgd_attack(self.params, self.x, self.y, cfg, seed=9)
        second = evasion.pgd_attack(self.params, self.x, self.y, cfg, seed=9)
        numpy.testing.assert_array_equal(first, second)

    def test_more_restarts_never_weaken_the_attack(self):
        for seed in range(4):
            params = networks.build_model(tiny_conv_arch(), seed)
            x, y = random_batch((1, 6, 6), 16, 3, seed=seed + 10)
            fooled = []
            for restarts in (1, 2, 4):
                cfg = evasion.PgdConfig(0.15, 0.05, 3, restarts=restarts, random_init=True)
                x_adv = evasion.pgd_attack(params, x, y, cfg, seed=seed)
                fooled.append(int((networks.predict(params, x_adv).data.argmax(axis=1) != y).sum()))
            self.assertEqual(fooled, sorted(fooled))

    def test_single_step_on_linear_model(self):
        # With one dense layer the input gradient sign is known in closed form
        arch = networks.Architecture.mlp((4, ), 2, ())
        weight = numpy.array([[1.0, -1.0], [-2.0, 2.0], [0.5, -0.5], [-1.0, 1.0]], dtype=numpy.float32)
        params = networks.ModelParams(arch, [("fc1.weight", weight), ("fc1.bias", numpy.zeros(2, dtype=numpy.float32))])
        x = numpy.full((1, 4), 0.5, dtype=numpy.float32)
        cfg = evasion.PgdConfig(0.1, 0.1, 1, random_init=False)
        x_adv = evasion.pgd_attack(params, x, numpy.array([0]), cfg)
        numpy.testing.assert_allclose(x_adv, [[0.4, 0.6, 0.4, 0.6]], atol=1e-6)

    def test_unit_logit_scale_matches_plain_pgd(self):
        cfg = evasion.PgdConfig(0.1, 0.02, 3, random_init=True)
        plain = evasion.pgd_attack(self.params, self.x, self.y, cfg, seed=2)
        scaled = evasion.logit_scaled_pgd(self.params, self.x, self.y, cfg, 1.0, seed=2)
        numpy.testing.assert_array_equal(plain, scaled)

    def test_label_count_mismatch(self):
        with self.assertRaises(ShapeError):
            evasion.pgd_attack(self.params, self.x, self.y[:3], evasion.PgdConfig(0.1, 0.01, 1))

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            evasion.PgdConfig(-0.1, 0.01, 1)
        with self.assertRaises(ValueError):
            evasion.PgdConfig(0.1, 0.0, 1)
        with self.assertRaises(ValueError):
            evasion.PgdConfig(0.1, 0.01, 0)


class TransferTests(SimpleTestCase):
    def test_self_transfer_equals_white_box(self):
        params = networks.build_model(tiny_conv_arch(), 5)
        x, y = random_batch((1, 6, 6), 10, 3, seed=4)
        cfg = evasion.PgdConfig(0.2, 0.05, 4, random_init=False)
        white_box = float((networks.predict(params, evasion.pgd_attack(params, x, y, cfg)).data.argmax(axis=1) == y).mean())
        self.assertEqual(evasion.transfer_attack(params, params, x, y, cfg), white_box)

    def test_incompatible_surrogate(self):
        x, y = random_batch((8, ), 4, 3)
        with self.assertRaises(ShapeError):
            evasion.transfer_attack(networks.build_model(tiny_conv_arch(), 0), networks.build_model(tiny_arch(), 0), x, y, evasion.PgdConfig(0.1, 0.01, 1))


class EvaluationTests(SimpleTestCase):
    def setUp(self):
        self.params = networks.build_model(tiny_arch(), 0)
        self.dataset = blobs(n_per_class=10)

    def test_zero_epsilon_adv_equals_clean(self):
        clean, adv = evasion.evaluate_robustness(self.params, self.dataset, evasion.PgdConfig(0.0, 0.01, 3), batch_size=7)
        self.assertEqual(clean, adv)

    def test_workers_do_not_change_results(self):
        cfg = evasion.PgdConfig(0.1, 0.03, 3, random_init=True)
        single = evasion.evaluate_suite(self.params, self.dataset, cfg, seed=1, logit_scale_T=10.0, batch_size=7, workers=1)
        threaded = evasion.evaluate_suite(self.params, self.dataset, cfg, seed=1, logit_scale_T=10.0, batch_size=7, workers=3)
        self.assertEqual(single, threaded)
        self.assertEqual(set(single), {"clean", "pgd", "logit_scaled"})

    def test_per_sample_results(self):
        cfg = evasion.PgdConfig(0.1, 0.03, 2)
        accuracies, correct = evasion.evaluate_suite(self.params, self.dataset, cfg, surrogate=self.params, batch_size=8, per_sample=True)
        self.assertEqual(len(correct["clean"]), len(self.dataset))
        self.assertAlmostEqual(accuracies["transfer"], correct["transfer"].mean())

    def test_empty_test_set(self):
        with self.assertRaises(FedsimError):
            evasion.evaluate_robustness(self.params, self.dataset.take([]), evasion.PgdConfig(0.1, 0.01, 1))
